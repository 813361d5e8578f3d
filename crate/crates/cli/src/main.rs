//! `pdmr` command-line front-end.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input, 3 runtime failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pdmr_core::detector::{
    bias_field_check, noise_budget, DEFAULT_INPUT_RESISTANCE, ROOM_TEMPERATURE,
};
use pdmr_core::experiments::{run_experiment, ExperimentConfig, ExperimentError, SweepKind};
use pdmr_core::io::{load_config, write_results, IoError, RunManifest};
use pdmr_core::nv::steady_state_photocurrent;
use pdmr_core::sensitivity::{carrier_rate_from_current, published_comparisons, SensitivityInputs};
use pdmr_core::sequence::{parse_sequence, print_sequence};

/// Electrode gap used for the bias-field check (m).
const ELECTRODE_GAP_M: f64 = 15e-6;

#[derive(Parser, Debug)]
#[command(
    name = "pdmr",
    version,
    about = "Photoelectric NV magnetometry simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output table path (CSV); sidecars are written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// CW ODMR frequency sweep.
    Odmr(RunArgs),
    /// Photocurrent versus laser power.
    Saturation(RunArgs),
    /// Photocurrent and dip depth versus bias voltage.
    Bias(RunArgs),
    /// Rabi oscillations per microwave amplitude.
    Rabi(RunArgs),
    /// Spin-echo decay.
    Cpmg(RunArgs),
    /// Stroboscopic AC detection sweep.
    Plsd(RunArgs),
    /// Sensitivity figures next to the published ones.
    Sensitivity(RunArgs),
    /// Noise budget of the photocurrent readout.
    Noise(RunArgs),
    /// Check a sequence file and print its canonical form.
    Parse { file: PathBuf },
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Read { .. } | IoError::Parse { .. } | IoError::Validation(_) => {
                Failure::Invalid(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config { .. } => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cmd: Command) -> Result<String, Failure> {
    match cmd {
        Command::Odmr(a) => simulate(SweepKind::Odmr, &a),
        Command::Saturation(a) => simulate(SweepKind::Saturation, &a),
        Command::Bias(a) => simulate(SweepKind::Bias, &a),
        Command::Rabi(a) => simulate(SweepKind::Rabi, &a),
        Command::Cpmg(a) => simulate(SweepKind::Cpmg, &a),
        Command::Plsd(a) => simulate(SweepKind::Plsd, &a),
        Command::Sensitivity(a) => sensitivity(&load(&a)?),
        Command::Noise(a) => noise(&load(&a)?),
        Command::Parse { file } => parse(&file),
    }
}

fn simulate(kind: SweepKind, args: &RunArgs) -> Result<String, Failure> {
    let mut cfg = load(args)?;
    match cfg.sweep.kind {
        Some(k) if k != kind => {
            return Err(Failure::Invalid(format!(
                "config sweep.kind is `{k}` but the subcommand is `{kind}`"
            )))
        }
        _ => cfg.sweep.kind = Some(kind),
    }
    cfg.validate()?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{kind}.csv")));
    let mut manifest = RunManifest::start(&cfg);
    let result = match args.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))?;
            pool.install(|| run_experiment(&cfg))?
        }
        None => run_experiment(&cfg)?,
    };
    write_results(&result, &mut manifest, &out)?;

    let mut s = String::new();
    writeln!(
        s,
        "{kind}: {} points x {} cycles, seed {}",
        result.sweep_values.len(),
        cfg.cycles_per_point,
        cfg.seed
    )
    .unwrap();
    writeln!(s, "config digest {}", manifest.config_digest).unwrap();
    if let Some(err) = &result.fit_error {
        writeln!(s, "fit failed: {err}").unwrap();
    }
    for (k, v) in &result.summary {
        writeln!(s, "  {k:<32} {v:.6e}").unwrap();
    }
    for p in &manifest.outputs {
        writeln!(s, "wrote {p}").unwrap();
    }
    Ok(s)
}

fn operating_current(cfg: &ExperimentConfig) -> Result<f64, Failure> {
    let p = &cfg.protocol;
    steady_state_photocurrent(&cfg.nv, p.laser_power_mw, p.bias_v, 0.0)
        .map(|pa| pa * 1e-12)
        .map_err(|e| Failure::Invalid(e.to_string()))
}

fn sensitivity(cfg: &ExperimentConfig) -> Result<String, Failure> {
    cfg.validate()?;
    let current = operating_current(cfg)?;
    let inputs = SensitivityInputs {
        linewidth_fwhm: cfg.nv.linewidth_fwhm,
        contrast: cfg.nv.contrast_cw,
        gamma: cfg.nv.gamma,
        rate: carrier_rate_from_current(current),
        ..SensitivityInputs::default()
    };
    let rows = published_comparisons(&inputs).map_err(|e| Failure::Invalid(e.to_string()))?;
    let mut s = String::new();
    writeln!(
        s,
        "carrier rate at {:.3} pA: {:.4e} /s",
        current * 1e12,
        inputs.rate
    )
    .unwrap();
    writeln!(
        s,
        "{:<38} {:>12} {:>12} {:>8}  unit",
        "quantity", "computed", "published", "ratio"
    )
    .unwrap();
    for r in rows {
        writeln!(
            s,
            "{:<38} {:>12.4e} {:>12.4e} {:>8.4}  {}",
            r.label,
            r.computed,
            r.published,
            r.ratio(),
            r.unit
        )
        .unwrap();
    }
    Ok(s)
}

fn noise(cfg: &ExperimentConfig) -> Result<String, Failure> {
    cfg.validate()?;
    let current = operating_current(cfg)?;
    let b = noise_budget(
        current,
        DEFAULT_INPUT_RESISTANCE,
        ROOM_TEMPERATURE,
        &cfg.ipcd,
    );
    let fa = 1e15;
    let mut s = String::new();
    writeln!(s, "{:<34} {:>10}  unit", "quantity", "value").unwrap();
    writeln!(s, "{:<34} {:>10.3}  pA", "photocurrent", current * 1e12).unwrap();
    writeln!(s, "{:<34} {:>10.3}  fA/√Hz", "shot", b.shot * fa).unwrap();
    writeln!(
        s,
        "{:<34} {:>10.3}  fA/√Hz",
        format!("johnson ({} GΩ)", DEFAULT_INPUT_RESISTANCE / 1e9),
        b.johnson * fa
    )
    .unwrap();
    writeln!(
        s,
        "{:<34} {:>10.3}  fA/√Hz",
        "quantization",
        b.quantization * fa
    )
    .unwrap();
    writeln!(s, "{:<34} {:>10.3}  fA/√Hz", "total", b.total * fa).unwrap();
    writeln!(s, "{:<34} {:>10}", "dominant", b.dominant()).unwrap();
    let check = bias_field_check(cfg.protocol.bias_v, ELECTRODE_GAP_M)
        .map_err(|e| Failure::Invalid(e.to_string()))?;
    writeln!(
        s,
        "{:<34} {:>10.3}  V/µm ({})",
        format!("bias field ({} V over 15 µm)", cfg.protocol.bias_v),
        check.field_v_per_um(),
        if check.is_ok() {
            "ok"
        } else {
            "above the air breakdown limit"
        }
    )
    .unwrap();
    Ok(s)
}

fn parse(file: &Path) -> Result<String, Failure> {
    let text = std::fs::read_to_string(file)
        .map_err(|e| Failure::Invalid(format!("cannot read `{}`: {e}", file.display())))?;
    let seq =
        parse_sequence(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", file.display())))?;
    Ok(print_sequence(&seq))
}
