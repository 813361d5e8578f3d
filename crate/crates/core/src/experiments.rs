//! Simulated measurements: each `run_*` sweeps one parameter, synthesizes the
//! two IPCD segment currents per point, digitizes them cycle by cycle and
//! fits the matching model.
//!
//! Differential currents are reported in A. Pulsed protocols (Rabi, CPMG,
//! PLSD) divide the segment difference by the laser duty of the readout
//! pulse, so points with different cycle lengths share one scale.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{detector_rng, lowpass_gain, quantize_current, DetectorError, IPCDConfig};
use crate::fit::{curve_fit, FitReport, Model};
use crate::nv::{
    axis_projections, echo_coherence, evolve_two_level, nv_axes, odmr_response, precess_refocused,
    steady_state_photocurrent, AcTone, MagneticEnvironment, NVParams, NvError, RateConstants,
    TwoLevelState,
};
use crate::sequence::{
    gen_cpmg, gen_odmr, gen_plsd_with_width, gen_rabi, Channel, PulseEvent, PulsedTiming, Segment,
    SequenceError,
};

const PICO: f64 = 1e-12;
/// Tone frequencies used for PLSD when the environment defines none.
pub const DEFAULT_PLSD_TONES_HZ: [f64; 4] = [1e3, 1e5, 1e6, 1e7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Odmr,
    Saturation,
    Bias,
    Rabi,
    Cpmg,
    Plsd,
}

impl SweepKind {
    pub const ALL: [SweepKind; 6] = [
        SweepKind::Odmr,
        SweepKind::Saturation,
        SweepKind::Bias,
        SweepKind::Rabi,
        SweepKind::Cpmg,
        SweepKind::Plsd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Odmr => "odmr",
            SweepKind::Saturation => "saturation",
            SweepKind::Bias => "bias",
            SweepKind::Rabi => "rabi",
            SweepKind::Cpmg => "cpmg",
            SweepKind::Plsd => "plsd",
        }
    }

    /// Sweep axis unit, for table headers and messages.
    pub fn axis_unit(self) -> &'static str {
        match self {
            SweepKind::Odmr => "Hz",
            SweepKind::Saturation => "mW",
            SweepKind::Bias => "V",
            SweepKind::Rabi | SweepKind::Cpmg => "s",
            SweepKind::Plsd => "relative detuning",
        }
    }

    pub fn default_points(self) -> Vec<f64> {
        let lin = |a: f64, b: f64, n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
                .collect()
        };
        match self {
            SweepKind::Odmr => lin(2.82e9, 2.92e9, 50),
            SweepKind::Saturation => lin(0.0, 12.0, 25),
            SweepKind::Bias => lin(0.0, 24.0, 25),
            SweepKind::Rabi => (0..=100).map(|i| i as f64 * 10e-9).collect(),
            SweepKind::Cpmg => (0..=40).map(|i| i as f64 * 0.2e-6).collect(),
            SweepKind::Plsd => (-20..=20).map(|i| i as f64 * 0.01).collect(),
        }
    }
}

impl std::fmt::Display for SweepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: Option<SweepKind>,
    /// Empty means the kind's default axis.
    pub points: Vec<f64>,
}

/// Drive settings shared by the protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub laser_power_mw: f64,
    pub bias_v: f64,
    /// `false` pulses the laser during ODMR while the microwave stays on.
    pub odmr_cw: bool,
    /// Rabi frequency (Hz) at unit microwave amplitude.
    pub rabi_rate_hz: f64,
    pub mw_amplitudes: Vec<f64>,
    /// Detuning of the off-resonant Rabi control, in units of the Rabi frequency.
    pub off_resonant_factor: f64,
    pub laser_pulse: f64,
    pub gap: f64,
    pub plsd_duty: f64,
    /// Photocurrent change per tesla at the microwave operating point (A/T).
    pub conversion_slope: f64,
    /// Index into the four NV orientations used for field projections.
    pub sensing_axis: usize,
    /// Amplitude (T) of the default PLSD tones.
    pub plsd_tone_amplitude: f64,
    /// Detected fluorescence per mW of laser power (1/s), linear model.
    pub fluorescence_rate_per_mw: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            laser_power_mw: 8.0,
            bias_v: 15.0,
            odmr_cw: true,
            rabi_rate_hz: 10e6,
            mw_amplitudes: vec![0.25, 0.5, 0.75, 1.0],
            off_resonant_factor: 10.0,
            laser_pulse: 5e-6,
            gap: 1e-6,
            plsd_duty: 0.25,
            conversion_slope: 7.8e-10,
            sensing_axis: 0,
            plsd_tone_amplitude: 100e-6,
            fluorescence_rate_per_mw: 5e4,
        }
    }
}

impl ProtocolConfig {
    pub fn timing(&self) -> PulsedTiming {
        PulsedTiming {
            laser_pulse: self.laser_pulse,
            gap: self.gap,
            laser_power_mw: self.laser_power_mw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cycles_per_point: u64,
    pub seed: u64,
    /// `false` replaces the IPCD by an ideal, noiseless and unquantized meter.
    pub noise: bool,
    pub nv: NVParams,
    pub rates: RateConstants,
    #[serde(rename = "environment")]
    pub env: MagneticEnvironment,
    pub ipcd: IPCDConfig,
    pub protocol: ProtocolConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cycles_per_point: 1000,
            seed: 0,
            noise: true,
            nv: NVParams::default(),
            rates: RateConstants::default(),
            env: MagneticEnvironment::default(),
            ipcd: IPCDConfig::default(),
            protocol: ProtocolConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Nv(#[from] NvError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

fn config_err(field: &str, reason: impl Into<String>) -> ExperimentError {
    ExperimentError::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn with_kind(mut self, kind: SweepKind) -> Self {
        self.sweep.kind = Some(kind);
        self
    }

    pub fn kind(&self) -> Result<SweepKind, ExperimentError> {
        self.sweep
            .kind
            .ok_or_else(|| config_err("sweep.kind", "no sweep kind given"))
    }

    pub fn points(&self) -> Vec<f64> {
        if self.sweep.points.is_empty() {
            self.sweep
                .kind
                .map(SweepKind::default_points)
                .unwrap_or_default()
        } else {
            self.sweep.points.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.nv.validate()?;
        self.env.validate()?;
        self.ipcd.validate()?;
        if self.cycles_per_point < 1 {
            return Err(config_err("cycles_per_point", "must be >= 1"));
        }
        let r = &self.rates;
        for (name, v) in [
            ("rates.pump_rate_ref", r.pump_rate_ref),
            ("rates.pump_power_ref_mw", r.pump_power_ref_mw),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(name, format!("must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("rates.ionization_rate_ref", r.ionization_rate_ref),
            ("rates.mw_mixing_rate", r.mw_mixing_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(name, format!("must be >= 0, got {v}")));
            }
        }
        let p = &self.protocol;
        let positive = [
            ("protocol.rabi_rate_hz", p.rabi_rate_hz),
            ("protocol.laser_pulse", p.laser_pulse),
            ("protocol.off_resonant_factor", p.off_resonant_factor),
            ("protocol.plsd_tone_amplitude", p.plsd_tone_amplitude),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(name, format!("must be > 0, got {v}")));
            }
        }
        let non_negative = [
            ("protocol.laser_power_mw", p.laser_power_mw),
            ("protocol.gap", p.gap),
            ("protocol.conversion_slope", p.conversion_slope),
            (
                "protocol.fluorescence_rate_per_mw",
                p.fluorescence_rate_per_mw,
            ),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(name, format!("must be >= 0, got {v}")));
            }
        }
        if !p.bias_v.is_finite() {
            return Err(config_err("protocol.bias_v", "must be finite"));
        }
        if !(p.plsd_duty > 0.0 && p.plsd_duty < 1.0) {
            return Err(config_err(
                "protocol.plsd_duty",
                format!("must lie in (0, 1), got {}", p.plsd_duty),
            ));
        }
        if p.sensing_axis > 3 {
            return Err(config_err(
                "protocol.sensing_axis",
                format!("must be 0..=3, got {}", p.sensing_axis),
            ));
        }
        if p.mw_amplitudes.is_empty()
            || p.mw_amplitudes
                .iter()
                .any(|a| !(*a >= 0.0 && a.is_finite()))
        {
            return Err(config_err(
                "protocol.mw_amplitudes",
                "need at least one finite amplitude >= 0",
            ));
        }
        if p.laser_power_mw >= self.nv.max_saturation_power() {
            return Err(config_err(
                "protocol.laser_power_mw",
                "outside the saturation-law domain",
            ));
        }
        let points = self.points();
        if let Some(kind) = self.sweep.kind {
            if points.is_empty() {
                return Err(config_err("sweep.points", "must not be empty"));
            }
            if points.iter().any(|x| !x.is_finite()) {
                return Err(config_err("sweep.points", "must be finite"));
            }
            let up = points.windows(2).all(|w| w[1] > w[0]);
            let down = points.windows(2).all(|w| w[1] < w[0]);
            if !(up || down) {
                return Err(config_err("sweep.points", "must be strictly monotone"));
            }
            let bad = |cond: &dyn Fn(f64) -> bool| points.iter().any(|&x| cond(x));
            match kind {
                SweepKind::Odmr if bad(&|x| x <= 0.0) => {
                    return Err(config_err("sweep.points", "frequencies must be > 0"))
                }
                SweepKind::Saturation
                    if bad(&|x| x < 0.0 || x >= self.nv.max_saturation_power()) =>
                {
                    return Err(config_err(
                        "sweep.points",
                        "powers must lie in [0, 1/|beta_sat|)",
                    ))
                }
                SweepKind::Rabi | SweepKind::Cpmg if bad(&|x| x < 0.0) => {
                    return Err(config_err("sweep.points", "durations must be >= 0"))
                }
                SweepKind::Plsd if bad(&|x| x <= -1.0) => {
                    return Err(config_err(
                        "sweep.points",
                        "relative detunings must be > -1",
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// One curve of a result, e.g. a Rabi trace per amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub std: Vec<f64>,
    pub fit: Option<FitReport>,
    pub fit_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub kind: SweepKind,
    pub sweep_values: Vec<f64>,
    /// Mean differential current per point (A).
    pub mean_differential: Vec<f64>,
    /// Sample standard deviation over cycles (A).
    pub std: Vec<f64>,
    pub n_cycles: Vec<u64>,
    pub fit: Option<FitReport>,
    pub fit_error: Option<String>,
    pub series: Vec<Series>,
    /// Derived scalars in SI units.
    pub summary: BTreeMap<String, f64>,
}

impl ExperimentResult {
    pub fn summary_value(&self, key: &str) -> f64 {
        self.summary.get(key).copied().unwrap_or(f64::NAN)
    }

    pub fn series(&self, label: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.label == label)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    match cfg.kind()? {
        SweepKind::Odmr => run_odmr_scan(cfg),
        SweepKind::Saturation => run_saturation_scan(cfg),
        SweepKind::Bias => run_bias_scan(cfg),
        SweepKind::Rabi => run_rabi(cfg),
        SweepKind::Cpmg => run_cpmg(cfg),
        SweepKind::Plsd => run_plsd_sweep(cfg),
    }
}

// ---------------------------------------------------------------------------
// Shared machinery

#[derive(Debug, Clone, Copy, PartialEq)]
struct PointStats {
    mean: f64,
    std: f64,
}

/// Per-point random stream: series index in the high word, point index in the low word.
fn stream_id(series: usize, point: usize) -> u64 {
    ((series as u64) << 32) | point as u64
}

/// Digitize segment currents `i_a`, `i_b` (A) for every cycle and return the
/// statistics of `(a - b) / norm`.
fn measure(cfg: &ExperimentConfig, stream: u64, i_a: f64, i_b: f64, norm: f64) -> PointStats {
    if !cfg.noise {
        return PointStats {
            mean: (i_a - i_b) / norm,
            std: 0.0,
        };
    }
    let mut rng = detector_rng(cfg.seed, stream);
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..cfg.cycles_per_point {
        let a = quantize_current(i_a, &cfg.ipcd, &mut rng).current_estimate;
        let b = quantize_current(i_b, &cfg.ipcd, &mut rng).current_estimate;
        let d = (a - b) / norm;
        let delta = d - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (d - mean);
    }
    let n = cfg.cycles_per_point;
    let std = if n > 1 {
        (m2 / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    PointStats { mean, std }
}

/// Error-bar floor: the digitization noise of one differential reading.
fn sigma_floor(cfg: &ExperimentConfig) -> f64 {
    let rms = if cfg.noise {
        cfg.ipcd.noise_rms_lsb
    } else {
        0.0
    };
    cfg.ipcd.lsb_current * (2.0 * (rms * rms + 1.0 / 12.0)).sqrt()
}

/// Parameter conversion factors from fit units (x in `xu`, y in `yu`) to SI.
fn unit_factors(model: Model, xu: f64, yu: f64) -> Vec<f64> {
    match model {
        Model::GaussianDips => vec![yu, yu, xu, xu, xu],
        Model::DampedSine => vec![yu, yu, xu, 1.0 / xu, 1.0],
        Model::ExpDecay => vec![yu, yu, xu],
        Model::Lowpass => vec![yu, xu],
        Model::Linear => vec![yu, yu / xu],
        Model::Saturation => vec![yu / (xu * xu), 1.0 / xu],
    }
}

/// Fit in well-scaled units and report in SI.
fn fit_scaled(
    model: Model,
    x: &[f64],
    y: &[f64],
    sigma: &[f64],
    floor: f64,
    xu: f64,
    yu: f64,
) -> (Option<FitReport>, Option<String>) {
    let xs: Vec<f64> = x.iter().map(|v| v / xu).collect();
    let ys: Vec<f64> = y.iter().map(|v| v / yu).collect();
    let ss: Vec<f64> = sigma.iter().map(|s| s.max(floor) / yu.abs()).collect();
    match curve_fit(model, &xs, &ys, Some(&ss), None) {
        Ok(r) => (Some(r.rescaled(&unit_factors(model, xu, yu))), None),
        Err(e) => (None, Some(e.to_string())),
    }
}

fn photocurrent(
    cfg: &ExperimentConfig,
    power_mw: f64,
    bias_v: f64,
    contrast: f64,
) -> Result<f64, ExperimentError> {
    Ok(steady_state_photocurrent(&cfg.nv, power_mw, bias_v, contrast)? * PICO)
}

/// Mean current (A) over one repetition of `seg`; `contrast(i, event)` gives
/// the spin-contrast input of laser event `i`.
fn segment_current(
    cfg: &ExperimentConfig,
    seg: &Segment,
    contrast: impl Fn(usize, &PulseEvent) -> f64,
) -> Result<f64, ExperimentError> {
    let mut charge = 0.0;
    for (i, e) in seg.events.iter().enumerate() {
        if e.channel == Channel::Laser {
            let power = e.attributes.power_mw.unwrap_or(0.0);
            charge += photocurrent(cfg, power, cfg.protocol.bias_v, contrast(i, e))? * e.duration();
        }
    }
    Ok(charge / (seg.duration_ns as f64 * 1e-9))
}

/// Index of the laser pulse that reads out the spin after the microwave
/// block: the first laser event starting after the last microwave event,
/// wrapping to the first laser event of the cycle.
fn readout_index(seg: &Segment) -> Option<usize> {
    let mw_end = seg
        .events_on(Channel::Mw)
        .map(PulseEvent::end_ns)
        .max()
        .unwrap_or(0);
    let mut lasers: Vec<(usize, &PulseEvent)> = seg
        .events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.channel == Channel::Laser)
        .collect();
    lasers.sort_by_key(|(_, e)| e.t_start_ns);
    lasers
        .iter()
        .find(|(_, e)| e.t_start_ns >= mw_end)
        .or(lasers.first())
        .map(|(i, _)| *i)
}

/// Spin state after the microwave events of `seg`, starting polarized.
/// With `refocused`, free evolution between pulses is echo-protected and the
/// coherence envelope is applied before the last pulse.
fn spin_after_mw(
    cfg: &ExperimentConfig,
    seg: &Segment,
    detuning: f64,
    refocused: bool,
) -> TwoLevelState {
    let mut mw: Vec<&PulseEvent> = seg.events_on(Channel::Mw).collect();
    mw.sort_by_key(|e| e.t_start_ns);
    let mut state = TwoLevelState::polarized();
    let mut free_total = 0.0;
    let mut last_end: Option<u64> = None;
    for (k, e) in mw.iter().enumerate() {
        if let Some(end) = last_end {
            let free = (e.t_start_ns - end) as f64 * 1e-9;
            free_total += free;
            state = if refocused {
                precess_refocused(&state, detuning, free)
            } else {
                evolve_two_level(&state, 0.0, 0.0, detuning, free, &cfg.nv)
            };
        }
        if refocused && k + 1 == mw.len() && k > 0 {
            let n_pi = (mw.len() - 2) as u32;
            state = state.dephase(echo_coherence(&cfg.nv, free_total, n_pi));
        }
        let a = &e.attributes;
        let rabi = cfg.protocol.rabi_rate_hz * a.amplitude.unwrap_or(1.0);
        state = evolve_two_level(
            &state,
            rabi,
            a.phase.unwrap_or(0.0),
            detuning + a.detuning.unwrap_or(0.0),
            e.duration(),
            &cfg.nv,
        );
        last_end = Some(e.end_ns());
    }
    state
}

/// Differential (A) of a pulsed A/B pair, normalized by the readout duty.
fn pulsed_point(
    cfg: &ExperimentConfig,
    a: &Segment,
    b: &Segment,
    p_plus: f64,
    stream: u64,
) -> Result<PointStats, ExperimentError> {
    let c = cfg.nv.contrast_cw;
    let ra = readout_index(a);
    let i_a = segment_current(cfg, a, |i, _| if Some(i) == ra { -c * p_plus } else { 0.0 })?;
    let i_b = segment_current(cfg, b, |_, _| 0.0)?;
    let duty = ra.map_or(1.0, |i| {
        a.events[i].duration_ns as f64 / a.duration_ns as f64
    });
    Ok(measure(cfg, stream, i_a, i_b, duty))
}

fn collect_series(stats: &[PointStats]) -> (Vec<f64>, Vec<f64>) {
    (
        stats.iter().map(|s| s.mean).collect(),
        stats.iter().map(|s| s.std).collect(),
    )
}

fn prepare(
    cfg: &ExperimentConfig,
    kind: SweepKind,
) -> Result<(ExperimentConfig, Vec<f64>), ExperimentError> {
    let cfg = cfg.clone().with_kind(kind);
    cfg.validate()?;
    let points = cfg.points();
    Ok((cfg, points))
}

fn base_result(
    cfg: &ExperimentConfig,
    kind: SweepKind,
    points: Vec<f64>,
    stats: &[PointStats],
) -> ExperimentResult {
    let (mean, std) = collect_series(stats);
    ExperimentResult {
        kind,
        n_cycles: vec![cfg.cycles_per_point; points.len()],
        sweep_values: points,
        mean_differential: mean,
        std,
        fit: None,
        fit_error: None,
        series: Vec::new(),
        summary: BTreeMap::new(),
    }
}

// ---------------------------------------------------------------------------
// Protocols

/// CW ODMR: microwave frequency sweep, segment A with and B without microwaves.
pub fn run_odmr_scan(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    let (cfg, points) = prepare(cfg, SweepKind::Odmr)?;
    let seqs = gen_odmr(&points, cfg.protocol.odmr_cw, cfg.protocol.laser_power_mw)?;
    let projections = axis_projections(cfg.env.b_static);
    let stats = seqs
        .par_iter()
        .enumerate()
        .map(|(i, (f, seq))| {
            let s = projections
                .iter()
                .map(|&b| odmr_response(&cfg.nv, *f, b))
                .sum::<f64>()
                / 4.0;
            let overlaps_mw = |seg: &Segment, e: &PulseEvent| {
                seg.events_on(Channel::Mw)
                    .any(|m| m.t_start_ns < e.end_ns() && e.t_start_ns < m.end_ns())
            };
            let (a, b) = (&seq.segments[0], &seq.segments[1]);
            let i_a = segment_current(&cfg, a, |_, e| if overlaps_mw(a, e) { s } else { 0.0 })?;
            let i_b = segment_current(&cfg, b, |_, _| 0.0)?;
            Ok(measure(&cfg, stream_id(0, i), i_a, i_b, 1.0))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let mut res = base_result(&cfg, SweepKind::Odmr, points, &stats);
    let (fit, err) = fit_scaled(
        Model::GaussianDips,
        &res.sweep_values,
        &res.mean_differential,
        &res.std,
        sigma_floor(&cfg),
        1e6,
        PICO,
    );
    if let Some(f) = &fit {
        for (key, name) in [
            ("dip_depth", "depth"),
            ("center", "center"),
            ("split", "split"),
            ("fwhm", "fwhm"),
        ] {
            res.summary.insert(key.into(), f.value(name));
            res.summary
                .insert(format!("{key}_uncertainty"), f.uncertainty(name));
        }
    }
    res.summary.insert(
        "max_abs_differential".into(),
        res.mean_differential
            .iter()
            .fold(0.0, |m, v| m.max(v.abs())),
    );
    res.fit = fit;
    res.fit_error = err;
    Ok(res)
}

/// Laser power sweep: photocurrent (laser on minus dark) and a linear
/// fluorescence channel.
pub fn run_saturation_scan(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    let (cfg, points) = prepare(cfg, SweepKind::Saturation)?;
    let bias = cfg.protocol.bias_v;
    let stats = points
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            Ok(measure(
                &cfg,
                stream_id(0, i),
                photocurrent(&cfg, p, bias, 0.0)?,
                0.0,
                1.0,
            ))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let mut res = base_result(&cfg, SweepKind::Saturation, points, &stats);
    let (fit, err) = fit_scaled(
        Model::Saturation,
        &res.sweep_values,
        &res.mean_differential,
        &res.std,
        sigma_floor(&cfg),
        1.0,
        PICO,
    );
    if let Some(f) = &fit {
        // the fitted alpha includes the bias scaling; refer it back to v_ref
        let to_ref = cfg.nv.v_ref / bias;
        res.summary.insert("alpha_at_bias".into(), f.value("alpha"));
        res.summary
            .insert("alpha".into(), f.value("alpha") * to_ref);
        res.summary.insert(
            "alpha_uncertainty".into(),
            f.uncertainty("alpha") * to_ref.abs(),
        );
        res.summary.insert("beta".into(), f.value("beta"));
        res.summary
            .insert("beta_uncertainty".into(), f.uncertainty("beta"));
    }
    res.fit = fit;
    res.fit_error = err;

    // fluorescence: counts per integration window with Poisson-like spread
    let t = cfg.ipcd.t_integrate;
    let fl: Vec<PointStats> = res
        .sweep_values
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            let rate = cfg.protocol.fluorescence_rate_per_mw * p;
            if !cfg.noise {
                return PointStats {
                    mean: rate,
                    std: 0.0,
                };
            }
            use rand_distr::{Distribution, Normal};
            let mut rng = detector_rng(cfg.seed, stream_id(1, i));
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let samples: Vec<f64> = (0..cfg.cycles_per_point)
                .map(|_| rate + (rate / t).sqrt() * normal.sample(&mut rng))
                .collect();
            mean_std(&samples)
        })
        .collect();
    let (y, std) = collect_series(&fl);
    let floor = cfg.protocol.fluorescence_rate_per_mw.max(1.0) * 1e-9;
    let (ffit, ferr) = fit_scaled(Model::Linear, &res.sweep_values, &y, &std, floor, 1.0, 1.0);
    if let Some(f) = &ffit {
        res.summary
            .insert("fluorescence_slope".into(), f.value("slope"));
    }
    res.series.push(Series {
        label: "fluorescence".into(),
        x: res.sweep_values.clone(),
        y,
        std,
        fit: ffit,
        fit_error: ferr,
    });
    Ok(res)
}

fn mean_std(v: &[f64]) -> PointStats {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    PointStats { mean, std }
}

/// Bias sweep at fixed power. The main curve is the dip depth, current without
/// microwaves minus current under resonant microwaves driving both
/// transitions (full `contrast_cw`); the `current` series is laser on minus dark.
pub fn run_bias_scan(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    let (cfg, points) = prepare(cfg, SweepKind::Bias)?;
    let p = cfg.protocol.laser_power_mw;
    let c = cfg.nv.contrast_cw;
    let pairs = points
        .par_iter()
        .enumerate()
        .map(|(i, &v)| {
            let off = steady_state_photocurrent(&cfg.nv, p, v, 0.0)? * PICO;
            let on = steady_state_photocurrent(&cfg.nv, p, v, -c)? * PICO;
            Ok((
                measure(&cfg, stream_id(0, i), off, on, 1.0),
                measure(&cfg, stream_id(1, i), off, 0.0, 1.0),
            ))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let (depth, current): (Vec<PointStats>, Vec<PointStats>) = pairs.into_iter().unzip();
    let mut res = base_result(&cfg, SweepKind::Bias, points, &depth);
    let floor = sigma_floor(&cfg);
    let (fit, err) = fit_scaled(
        Model::Linear,
        &res.sweep_values,
        &res.mean_differential,
        &res.std,
        floor,
        1.0,
        PICO,
    );
    let (y, std) = collect_series(&current);
    let (cfit, cerr) = fit_scaled(Model::Linear, &res.sweep_values, &y, &std, floor, 1.0, PICO);
    if let (Some(d), Some(i)) = (&fit, &cfit) {
        res.summary.insert("depth_slope".into(), d.value("slope"));
        res.summary.insert("current_slope".into(), i.value("slope"));
        res.summary
            .insert("slope_ratio".into(), d.value("slope") / i.value("slope"));
        res.summary.insert("depth_r_squared".into(), d.r_squared);
        res.summary.insert("current_r_squared".into(), i.r_squared);
    }
    res.fit = fit;
    res.fit_error = err;
    res.series.push(Series {
        label: "current".into(),
        x: res.sweep_values.clone(),
        y,
        std,
        fit: cfit,
        fit_error: cerr,
    });
    Ok(res)
}

fn is_flat(y: &[f64], floor: f64) -> bool {
    let (lo, hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    hi - lo <= floor
}

/// Rabi oscillations: microwave pulse width sweep for every configured
/// amplitude, plus an off-resonant control at the largest amplitude.
pub fn run_rabi(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    let (cfg, points) = prepare(cfg, SweepKind::Rabi)?;
    let timing = cfg.protocol.timing();
    let floor = sigma_floor(&cfg);
    let mut amplitudes = cfg.protocol.mw_amplitudes.clone();
    amplitudes.sort_by(f64::total_cmp);
    let a_max = *amplitudes.last().expect("validated non-empty");

    let trace = |series: usize,
                 amplitude: f64,
                 detuning: f64|
     -> Result<Vec<PointStats>, ExperimentError> {
        let seqs = gen_rabi(&points, &timing, amplitude)?;
        seqs.par_iter()
            .enumerate()
            .map(|(i, seq)| {
                let (a, b) = (&seq.segments[0], &seq.segments[1]);
                let p = spin_after_mw(&cfg, a, detuning, false).population_plus();
                pulsed_point(&cfg, a, b, p, stream_id(series, i))
            })
            .collect()
    };

    let mut res = base_result(&cfg, SweepKind::Rabi, points.clone(), &[]);
    let mut freq_points = (Vec::new(), Vec::new());
    for (k, &amp) in amplitudes.iter().enumerate() {
        let stats = trace(k, amp, 0.0)?;
        let (y, std) = collect_series(&stats);
        let (fit, fit_error) = if is_flat(&y, floor / (cfg.cycles_per_point as f64).sqrt()) {
            (None, Some("flat trace".to_string()))
        } else {
            fit_scaled(Model::DampedSine, &points, &y, &std, floor, 1e-6, PICO)
        };
        let freq = match &fit {
            Some(f) => f.value("frequency").abs(),
            None if amp == 0.0 => 0.0,
            None => f64::NAN,
        };
        res.summary.insert(format!("rabi_frequency_a{amp}"), freq);
        if let Some(f) = &fit {
            res.summary
                .insert(format!("decay_time_a{amp}"), f.value("decay_time"));
        }
        if freq.is_finite() {
            freq_points.0.push(amp);
            freq_points.1.push(freq);
        }
        if amp == a_max {
            res.mean_differential = y.clone();
            res.std = std.clone();
            res.fit = fit.clone();
            res.fit_error = fit_error.clone();
            if let Some(f) = &fit {
                res.summary
                    .insert("decay_time".into(), f.value("decay_time"));
                res.summary
                    .insert("decay_time_uncertainty".into(), f.uncertainty("decay_time"));
            }
        }
        res.series.push(Series {
            label: format!("amplitude={amp}"),
            x: points.clone(),
            y,
            std,
            fit,
            fit_error,
        });
    }

    let omega = cfg.protocol.rabi_rate_hz * a_max;
    let delta = cfg.protocol.off_resonant_factor * omega;
    let off = trace(amplitudes.len(), a_max, delta)?;
    let (y, std) = collect_series(&off);
    let full_scale = cfg.nv.contrast_cw
        * photocurrent(&cfg, cfg.protocol.laser_power_mw, cfg.protocol.bias_v, 0.0)?;
    let off_max = y.iter().fold(0.0f64, |m, v| m.max(v.abs())) / full_scale;
    res.summary
        .insert("off_resonant_max_contrast".into(), off_max);
    res.summary
        .insert("off_resonant_bound".into(), omega * omega / (delta * delta));
    res.series.push(Series {
        label: "off_resonant".into(),
        x: points.clone(),
        y,
        std,
        fit: None,
        fit_error: None,
    });

    if freq_points.0.len() >= 3 {
        if let Ok(lin) = curve_fit(Model::Linear, &freq_points.0, &freq_points.1, None, None) {
            res.summary
                .insert("frequency_per_amplitude".into(), lin.value("slope"));
            res.summary
                .insert("frequency_intercept".into(), lin.value("intercept"));
            res.summary
                .insert("frequency_r_squared".into(), lin.r_squared);
        }
    }
    Ok(res)
}

/// Spin echo: total free-precession time sweep, exponential fit for T2.
pub fn run_cpmg(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    let (cfg, points) = prepare(cfg, SweepKind::Cpmg)?;
    let seqs = gen_cpmg(&points, &cfg.protocol.timing(), cfg.protocol.rabi_rate_hz)?;
    let stats = seqs
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let (a, b) = (&seq.segments[0], &seq.segments[1]);
            let p = spin_after_mw(&cfg, a, 0.0, true).population_plus();
            pulsed_point(&cfg, a, b, p, stream_id(0, i))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let mut res = base_result(&cfg, SweepKind::Cpmg, points, &stats);
    let (fit, err) = fit_scaled(
        Model::ExpDecay,
        &res.sweep_values,
        &res.mean_differential,
        &res.std,
        sigma_floor(&cfg),
        1e-6,
        PICO,
    );
    if let Some(f) = &fit {
        res.summary.insert("t2".into(), f.value("decay_time"));
        res.summary
            .insert("t2_uncertainty".into(), f.uncertainty("decay_time"));
        res.summary.insert(
            "t2_over_t2_star".into(),
            f.value("decay_time") / cfg.nv.t2_star,
        );
    }
    res.fit = fit;
    res.fit_error = err;
    Ok(res)
}

/// `Σ_{k<n} cos(theta + k delta)` in closed form.
fn cosine_comb(theta: f64, delta: f64, n: u64) -> f64 {
    let d = delta - 2.0 * PI * (delta / (2.0 * PI)).round();
    let n_f = n as f64;
    let half = 0.5 * d;
    if half.sin().abs() < 1e-15 {
        return n_f * (theta + (n_f - 1.0) * half).cos();
    }
    (n_f * half).sin() / half.sin() * (theta + (n_f - 1.0) * half).cos()
}

/// Time integral of `sin(2π f t + phase)` over all laser pulses of one
/// segment, divided by the total laser-on time.
fn pulse_average(seg: &Segment, f: f64, phase: f64) -> f64 {
    let w = 2.0 * PI * f;
    let period = seg.duration_ns as f64 * 1e-9;
    let step = w * period;
    let mut integral = 0.0;
    let mut on = 0.0;
    for e in seg.events_on(Channel::Laser) {
        let (t0, t1) = (e.t_start(), e.t_start() + e.duration());
        // ∫ sin = (cos(w t0 + φ) - cos(w t1 + φ)) / w, summed over repeats
        integral += (cosine_comb(w * t0 + phase, step, seg.repeat)
            - cosine_comb(w * t1 + phase, step, seg.repeat))
            / w;
        on += e.duration() * seg.repeat as f64;
    }
    integral / on
}

/// Tones used by the PLSD sweep: the environment's, or a default set along
/// the sensing axis with the field crest centred on the segment-A pulses.
pub fn plsd_tones(cfg: &ExperimentConfig) -> Vec<AcTone> {
    if !cfg.env.ac_tones.is_empty() {
        return cfg.env.ac_tones.clone();
    }
    let axis = nv_axes()[cfg.protocol.sensing_axis];
    let amp = cfg.protocol.plsd_tone_amplitude;
    DEFAULT_PLSD_TONES_HZ
        .iter()
        .map(|&f| AcTone {
            amplitude: axis.map(|c| c * amp),
            frequency: f,
            phase: 0.5 * PI - PI * cfg.protocol.plsd_duty,
        })
        .collect()
}

fn format_hz(f: f64) -> String {
    format!("{f}Hz")
}

/// Stroboscopic AC detection: for each tone, the probe frequency is swept by
/// the relative detunings in `sweep.points` with the pulse width fixed at
/// `plsd_duty / f_tone`.
pub fn run_plsd_sweep(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    let (cfg, points) = prepare(cfg, SweepKind::Plsd)?;
    let tones = plsd_tones(&cfg);
    let axis = nv_axes()[cfg.protocol.sensing_axis];
    let project = |v: &[f64; 3]| v[0] * axis[0] + v[1] * axis[1] + v[2] * axis[2];
    let i_laser = photocurrent(&cfg, cfg.protocol.laser_power_mw, cfg.protocol.bias_v, 0.0)?;
    let slope = cfg.protocol.conversion_slope;
    let f0 = cfg.ipcd.bandwidth_f0;

    // Mean current of one segment: baseline plus the field seen during pulses.
    let seg_current = |seg: &Segment| -> f64 {
        let duty = seg.on_time_ns(Channel::Laser) as f64 / seg.duration_ns as f64;
        let field: f64 = tones
            .iter()
            .map(|t| {
                project(&t.amplitude)
                    * lowpass_gain(t.frequency, f0)
                    * pulse_average(seg, t.frequency, t.phase)
            })
            .sum();
        duty * (i_laser + slope * field)
    };

    let mut res = base_result(&cfg, SweepKind::Plsd, points.clone(), &[]);
    let mut peaks = (Vec::new(), Vec::new());
    for (k, tone) in tones.iter().enumerate() {
        let width_ns = (cfg.protocol.plsd_duty * 1e9 / tone.frequency)
            .round()
            .max(1.0) as u64;
        let stats = points
            .par_iter()
            .enumerate()
            .map(|(i, &d)| {
                let seq = gen_plsd_with_width(
                    tone.frequency * (1.0 + d),
                    width_ns,
                    cfg.protocol.laser_power_mw,
                    false,
                )?;
                let (a, b) = (&seq.segments[0], &seq.segments[1]);
                let duty = a.on_time_ns(Channel::Laser) as f64 / a.duration_ns as f64;
                Ok(measure(
                    &cfg,
                    stream_id(k, i),
                    seg_current(a),
                    seg_current(b),
                    duty,
                ))
            })
            .collect::<Result<Vec<_>, ExperimentError>>()?;
        let (y, std) = collect_series(&stats);
        let x: Vec<f64> = points.iter().map(|d| tone.frequency * (1.0 + d)).collect();
        let ipeak = (0..y.len()).fold(
            0,
            |best, i| if y[i].abs() > y[best].abs() { i } else { best },
        );
        let peak = y[ipeak].abs();
        let label = format_hz(tone.frequency);
        res.summary.insert(format!("peak_{label}"), peak);
        res.summary
            .insert(format!("peak_detuning_{label}"), points[ipeak]);
        let detuned = points
            .iter()
            .zip(&y)
            .filter(|(d, _)| d.abs() >= 0.2 - 1e-12)
            .fold(0.0f64, |m, (_, v)| m.max(v.abs()));
        res.summary
            .insert(format!("detuned_fraction_{label}"), detuned / peak);
        let dc = 2.0 * slope * project(&tone.amplitude).abs() * lowpass_gain(tone.frequency, f0);
        if dc > 0.0 {
            res.summary.insert(format!("dc_ratio_{label}"), peak / dc);
        }
        peaks.0.push(tone.frequency);
        peaks.1.push(peak);
        if k == 0 {
            res.mean_differential = y.clone();
            res.std = std.clone();
            if dc > 0.0 {
                res.summary.insert("dc_ratio".into(), peak / dc);
            }
        }
        res.series.push(Series {
            label,
            x,
            y,
            std,
            fit: None,
            fit_error: None,
        });
    }
    if peaks.0.len() >= 3 {
        // relative weights: each peak carries the same fractional error
        let rel: Vec<f64> = peaks
            .1
            .iter()
            .map(|p| p.abs().max(f64::MIN_POSITIVE))
            .collect();
        let (fit, err) = fit_scaled(Model::Lowpass, &peaks.0, &peaks.1, &rel, 0.0, 1e6, PICO);
        if let Some(f) = &fit {
            res.summary.insert("f0".into(), f.value("f0"));
            res.summary
                .insert("f0_uncertainty".into(), f.uncertainty("f0"));
        }
        res.fit = fit;
        res.fit_error = err;
    }
    Ok(res)
}
