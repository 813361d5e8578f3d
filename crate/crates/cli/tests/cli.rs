use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pdmr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdmr"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL_ODMR: &str = "cycles_per_point = 50\nseed = 11\n[sweep]\npoints = [2.85e9, 2.86e9, 2.865e9, 2.87e9, 2.875e9, 2.88e9, 2.89e9]\n";

#[test]
fn noise_table_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = pdmr(&["noise"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let row = |name: &str| -> f64 {
        let line = text
            .lines()
            .find(|l| l.starts_with(name))
            .unwrap_or_else(|| panic!("{name} missing:\n{text}"));
        line.split_whitespace()
            .rev()
            .nth(1)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!((row("shot") - 4.9).abs() < 0.01);
    assert!((row("quantization") - 84.85).abs() < 0.01);
    assert!((row("photocurrent") - 75.0).abs() < 1e-6);
}

#[test]
fn sensitivity_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = pdmr(&["sensitivity"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("photoelectric (PLSD)"));
    assert!(text.contains("published"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = pdmr(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(
        pdmr(&["odmr", "--seed", "x"], dir.path()).status.code(),
        Some(1)
    );
    assert_eq!(pdmr(&[], dir.path()).status.code(), Some(1));
}

#[test]
fn parse_prints_canonical_form() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("seq.txt");
    fs::write(
        &file,
        "# pulse\nsegment A 10us repeat 2\n  laser @0ns 5us power=8mW\n",
    )
    .unwrap();
    let o = pdmr(&["parse", file.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        stdout(&o),
        "sequence sequence\nsegment A 10000ns repeat 2\n  laser @0ns 5000ns power=8mW\n"
    );

    fs::write(
        &file,
        "segment A 10us\n  laser @0ns 5us power=8mW\n  laser @1us 1us power=8mW\n",
    )
    .unwrap();
    let o = pdmr(&["parse", file.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[2, 3]"));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[ipcd]\nlsb_currrent = 1e-15\n").unwrap();
    let o = pdmr(&["odmr", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lsb_currrent"));

    fs::write(&cfg, "[sweep]\nkind = \"rabi\"\n").unwrap();
    assert_eq!(
        pdmr(&["odmr", "--config", cfg.to_str().unwrap()], dir.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        pdmr(&["odmr", "--config", "missing.toml"], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn unwritable_output_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SMALL_ODMR).unwrap();
    let out = dir.path().join("no/such/dir/out.csv");
    let o = pdmr(
        &[
            "odmr",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn reruns_and_thread_counts_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SMALL_ODMR).unwrap();
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(format!("{name}.csv"));
        let o = pdmr(
            &[
                "odmr",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--threads",
                threads,
            ],
            dir.path(),
        );
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        let table = fs::read(&out).unwrap();
        let side = fs::read_to_string(dir.path().join(format!("{name}.json"))).unwrap();
        assert!(dir.path().join(format!("{name}.manifest.json")).exists());
        // the sidecar lists its own file names; compare everything else
        let side: String = side
            .lines()
            .filter(|l| !l.contains(name))
            .collect::<Vec<_>>()
            .join("\n");
        (table, side)
    };
    let a = run("serial", "1");
    let b = run("parallel", "4");
    let c = run("again", "4");
    assert_eq!(a, b);
    assert_eq!(b, c);
    let lines = String::from_utf8(a.0).unwrap();
    assert_eq!(lines.lines().count(), 8);
    assert_eq!(
        lines.lines().next().unwrap(),
        "sweep_value,mean_diff_current_A,std_A,n_cycles"
    );
}

#[test]
fn seed_override_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SMALL_ODMR).unwrap();
    let table = |seed: &str| {
        let out = dir.path().join(format!("s{seed}.csv"));
        let o = pdmr(
            &[
                "odmr",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--seed",
                seed,
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0));
        fs::read(out).unwrap()
    };
    assert_ne!(table("1"), table("2"));
}
