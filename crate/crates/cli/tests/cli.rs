use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn xkf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xkf"))
        .args(args)
        .output()
        .expect("spawn xkf")
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_cycle_writes_requested_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dst.csv");
    let o = xkf(&[
        "gen-cycle",
        "dst",
        "--duration",
        "7.2e2",
        "--peak",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().next(), Some("t_s,current_a"));
    assert_eq!(text.lines().count(), 721);
}

#[test]
fn simulate_then_estimate_then_fit() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    let o = xkf(&[
        "simulate",
        "--generator",
        "fuds",
        "--duration",
        "900",
        "--soc0",
        "0.9",
        "--out",
        s(&log),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let trace = dir.path().join("nlo.csv");
    let metrics = dir.path().join("metrics.csv");
    let o = xkf(&[
        "estimate",
        "--data",
        s(&log),
        "--filter",
        "nlo",
        "--soc0",
        "0.7",
        "--out",
        s(&trace),
        "--metrics",
        s(&metrics),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with(
        "filter,soc_rmse,terminal_error,convergence_time_s,max_overshoot,saturation_count,failed_at\nnlo,"
    ));
    assert_eq!(std::fs::read_to_string(&metrics).unwrap(), stdout);
    assert!(std::fs::read_to_string(&trace).unwrap().starts_with("# stream_sha256="));

    let params = dir.path().join("fit.txt");
    let residuals = dir.path().join("res.csv");
    let o = xkf(&[
        "fit",
        "--data",
        s(&log),
        "--out",
        s(&params),
        "--residuals",
        s(&residuals),
        "--refinements",
        "1",
        "--rc-points",
        "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&params).unwrap().contains("r_ohm="));
    assert!(std::fs::read_to_string(&residuals)
        .unwrap()
        .starts_with("t_s,residual_v"));
}

#[test]
fn compare_writes_experiment_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = xkf(&["compare", s(&repo("configs/dst_seed42.txt")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "config.txt",
        "truth.csv",
        "coulomb.csv",
        "metrics.csv",
        "xkf.trace.csv",
        "ukf.trace.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout, std::fs::read_to_string(out.join("metrics.csv")).unwrap());
    assert!(stdout.contains("\nxkf,"));
}

#[test]
fn tempstudy_reports_onset() {
    let dir = tempfile::tempdir().unwrap();
    let o = xkf(&["tempstudy", s(&repo("configs/temperature.txt")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("divergence_onset_soc=0."), "{stdout}");
    assert!(dir.path().join("divergence.txt").exists());
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    assert_eq!(xkf(&["compare", s(&missing)]).status.code(), Some(1));

    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "filters=xkf\nthreshold=1.5\n").unwrap();
    let o = xkf(&["compare", s(&bad), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("threshold"));

    let no_filter_curve = dir.path().join("t.txt");
    std::fs::write(&no_filter_curve, "filters=xkf\n").unwrap();
    assert_eq!(xkf(&["tempstudy", s(&no_filter_curve)]).status.code(), Some(1));

    let out = dir.path().join("x.csv");
    assert_eq!(
        xkf(&["estimate", "--data", s(&missing), "--out", s(&out)])
            .status
            .code(),
        Some(1)
    );
}
