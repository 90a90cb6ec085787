use std::path::Path;
use std::process::{Command, Output};

fn flowopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowopt")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn blt_report_writes_svg() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("incidence.svg");
    let o = flowopt(&["blt-report", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("16 equations"));
    assert!(std::fs::read_to_string(&out).unwrap().starts_with("<svg"));
}

#[test]
fn solve_reports_status_and_decisions() {
    let o = flowopt(&["solve", "--formulation", "implicit", "--pressure", "300000", "--conversion", "0.9"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("status       Optimal"), "{s}");
    assert!(s.contains("47 variables"), "{s}");
    for key in ["objective", "F_G", "F_s", "alpha"] {
        assert!(s.lines().any(|l| l.starts_with(key)), "{key} missing");
    }
}

#[test]
fn generated_data_trains_an_embeddable_surrogate() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = (dir.path().join("data.csv"), dir.path().join("poly.json"));
    let o = flowopt(&["gen-data", "--n", "150", "--seed", "3", "--out", p(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = flowopt(&["train-surrogate", "poly", "--data", p(&data), "--out", p(&model)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).matches("R²").count(), 12);
    let args = ["solve", "--formulation", "alamo", "--pressure", "250000", "--conversion", "0.85", "--surrogate", p(&model)];
    let o = flowopt(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("formulation  alamo"));
    // a polynomial cannot stand in for a network
    let args = ["solve", "--formulation", "nn", "--pressure", "250000", "--conversion", "0.85", "--surrogate", p(&model)];
    assert!(!flowopt(&args).status.success());
}

#[test]
fn sweep_run_writes_every_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    std::fs::write(
        &cfg,
        "[grid]\npressures = [250000.0]\nconversions = [0.86, 0.99]\nformulations = [\"full\", \"implicit\"]\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = flowopt(&["sweep", "run", "--config", p(&cfg), "--out", p(&out), "--jobs", "1", "--seed", "11"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["results.csv", "convergence_grid.svg", "stats.md", "incidence.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(std::fs::read_to_string(out.join("stats.md")).unwrap().contains("seed 11"));
}

#[test]
fn failing_instances_do_not_fail_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    std::fs::write(&cfg, "[grid]\npressures = [450000.0]\nconversions = [0.999]\nformulations = [\"implicit\"]\n").unwrap();
    let out = dir.path().join("out");
    let o = flowopt(&["sweep", "run", "--config", p(&cfg), "--out", p(&out), "--no-clip", "--fail-hard"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains(",EvalError,"), "{csv}");
}

#[test]
fn bad_inputs_exit_non_zero() {
    assert!(!flowopt(&["sweep", "run", "--config", "/nonexistent.toml", "--out", "/tmp/x"]).status.success());
    assert!(!flowopt(&["solve", "--formulation", "ipopt", "--pressure", "1", "--conversion", "0.5"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[grid]\nconversions = [1.5]\n").unwrap();
    let o = flowopt(&["sweep", "run", "--config", p(&cfg), "--out", p(dir.path())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("conversion 1.5"));
}
