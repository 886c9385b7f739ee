use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sabr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sabr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sabr(args);
    assert!(
        out.status.success(),
        "sabr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn repo_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solve_writes_allocation_table() {
    let out = ok(&["solve", "--problem", s(&repo_file("solve.csv"))]);
    assert!(out.starts_with("kind,i,j,value\n"));
    let residual: f64 = out
        .lines()
        .find(|l| l.starts_with("kkt_residual"))
        .and_then(|l| l.rsplit(',').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(residual <= 1e-8);
    assert_eq!(out.lines().filter(|l| l.starts_with("y,")).count(), 4);
}

#[test]
fn oracle_writes_value() {
    let dir = tempfile::tempdir().unwrap();
    let dest = dir.path().join("oracle.csv");
    ok(&["oracle", "--problem", s(&repo_file("oracle.csv")), "--out", s(&dest)]);
    let text = std::fs::read_to_string(dest).unwrap();
    let value: f64 = text
        .lines()
        .find(|l| l.starts_with("value"))
        .and_then(|l| l.rsplit(',').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((value - (0.4 * 0.6 + 0.6 * 0.9)).abs() < 1e-9);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let scen = repo_file("synthetic.toml");
    for out in [&a, &b] {
        ok(&["simulate", "--scenario", s(&scen), "--policy", "sabr", "--T", "40", "--seed", "5", "--out", s(out)]);
    }
    let ma = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.csv")).unwrap());
    let text = String::from_utf8(ma).unwrap();
    assert_eq!(text.lines().count(), 41);
    assert!(!text.contains('\r'));
    let summary = std::fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.starts_with("policy,seed,T,V,"));
}

#[test]
fn sweep_emits_aggregate_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let scen = repo_file("synthetic.toml");
    ok(&[
        "sweep", "--scenario", s(&scen), "--policies", "sabr,no-learning", "--seeds", "3", "--T", "30", "--out",
        s(dir.path()),
    ]);
    for f in ["aggregate.csv", "summary.csv", "regret.svg", "queue_total.svg", "holding_cost.svg"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 7);
}

#[test]
fn distsim_reports_stability() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "distsim", "--problem", s(&repo_file("solve.csv")), "--penalty", "power:1.0", "--alpha", "0.05", "--delays",
        s(&repo_file("delays.csv")), "--ticks", "400", "--mode", "server", "--out", s(dir.path()),
    ]);
    assert!(out.contains("max margin"));
    let traj = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("tick,row_0,row_1,col_0,col_1\n"));
    assert_eq!(traj.lines().count(), 402);
}

#[test]
fn trace_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace");
    ok(&["gen-trace", "--seed", "4", "--out", s(&trace)]);
    let scen = dir.path().join("scenario.toml");
    let out = sabr(&[
        "ingest", "--collections", s(&trace.join("collections.csv")), "--machines", s(&trace.join("machines.csv")),
        "--cpi", s(&trace.join("cpi.csv")), "--K", "5", "--out", s(&scen),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("machines.csv") && log.contains("1 rejected"));
    let run = dir.path().join("run");
    ok(&["simulate", "--scenario", s(&scen), "--T", "50", "--out", s(&run)]);
    let fig = dir.path().join("fig.svg");
    ok(&["plot", "--in", s(&run.join("metrics.csv")), "--metric", "queue_total", "--out", s(&fig)]);
    assert!(std::fs::read_to_string(fig).unwrap().contains("<polyline"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = sabr(&["solve", "--problem", s(&dir.path().join("missing.csv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = sabr(&["simulate", "--scenario", s(&repo_file("synthetic.toml")), "--policy", "nope", "--out", "x"]);
    assert!(!out.status.success());
    let fig = dir.path().join("none.svg");
    let out = sabr(&["plot", "--in", s(&dir.path().join("missing.csv")), "--out", s(&fig)]);
    assert!(!out.status.success());
    assert!(!fig.exists());
}
