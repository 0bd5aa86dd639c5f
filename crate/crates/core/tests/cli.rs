use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stlmpc::lpsolver::LpProblem;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stlmpc"));
    c.env_remove("STLMPC_OUT_DIR");
    c
}

fn manifest(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SCALAR: &str = r#"
[system]
a = [[1.0]]
b = [[1.0]]
sampling_period = 1.0
input_lower = [-1.0]
input_upper = [1.0]
x0 = [0.0]

[[predicate]]
label = "x <= -5"
row = [-1.0]
offset = -5.0

[[predicate]]
label = "x >= -2"
row = [1.0]
offset = 2.0

[specification]
formula = "G[0,1] p2"

[controller]
horizon = 3
steps = 5
"#;

fn write_scenario(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn worked_example_dump_matches_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["dump-lp", manifest("scenarios/worked_example.toml").to_str().unwrap(), "--step", "0", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let got = fs::read(dir.path().join("E_k0_b0_m0.csv")).unwrap();
    let want = fs::read(manifest("tests/fixtures/worked_example_E.csv")).unwrap();
    assert_eq!(got, want);
}

#[test]
fn dumped_program_row_count_and_penalty() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(
        dir.path(),
        "s.toml",
        &SCALAR.replace("G[0,1] p2", "F[1,2] p2 & G[0,1] (p2 & !p1)"),
    );
    let out = dir.path().join("dump");
    let o = bin()
        .args(["dump-lp", scenario.to_str().unwrap(), "--soften", "--penalty", "1000", "--out-dir"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("lp_k0_b0.txt")).unwrap();
    let lp: LpProblem = text.parse().unwrap();
    // Window k0 = 0, h = 2, N = 3: evaluation steps -1..=1, two members.
    // Epigraph: 3 rows x 2 members. Auxiliary: the conjunct (p2 & !p1) at the future
    // steps 1..=2 it appears in, two literals each. Hard rows, one per distinct
    // (step, literal): p2 at -1..=3 (the eventually witnesses reach 3) and !p1 at -1..=2.
    assert!(stdout(&o).contains("epigraph 6 + auxiliary 4 + hard 9"), "{}", stdout(&o));
    assert_eq!(lp.num_rows(), 6 + 4 + 9);
    // Inputs u(0..3) are the only bounded variables; epigraph and auxiliary are free.
    assert!(stdout(&o).contains("4 bounded variables"));
    let xi = lp.num_vars() - 1;
    assert_eq!(lp.cost()[xi], -1000.0);
    assert!(text.contains(&format!("# var {xi} xi")));
    assert!(!text.contains("-0.0 "));
}

#[test]
fn horizon_shorter_than_formula_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.toml", &SCALAR.replace("horizon = 3", "horizon = 1").replace("G[0,1]", "G[0,2]"));
    let o = bin().args(["simulate", scenario.to_str().unwrap()]).arg("--out-dir").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("horizon N = 1") && stderr(&o).contains("h = 2"), "{}", stderr(&o));
}

#[test]
fn malformed_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.toml", &SCALAR.replace("G[0,1] p2", "G[0,1] p9"));
    let o = bin().args(["simulate", scenario.to_str().unwrap()]).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = bin().args(["simulate", "/nonexistent/scenario.toml"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn infeasible_without_softening_exits_3_and_softened_run_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.toml", &SCALAR.replace("G[0,1] p2", "G[0,1] p1"));
    let o = bin().args(["simulate", scenario.to_str().unwrap()]).arg("--out-dir").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = bin()
        .args(["simulate", scenario.to_str().unwrap(), "--soften"])
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["satisfied"], false);
    assert!(summary["max_slack"].as_f64().unwrap() > 0.0);
}

#[test]
fn simulate_writes_outputs_and_honours_env_dir() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.toml", SCALAR);
    let out = dir.path().join("env-out");
    let o = bin().args(["simulate", scenario.to_str().unwrap()]).env("STLMPC_OUT_DIR", &out).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["trajectory.csv", "summary.json", "plot_time.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("k,t_seconds,x1,u1,z1,z2,objective,robustness,xi,branch\n"));
    assert_eq!(csv.lines().count(), 1 + 6);
}

#[test]
fn monitor_reports_all_four_semantics() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("z.csv");
    fs::write(&trace, "k,z1\n0,2\n1,2\n2,2\n").unwrap();
    let o = bin().args(["monitor", trace.to_str().unwrap(), "--formula", "G[0,2] p1", "--at", "0"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    for line in ["boolean: true", "space_robustness: 2", "dasr: 2", "dsasr: 2"] {
        assert!(s.contains(line), "{s}");
    }

    fs::write(&trace, "k,z1\n0,3\n1,-1\n").unwrap();
    let o = bin().args(["monitor", trace.to_str().unwrap(), "--formula", "G[0,1] p1", "--at", "0"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let s = stdout(&o);
    assert!(s.contains("boolean: false") && s.contains("dasr: 1\n") && s.contains("space_robustness: -1"), "{s}");

    let o = bin().args(["monitor", trace.to_str().unwrap(), "--formula", "F[0,1] p1", "--at", "0"]).output().unwrap();
    let s = stdout(&o);
    assert!(s.contains("space_robustness: 3\n") && s.contains("dasr: 3\n"), "{s}");

    let o = bin().args(["monitor", trace.to_str().unwrap(), "--formula", "G[0,5] p1", "--at", "0"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "short trace is invalid input");
}

#[test]
fn monitor_reads_state_traces_through_a_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.toml", SCALAR);
    let trace = dir.path().join("x.csv");
    fs::write(&trace, "k,x1\n4,-1\n5,-3\n").unwrap();
    let o = bin()
        .args(["monitor", trace.to_str().unwrap(), "--formula", "F[0,1] p2", "--at", "4", "--scenario"])
        .arg(&scenario)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("space_robustness: 1\n"), "{}", stdout(&o));
    let o = bin().args(["monitor", trace.to_str().unwrap(), "--formula", "F[0,1] p2", "--at", "4"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn normalize_output_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().args(["normalize", manifest("scenarios/casestudy.toml").to_str().unwrap()]).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = stdout(&o);
    assert!(first.contains("F[10,50]") && first.contains("interval_units = \"steps\""), "{first}");
    let p = write_scenario(dir.path(), "n.toml", &first);
    let o = bin().args(["normalize", p.to_str().unwrap()]).output().unwrap();
    assert_eq!(stdout(&o), first);
}
