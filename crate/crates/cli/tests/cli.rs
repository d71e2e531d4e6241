use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn hierpop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierpop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run(command: &str, scenario: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        command,
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    hierpop(&args)
}

/// Copy of a fixture with `edit` applied, written into `dir`.
fn edited(name: &str, dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value =
        serde_json::from_str(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn trivial_supercritical_constants_are_unstable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s0");
    let o = run("trivial", &fixture("S0.json"), &out, &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("verdict unstable"));
    let rep = report(&out);
    assert_eq!(rep["schema_version"], 1);
    assert_eq!(rep["trivial"]["verdict"], "unstable");
    let roots = std::fs::read_to_string(out.join("trivial_roots.csv")).unwrap();
    let line = roots
        .lines()
        .find(|l| l.ends_with(",real-root"))
        .expect("real root row");
    let root: f64 = line.split(',').next().unwrap().parse().unwrap();
    assert!((root - 1.6455685).abs() < 1e-3, "{root}");
}

#[test]
fn hierarchical_pipeline_reports_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let sc = edited("S1.json", dir.path(), |v| v["grid"]["n"] = 100.into());
    let out = dir.path().join("s1");
    let o = run("all", &sc, &out, &["--threads", "2"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = stdout(&o);
    for needle in [
        "steady: P* =",
        "R(p*) = ",
        "stability: verdict",
        "persistence drift:",
    ] {
        assert!(text.contains(needle), "missing {needle:?} in\n{text}");
    }
    let rep = report(&out);
    let r = rep["steady"]["net_reproduction"]["second"]
        .as_f64()
        .unwrap();
    assert!((r - 1.0).abs() < 1e-3);
    assert!(rep["simulation"]["relative_drift"].as_f64().unwrap() < 0.05);
    for f in [
        "steady_state.csv",
        "stability_roots.csv",
        "trajectory.csv",
        "diagnostics.csv",
        "report.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(rep["scenario"]["solver"]["tol_fp"], 1e-9);
}

#[test]
fn invalid_scenario_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let sc = edited("S0.json", dir.path(), |v| {
        v["ingredients"]["mu"]["family"] = "constnat".into()
    });
    let out = dir.path().join("bad");
    let o = run("check", &sc, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ingredients.mu"));
    assert!(!out.exists());
}

#[test]
fn strict_mode_rejects_non_positive_growth() {
    let dir = tempfile::tempdir().unwrap();
    let sc = edited("S0.json", dir.path(), |v| {
        v["ingredients"]["gamma1"] =
            serde_json::json!({"family": "affine", "var": "s", "a": 0.5, "b": -1.0});
    });
    let out = dir.path().join("g");
    assert_eq!(
        run("check", &sc, &out, &["--strict"]).status.code(),
        Some(3)
    );
    assert!(!out.exists());
    let loose = run("check", &sc, &out, &[]);
    assert_eq!(loose.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&loose.stderr).contains("warning"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(hierpop(&["steady"]).status.code(), Some(1));
    assert_eq!(
        hierpop(&["explode", "--scenario", "x.json"]).status.code(),
        Some(1)
    );
    assert_eq!(
        hierpop(&["check", "--scenario", "/nonexistent/s.json"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(hierpop(&["--help"]).status.code(), Some(0));
}

#[test]
fn divergent_solve_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let sc = edited("S4-rank-one.json", dir.path(), |v| {
        v["solver"] = serde_json::json!({"ceiling": 1e-3, "anderson_depth": 0});
    });
    let out = dir.path().join("d");
    let o = run("steady", &sc, &out, &[]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(out.join("report.json").exists());
}

#[test]
fn outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let sc = edited("S2.json", dir.path(), |v| {
        v["grid"]["n"] = 64.into();
        v["dynamics"]["t_end"] = 0.5.into();
    });
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(run("simulate", &sc, out, &[]).status.code(), Some(0));
    }
    for f in ["trajectory.csv", "diagnostics.csv", "time_rescaling.csv"] {
        let (x, y) = (
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
        );
        assert_eq!(x, y, "{f}");
    }
    let traj = std::fs::read_to_string(a.join("trajectory.csv")).unwrap();
    let value = traj.lines().nth(1).unwrap().split(',').nth(2).unwrap();
    // 17 significant digits
    assert_eq!(
        value
            .split('e')
            .next()
            .unwrap()
            .trim_start_matches('-')
            .replace('.', "")
            .len(),
        17
    );
}

#[test]
fn subcritical_extinction_is_reported_not_failed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sub");
    let o = run("all", &fixture("S0-subcritical.json"), &out, &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let rep = report(&out);
    assert_eq!(rep["steady"]["collapsed"], true);
    assert_eq!(rep["stability"]["verdict"], "stable");
}
