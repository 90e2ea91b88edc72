use std::path::Path;
use std::process::{Command, Output};

fn collapse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_collapse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_fixture_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let out = collapse(&[
        "simulate",
        "--fixture",
        path(&missing),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("absent.json"), "{}", stderr(&out));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = collapse(&["simulate", "--mode", "bogus", "--out", path(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("mode"));

    let out = collapse(&["exact", "--mode", "sde", "--out", path(dir.path())]);
    assert_eq!(code(&out), 2);

    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"n_trajectories": 10, "typo": true}"#).unwrap();
    let out = collapse(&[
        "simulate",
        "--config",
        path(&cfg),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("typo"));

    let out = collapse(&[
        "compare",
        "--mode",
        "sde",
        "--mode",
        "sde",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn numeric_blowup_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = collapse(&[
        "simulate",
        "--sigma",
        "1e200",
        "--dt",
        "1",
        "--n-traj",
        "2",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("step"));
}

#[test]
fn simulate_writes_outputs_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, workers) in [(&a, "1"), (&b, "3")] {
        let out = collapse(&[
            "simulate",
            "--fixture",
            "spin-pair",
            "--n-traj",
            "40",
            "--seed",
            "9",
            "--workers",
            workers,
            "--out",
            path(dir.path()),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for file in ["manifest.json", "trajectories.csv", "report.json"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{file} differs between runs");
    }
    let csv = std::fs::read_to_string(a.path().join("trajectories.csv")).unwrap();
    assert!(csv.starts_with("# "));
    assert!(csv
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("traj_id,t,H,V,beta,norm_err,"));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
}

#[test]
fn lindblad_modes_and_their_comparison_pass() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["lindblad-closed", "lindblad-ode"] {
        let out = collapse(&[
            "lindblad",
            "--mode",
            mode,
            "--out",
            path(&dir.path().join(mode)),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(dir.path().join(mode).join("density.json").exists());
    }
    let out = collapse(&[
        "compare",
        "--mode",
        "lindblad-closed",
        "--mode",
        "lindblad-ode",
        "--out",
        path(&dir.path().join("cmp")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}
