use std::fs;
use std::path::Path;
use std::process::Command;

fn lab(args: &[&str], cwd: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_lab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LAB_WORKERS")
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn transfer_at_zero_emits_unit_averages() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.json"),
        r#"{"experiment": "transfer", "energies": {"values": [0.0]}, "grids": {"n": [1, 10, 100]}}"#,
    )
    .unwrap();
    let (code, stdout, _) = lab(&["transfer", "--config", "c.json", "--out", "o"], dir.path());
    assert_eq!(code, 0);
    assert!(stdout.contains("PASS"));
    let csv = fs::read_to_string(dir.path().join("o/averages.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let average: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!((average - 1.0).abs() < 1e-12, "{row}");
    }
    let summary = fs::read_to_string(dir.path().join("o/summary.json")).unwrap();
    let hash_line = csv.lines().find(|l| l.starts_with("# config_sha256")).unwrap();
    let hash = hash_line.split(": ").nth(1).unwrap();
    assert!(summary.contains(hash));
    let resolved = fs::read_to_string(dir.path().join("o/config.resolved.json")).unwrap();
    assert!(resolved.contains("\"a_min\""));
    assert!(dir.path().join("o/plot/cesaro_E0.0.dat").exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"experiment": "transfer", "energy": [0.0]}"#).unwrap();
    let (code, _, stderr) = lab(&["transfer", "--config", "c.json", "--out", "o"], dir.path());
    assert_eq!(code, 2);
    assert!(stderr.contains("unknown field `energy`"), "{stderr}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn mismatched_experiment_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"experiment": "transfer"}"#).unwrap();
    let (code, _, stderr) = lab(&["series", "--config", "c.json"], dir.path());
    assert_eq!(code, 2);
    assert!(stderr.contains("experiment"), "{stderr}");
}

#[test]
fn unwritable_output_fails_before_computing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"experiment": "transfer"}"#).unwrap();
    fs::write(dir.path().join("blocker"), "").unwrap();
    let (code, _, stderr) = lab(&["transfer", "--config", "c.json", "--out", "blocker/o"], dir.path());
    assert_eq!(code, 2);
    assert!(stderr.contains("i/o error"), "{stderr}");
}

#[test]
fn failing_cells_give_partial_exit() {
    // E = 0.6 is elliptic; E = 2.5 is not supported by the sparse kernel.
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.json"),
        r#"{"experiment": "sparse", "energies": {"values": [0.6, 2.5]},
            "seeds": {"count": 2}, "sparse": {"j_max": 16, "cut_bump": 6}}"#,
    )
    .unwrap();
    let (code, _, _) = lab(&["sparse", "--config", "c.json", "--out", "o"], dir.path());
    assert_eq!(code, 4);
    let summary = fs::read_to_string(dir.path().join("o/summary.json")).unwrap();
    assert!(summary.contains("E2.5"), "{summary}");
}

#[test]
fn all_cells_failing_is_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.json"),
        r#"{"experiment": "sparse", "energies": {"values": [2.5]}, "seeds": {"count": 1},
            "sparse": {"j_max": 16}}"#,
    )
    .unwrap();
    let (code, _, _) = lab(&["sparse", "--config", "c.json", "--out", "o"], dir.path());
    assert_eq!(code, 3);
}

#[test]
fn worker_count_from_environment_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.json"),
        r#"{"experiment": "ac-scan", "energies": {"range": {"start": -2.5, "stop": 2.5, "step": 0.5}},
            "grids": {"n": [10, 100]}}"#,
    )
    .unwrap();
    let run = |workers: &str, out: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_lab"))
            .args(["ac-scan", "--config", "c.json", "--out", out])
            .env("LAB_WORKERS", workers)
            .current_dir(dir.path())
            .status()
            .unwrap();
        assert!(status.success());
        fs::read_to_string(dir.path().join(out).join("scan.csv")).unwrap()
    };
    assert_eq!(run("1", "a"), run("3", "b"));
}
