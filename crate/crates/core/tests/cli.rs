use std::path::{Path, PathBuf};
use std::process::Command;

use fbsde_games::cli::{export_field, import_field, FieldTable, Metadata};
use fbsde_games::game::{ValueField, ValueKind};
use fbsde_games::{SpaceGrid, TimeGrid};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.cfg"))
}

fn run(args: &[&str], out: &Path) -> (i32, String) {
    let output = Command::new(env!("CARGO_BIN_EXE_fbsde-games"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs");
    (output.status.code().unwrap_or(-1), String::from_utf8_lossy(&output.stderr).into_owned())
}

#[test]
fn malformed_config_exits_one_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "[model]\nb = x +\n").unwrap();
    let out = dir.path().join("out");
    let (code, stderr) = run(&["check", bad.to_str().unwrap()], &out);
    assert_eq!(code, 1, "{stderr}");
    assert!(stderr.contains("line 2"), "{stderr}");
    assert!(!out.exists());
}

#[test]
fn unknown_property_id_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let (code, _) = run(&["verify", config("game_upv").to_str().unwrap(), "--suite", "no-such-property"], &out);
    assert_eq!(code, 1);
    assert!(!out.exists());
}

#[test]
fn pde_field_has_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stderr) = run(
        &["solve-pde", "--kind", "lower", config("heat").to_str().unwrap(), "--nt", "120", "--nx", "41"],
        dir.path(),
    );
    assert_eq!(code, 0, "{stderr}");
    let text = std::fs::read_to_string(dir.path().join("pde_lower.csv")).unwrap();
    assert!(text.lines().any(|l| l == "# slice,node,t,x,W"));
    let rows = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 121 * 41);
    let table = import_field(&dir.path().join("pde_lower.csv")).unwrap();
    assert_eq!(table.meta.kind, "pde_lower");
}

#[test]
fn isaacs_suite_exit_code_tracks_the_value() {
    let dir = tempfile::tempdir().unwrap();
    let (gap, _) = run(&["verify", config("game_uv").to_str().unwrap(), "--suite", "isaacs"], &dir.path().join("uv"));
    let (value, stderr) = run(&["verify", config("game_upv").to_str().unwrap(), "--suite", "isaacs"], &dir.path().join("upv"));
    assert_eq!(gap, 3);
    assert_eq!(value, 0, "{stderr}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("upv/report.json")).unwrap()).unwrap();
    assert_eq!(report["entries"][0]["id"], "isaacs");
    assert_eq!(report["entries"][0]["pass"], true);
}

#[test]
fn exported_field_reimports_bit_for_bit() {
    let time = TimeGrid::new(0.0, 1.0, 4).unwrap();
    let space = SpaceGrid::new(-1.0, 1.0, 5).unwrap();
    let values: Vec<Vec<f64>> = (0..=4)
        .map(|k| space.nodes().iter().map(|x| (x * 1.7 + k as f64).sin() / 3.0).collect())
        .collect();
    let zeros = vec![vec![0; 5]; 5];
    let field = ValueField { time, space, values, kind: ValueKind::Lower, argmax_u: zeros.clone(), argmin_v: zeros };
    let table = FieldTable::from_value_field(&field, Metadata::new("abc123", 9, "lower"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("field.csv");
    export_field(&table, &path).unwrap();
    let back = import_field(&path).unwrap();
    assert_eq!(back.meta.config_digest, "abc123");
    assert_eq!(back.meta.seed, 9);
    assert_eq!(back.column("W").unwrap(), field.values);
}
