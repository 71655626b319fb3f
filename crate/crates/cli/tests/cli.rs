//! End-to-end checks of the bench binary: flag handling, output formats,
//! and failure exit codes.

use std::path::PathBuf;
use std::process::Command;

use tandem::sweep::{read_report_json, CSV_HEADER};

fn bench_bin() -> &'static str {
    env!("CARGO_BIN_EXE_bench")
}

fn write_config(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tandem-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(name);
    let config = serde_json::json!({
        "model": {
            "num_layers": 2,
            "num_heads": 2,
            "head_dim": 4,
            "vocab_size": 16,
            "max_seq": 16,
            "causal": true,
            "seed": 3
        },
        "tp": [1],
        "pp": [1, 2],
        "warmup_runs": 1,
        "measured_runs": 2,
        "batches_per_run": 4,
        "clock": "virtual"
    });
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn table_output_on_stdout() {
    let config = write_config("table.json");
    let out = Command::new(bench_bin())
        .args(["--config", config.to_str().unwrap()])
        .args(["--batch-sizes", "2", "--pad-sizes", "4", "--seed", "9"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("tp"), "{stdout}");
    // two grid points: pp = 1 and pp = 2
    assert_eq!(stdout.lines().count(), 3, "{stdout}");
}

#[test]
fn csv_file_has_the_fixed_header() {
    let config = write_config("csv.json");
    let out_path = config.with_file_name("report.csv");
    let out = Command::new(bench_bin())
        .args(["--config", config.to_str().unwrap()])
        .args(["--pp", "1", "--batch-sizes", "1,2", "--pad-sizes", "4"])
        .args(["--out", out_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn json_report_round_trips() {
    let config = write_config("json.json");
    let out_path = config.with_file_name("report.json");
    let out = Command::new(bench_bin())
        .args(["--config", config.to_str().unwrap()])
        .args(["--pp", "2", "--batch-sizes", "2", "--pad-sizes", "4", "--clock", "virtual"])
        .args(["--out", out_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_report_json(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].pp, 2);
    // one transfer per batch: 4 gate + 4 warmup + 8 measured batches
    assert_eq!(report.rows[0].p2p, 16);
}

#[test]
fn missing_config_fails_nonzero() {
    let out = Command::new(bench_bin())
        .args(["--config", "/nonexistent.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn infeasible_grid_names_the_point_and_fails() {
    let config = write_config("bad.json");
    let out = Command::new(bench_bin())
        .args(["--config", config.to_str().unwrap()])
        .args(["--pp", "5"]) // more stages than layers
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("pp=5"), "{stderr}");
}
