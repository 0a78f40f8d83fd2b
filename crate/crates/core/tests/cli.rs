use std::path::Path;
use std::process::{Command, Output};

use fedmerge::config::ExperimentConfig;
use fedmerge::metrics::{read_csv, CSV_HEADER};

fn fedmerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmerge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn mnist_config(dir: &Path, data: &Path, out: &Path) -> String {
    let json = format!(
        r#"{{
  "schema_version": 1,
  "dataset": {{"kind": "mnist", "dir": {data:?}}},
  "model": {{"input_dim": 16, "hidden_dims": [8], "num_classes": 10, "activation": "relu"}},
  "num_clients": 4,
  "classes_per_client": 8,
  "rounds": 3,
  "merge": {{"threshold": 0.7, "max_group_size": 3, "merge_rounds": [1], "alpha_rule": "size_weighted"}},
  "seeds": [5],
  "output_dir": {out:?}
}}"#
    );
    write(&dir.join("config.json"), &json)
}

#[test]
fn malformed_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("bad.json"), "{ not json");
    assert_eq!(code(&fedmerge(&["run", "--config", &cfg])), 2);
}

#[test]
fn unknown_field_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("bad.json"),
        r#"{"schema_version": 1, "learning_rate": 0.1}"#,
    );
    let out = fedmerge(&["run", "--config", &cfg]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn unknown_condition_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mnist_config(
        dir.path(),
        &dir.path().join("data"),
        &dir.path().join("out"),
    );
    let out = fedmerge(&["run", "--config", &cfg, "--condition", "earthquake"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_data_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mnist_config(
        dir.path(),
        &dir.path().join("nowhere"),
        &dir.path().join("out"),
    );
    assert_eq!(code(&fedmerge(&["run", "--config", &cfg])), 3);
}

#[test]
fn corrupt_idx_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = fedmerge(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--n",
        "200",
        "--rows",
        "4",
        "--cols",
        "4",
    ]);
    assert_eq!(code(&gen), 0);
    let images = data.join("train-images-idx3-ubyte");
    let bytes = std::fs::read(&images).unwrap();
    std::fs::write(&images, &bytes[..bytes.len() / 2]).unwrap();
    let cfg = mnist_config(dir.path(), &data, &dir.path().join("out"));
    assert_eq!(code(&fedmerge(&["run", "--config", &cfg])), 3);
}

#[test]
fn gen_data_then_run_writes_metrics_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = fedmerge(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--n",
        "600",
        "--rows",
        "4",
        "--cols",
        "4",
    ]);
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));

    let out = dir.path().join("out");
    let cfg = mnist_config(dir.path(), &data, &out);
    let run = fedmerge(&["run", "--config", &cfg, "--format", "jsonl"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));

    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    let rows = read_csv(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].n_active_nodes, 4);
    assert!(rows[1].n_active_nodes < 4);
    assert!(out.join("metrics.jsonl").is_file());
    assert_eq!(
        std::fs::read_to_string(out.join("merges.jsonl"))
            .unwrap()
            .lines()
            .count(),
        1
    );

    let manifest = out.join("manifest.json");
    let reloaded = ExperimentConfig::load(&manifest).unwrap();
    assert_eq!(reloaded, ExperimentConfig::load(Path::new(&cfg)).unwrap());
    let again = dir.path().join("again");
    let rerun = fedmerge(&[
        "run",
        "--config",
        manifest.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(code(&rerun), 0);
    let rerows = read_csv(&again.join("metrics.csv")).unwrap();
    assert!(rows.iter().zip(&rerows).all(|(a, b)| a.same_outcome(b)));
}

#[test]
fn compare_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&fedmerge(&[
            "gen-data",
            "--out",
            data.to_str().unwrap(),
            "--n",
            "600",
            "--rows",
            "4",
            "--cols",
            "4"
        ])),
        0
    );
    let out = dir.path().join("cmp");
    let cfg = mnist_config(dir.path(), &data, &out);
    let cmp = fedmerge(&[
        "compare",
        "--config",
        &cfg,
        "--conditions",
        "normal,poisoning",
        "--seeds",
        "1,2",
    ]);
    assert_eq!(code(&cmp), 0, "{}", String::from_utf8_lossy(&cmp.stderr));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    assert_eq!(
        read_csv(&out.join("metrics.csv")).unwrap().len(),
        2 * 2 * 2 * 3
    );
}

#[test]
fn check_subcommand_passes() {
    let out = fedmerge(&["check", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(
        stdout.lines().filter(|l| l.starts_with("[PASS]")).count(),
        5
    );
}
