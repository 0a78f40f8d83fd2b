//! Acceptance gate. Prints one `[PASS]`/`[FAIL]` line per criterion and exits
//! nonzero if any criterion fails.
//!
//! The experiment criterion uses MNIST when `FEDMERGE_MNIST_DIR` points at a
//! directory holding the four IDX files, and a synthetic blob dataset
//! otherwise.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedmerge::adversity::Condition;
use fedmerge::config::{
    DatasetConfig, ExperimentConfig, MNIST_TEST_IMAGES, MNIST_TEST_LABELS, MNIST_TRAIN_IMAGES,
    MNIST_TRAIN_LABELS,
};
use fedmerge::data::{generate_synthetic, partition_noniid};
use fedmerge::experiment::{baseline_of, compare, write_comparison, CompareManifest, Comparison};
use fedmerge::merge::MergeConfig;
use fedmerge::metrics::read_csv;
use fedmerge::model::ModelSpec;
use fedmerge::selfcheck::{self, CheckResult};

const SEEDS: [u64; 3] = [1, 2, 3];
const CONDITIONS: [Condition; 3] = [
    Condition::Normal,
    Condition::PacketLoss,
    Condition::Poisoning,
];

fn with_budget(mut r: CheckResult, budget: Duration) -> CheckResult {
    if r.elapsed_ms > budget.as_millis() {
        r.passed = false;
        r.detail = format!("{} [over budget of {} ms]", r.detail, budget.as_millis());
    }
    r
}

fn timed(name: &str, budget: Duration, f: impl FnOnce() -> (bool, String)) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f();
    with_budget(
        CheckResult {
            name: name.to_string(),
            passed,
            detail,
            elapsed_ms: start.elapsed().as_millis(),
        },
        budget,
    )
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os("FEDMERGE_MNIST_DIR")?);
    [
        MNIST_TRAIN_IMAGES,
        MNIST_TRAIN_LABELS,
        MNIST_TEST_IMAGES,
        MNIST_TEST_LABELS,
    ]
    .iter()
    .all(|f| dir.join(f).is_file())
    .then_some(dir)
}

/// 10 clients, T=10, merging at round 4 with threshold 0.7 and cap 3.
fn experiment_config(mnist: Option<PathBuf>) -> ExperimentConfig {
    let (dataset, model) = match mnist {
        Some(dir) => (DatasetConfig::Mnist { dir }, ModelSpec::default()),
        None => (
            DatasetConfig::Synthetic {
                n_train: 6000,
                n_test: 1000,
                input_dim: 64,
                num_classes: 10,
                spread: 0.5,
                seed: 0,
            },
            ModelSpec::new(64, vec![32], 10),
        ),
    };
    ExperimentConfig {
        dataset,
        model,
        num_clients: 10,
        rounds: 10,
        merge: Some(MergeConfig {
            threshold: 0.7,
            max_group_size: 3,
            merge_rounds: vec![4],
            ..MergeConfig::default()
        }),
        seeds: SEEDS.to_vec(),
        ..ExperimentConfig::default()
    }
}

fn mean_of(c: &Comparison, condition: Condition, algorithm: &str) -> f64 {
    c.cell(condition, algorithm)
        .map_or(f64::NAN, |s| s.mean_accuracy)
}

fn experiment(comparison: &Comparison, mnist: bool, elapsed: Duration) -> CheckResult {
    let budget = if mnist {
        Duration::from_secs(15 * 60)
    } else {
        Duration::from_secs(120)
    };
    let mut failures = Vec::new();
    let mut notes = Vec::new();

    for condition in [
        Condition::Normal,
        Condition::PacketLoss,
        Condition::Poisoning,
    ] {
        let b = mean_of(comparison, condition, "scaffold");
        let p = mean_of(comparison, condition, "scaffold_merge");
        notes.push(format!("{condition}: baseline {b:.4} proposed {p:.4}"));
        if condition != Condition::Normal && p < b {
            failures.push(format!("{condition}: proposed below baseline"));
        }
    }
    if mnist {
        if mean_of(comparison, Condition::Normal, "scaffold_merge") < 0.75 {
            failures.push("normal: proposed below 0.75".into());
        }
        if mean_of(comparison, Condition::Poisoning, "scaffold_merge") < 0.55 {
            failures.push("poisoning: proposed below 0.55".into());
        }
    }

    let mut shrinking = 0;
    for seed in SEEDS {
        let rows: Vec<_> = comparison
            .runs
            .rows
            .iter()
            .filter(|r| {
                r.algorithm == "scaffold_merge" && r.condition == "normal" && r.seed == seed
            })
            .collect();
        let before = rows.iter().find(|r| r.round == 3).map(|r| r.n_active_nodes);
        let after = rows.iter().find(|r| r.round == 4).map(|r| r.n_active_nodes);
        if let (Some(before), Some(after)) = (before, after) {
            notes.push(format!("seed {seed} nodes {before}->{after}"));
            if after < before {
                shrinking += 1;
            }
        }
    }
    if shrinking < 2 {
        failures.push(format!(
            "node count shrank at round 4 in only {shrinking} of 3 seeds"
        ));
    }

    let r = CheckResult {
        name: format!(
            "three-condition experiment ({})",
            if mnist { "mnist" } else { "synthetic" }
        ),
        passed: failures.is_empty(),
        detail: format!("{}; {}", notes.join(", "), failures.join("; ")),
        elapsed_ms: elapsed.as_millis(),
    };
    with_budget(r, budget)
}

fn determinism(comparison: &Comparison, manifest: &CompareManifest) -> CheckResult {
    timed(
        "determinism from manifest",
        Duration::from_secs(15 * 60),
        || {
            let dir = tempfile::tempdir().expect("tempdir");
            if let Err(e) = write_comparison(comparison, manifest, dir.path()) {
                return (false, format!("writing outputs: {e}"));
            }
            let text = std::fs::read_to_string(dir.path().join("manifest.json"))
                .expect("manifest written");
            let reloaded: CompareManifest = match serde_json::from_str(&text) {
                Ok(m) => m,
                Err(e) => return (false, format!("manifest does not parse: {e}")),
            };
            let rerun = match compare(
                &baseline_of(&reloaded.config),
                &reloaded.config,
                &reloaded.conditions,
                &reloaded.seeds,
            ) {
                Ok(c) => c,
                Err(e) => return (false, format!("rerun failed: {e}")),
            };
            let written = match read_csv(&dir.path().join("metrics.csv")) {
                Ok(rows) => rows,
                Err(e) => return (false, format!("reading metrics: {e}")),
            };
            let rows = &rerun.runs.rows;
            let same = |a: &[_], b: &[_]| {
                a.len() == b.len()
                    && a.iter().zip(b).all(
                        |(x, y): (
                            &fedmerge::metrics::MetricsRow,
                            &fedmerge::metrics::MetricsRow,
                        )| { x.same_outcome(y) },
                    )
            };
            let passed = same(rows, &comparison.runs.rows)
                && same(rows, &written)
                && rerun.runs.merges == comparison.runs.merges;
            (
                passed,
                format!(
                    "{} rows compared against the first run and its CSV",
                    rows.len()
                ),
            )
        },
    )
}

fn partition_properties() -> CheckResult {
    timed("partition properties", Duration::from_secs(5), || {
        let (clients, per_client, classes) = (10, 8, 10);
        let dataset = generate_synthetic(60_000, 1, classes, 0);
        let mut failures = Vec::new();
        for seed in 0..50u64 {
            let partition = match partition_noniid(&dataset, clients, per_client, seed) {
                Ok(p) => p,
                Err(e) => {
                    failures.push(format!("seed {seed}: {e}"));
                    continue;
                }
            };
            let mut seen = vec![false; dataset.len()];
            for (c, indices) in partition.client_indices.iter().enumerate() {
                if indices.is_empty() {
                    failures.push(format!("seed {seed}: client {c} empty"));
                }
                for &i in indices {
                    if i >= dataset.len() {
                        failures.push(format!("seed {seed}: index {i} out of range"));
                    } else if std::mem::replace(&mut seen[i], true) {
                        failures.push(format!("seed {seed}: index {i} shared"));
                    }
                }
                let missing = dataset
                    .class_counts(indices)
                    .iter()
                    .filter(|&&n| n == 0)
                    .count();
                if missing < 2 {
                    failures.push(format!(
                        "seed {seed}: client {c} lacks only {missing} classes"
                    ));
                }
            }
        }
        failures.truncate(5);
        (
            failures.is_empty(),
            format!(
                "50 seeds, {clients} clients x {per_client} of {classes} classes {}",
                failures.join("; ")
            ),
        )
    })
}

fn main() -> ExitCode {
    let seed = 2024;
    let mut results = vec![
        with_budget(
            selfcheck::check_gradients(20, seed),
            Duration::from_secs(10),
        ),
        with_budget(selfcheck::check_pearson(1000, seed), Duration::from_secs(5)),
        with_budget(
            selfcheck::check_grouping(500, seed),
            Duration::from_secs(10),
        ),
        selfcheck::check_formulas(),
        selfcheck::check_zero_control(seed),
    ];

    let mnist = mnist_dir();
    let is_mnist = mnist.is_some();
    let proposed = experiment_config(mnist);
    let manifest = CompareManifest {
        config: proposed.clone(),
        conditions: CONDITIONS.to_vec(),
        seeds: SEEDS.to_vec(),
    };
    let start = Instant::now();
    match compare(&baseline_of(&proposed), &proposed, &CONDITIONS, &SEEDS) {
        Ok(comparison) => {
            results.push(experiment(&comparison, is_mnist, start.elapsed()));
            results.push(determinism(&comparison, &manifest));
        }
        Err(e) => results.push(CheckResult {
            name: "three-condition experiment".into(),
            passed: false,
            detail: e.to_string(),
            elapsed_ms: start.elapsed().as_millis(),
        }),
    }
    results.push(partition_properties());

    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
