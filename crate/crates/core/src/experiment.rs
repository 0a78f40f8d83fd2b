//! Experiment orchestration: per-seed runs, baseline-vs-merge comparison and
//! on-disk outputs.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversity::{self, Condition};
use crate::config::{
    DatasetConfig, ExperimentConfig, MNIST_TEST_IMAGES, MNIST_TEST_LABELS, MNIST_TRAIN_IMAGES,
    MNIST_TRAIN_LABELS,
};
use crate::data::{generate_blobs, load_idx, partition_noniid, Dataset};
use crate::error::{Error, Result};
use crate::merge::{apply_merge, correlation_matrix, group_similar};
use crate::metrics::{emit_metrics, write_jsonl, MergeEvent, MetricsFormat, MetricsRow};
use crate::model::{evaluate, init_params, Batch};
use crate::numeric::ParamVector;
use crate::scaffold::{run_round, ClientState, History, MlpObjective, ServerState};

/// Training and held-out test data for a config.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Batch,
}

pub fn load_data(config: &ExperimentConfig) -> Result<LoadedData> {
    let data = match &config.dataset {
        DatasetConfig::Mnist { dir } => {
            let train = load_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?;
            let test = load_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS))?;
            LoadedData {
                train,
                test: test.to_batch(),
            }
        }
        DatasetConfig::Synthetic {
            n_train,
            n_test,
            input_dim,
            num_classes,
            spread,
            seed,
        } => {
            let all = generate_blobs(n_train + n_test, *input_dim, *num_classes, *spread, *seed);
            let train: Vec<usize> = (0..*n_train).collect();
            let test: Vec<usize> = (*n_train..n_train + n_test).collect();
            LoadedData {
                train: all.subset(&train),
                test: all.subset(&test).to_batch(),
            }
        }
    };
    if data.train.input_dim() != config.model.input_dim {
        return Err(Error::DataLoadFailure(format!(
            "dataset has {} features but the model expects {}",
            data.train.input_dim(),
            config.model.input_dim
        )));
    }
    if data.train.num_classes > config.model.num_classes
        || data
            .test
            .labels
            .iter()
            .any(|&y| y >= config.model.num_classes)
    {
        return Err(Error::DataLoadFailure(format!(
            "dataset labels exceed the model's {} classes",
            config.model.num_classes
        )));
    }
    Ok(data)
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub merges: Vec<MergeEvent>,
}

impl RunOutput {
    fn extend(&mut self, other: RunOutput) {
        self.rows.extend(other.rows);
        self.merges.extend(other.merges);
    }
}

pub fn run_id(config: &ExperimentConfig, seed: u64) -> String {
    format!(
        "{}-{}-{}-s{seed}",
        config.algorithm(),
        config.adversity.condition,
        config.mode.as_str()
    )
}

/// One full training run for a single seed.
pub fn run_seed(config: &ExperimentConfig, data: &LoadedData, seed: u64) -> Result<RunOutput> {
    let run_id = run_id(config, seed);
    let partition = partition_noniid(
        &data.train,
        config.num_clients,
        config.classes_per_client,
        seed,
    )?;
    let x0 = init_params(&config.model, seed);
    let mut clients: Vec<ClientState> = partition
        .client_indices
        .into_iter()
        .enumerate()
        .map(|(id, indices)| ClientState {
            x: x0.clone(),
            ..ClientState::new(id, indices, x0.len())
        })
        .collect();
    let adversity_seed = config.adversity.effective_seed(seed);
    let affected = adversity::mark_affected(&mut clients, &config.adversity, adversity_seed);
    if !affected.is_empty() {
        log::info!("{run_id}: affected clients {affected:?}");
    }
    let train = adversity::apply_poisoning(&clients, &data.train, &config.adversity, seed)?;
    let objective = MlpObjective {
        spec: &config.model,
        dataset: &train,
    };

    let mut server = ServerState::new(
        x0,
        config.eta_g,
        config.eta_l,
        config.local_epochs,
        config.mode,
    );
    let mut history = History::new();
    let mut out = RunOutput::default();
    let mut groups_total = 0;

    for t in 0..config.rounds {
        let started = Instant::now();
        let report = run_round(
            &mut server,
            &mut clients,
            &objective,
            config.batch_size,
            &config.adversity,
            &mut history,
            seed,
        )?;
        if report.skipped {
            log::warn!("{run_id}: round {t} skipped, no deliveries");
        }

        if let Some(merge) = &config.merge {
            if merge.merge_rounds.contains(&t) && clients.len() >= 2 {
                let models: Vec<&ParamVector> = clients.iter().map(|c| &c.x).collect();
                let matrix = correlation_matrix(&models)?;
                let plan = group_similar(&matrix, merge.threshold, merge.max_group_size);
                let ids = |positions: &[usize]| {
                    positions.iter().map(|&p| clients[p].id).collect::<Vec<_>>()
                };
                let event = MergeEvent {
                    run_id: run_id.clone(),
                    round: t,
                    groups: plan.groups.iter().map(|g| ids(g)).collect(),
                    unmerged: ids(&plan.unmerged),
                };
                log::info!("{run_id}: round {t} merge groups {:?}", event.groups);
                groups_total += plan.groups.len();
                clients = apply_merge(&clients, &plan, merge.alpha_rule)?;
                out.merges.push(event);
            }
        }

        let eval = evaluate(&config.model, &server.x, &data.test)?;
        let wall_ms = started.elapsed().as_millis() as u64;
        log::debug!(
            "{run_id}: round {t} accuracy {:.4} loss {:.4} nodes {}",
            eval.accuracy,
            eval.loss,
            clients.len()
        );
        out.rows.push(MetricsRow {
            run_id: run_id.clone(),
            algorithm: config.algorithm().to_string(),
            condition: config.adversity.condition.to_string(),
            mode: config.mode.as_str().to_string(),
            seed,
            round: t,
            n_active_nodes: clients.len(),
            n_groups_total: groups_total,
            test_accuracy: eval.accuracy,
            test_loss: eval.loss,
            wall_ms,
        });
    }
    Ok(out)
}

/// Runs every configured seed in order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let data = load_data(config)?;
    run_with_data(config, &data)
}

pub fn run_with_data(config: &ExperimentConfig, data: &LoadedData) -> Result<RunOutput> {
    let mut out = RunOutput::default();
    for &seed in &config.seeds {
        out.extend(run_seed(config, data, seed)?);
    }
    Ok(out)
}

/// Writes `metrics.csv`, `merges.jsonl` and the resolved `manifest.json`.
pub fn write_run_outputs(config: &ExperimentConfig, output: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    emit_metrics(&output.rows, &dir.join("metrics.csv"), MetricsFormat::Csv)?;
    write_jsonl(&output.merges, &dir.join("merges.jsonl"))?;
    let manifest = dir.join("manifest.json");
    std::fs::write(&manifest, config.to_json()).map_err(|e| Error::io(&manifest, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub condition: String,
    pub algorithm: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub condition: String,
    pub seed: u64,
    pub baseline_accuracy: f64,
    pub proposed_accuracy: f64,
    /// `proposed`, `baseline` or `tie`.
    pub winner: String,
}

#[derive(Debug, Clone, Default)]
pub struct Comparison {
    pub cells: Vec<SummaryCell>,
    pub per_seed: Vec<SeedOutcome>,
    pub runs: RunOutput,
}

impl Comparison {
    pub fn cell(&self, condition: Condition, algorithm: &str) -> Option<&SummaryCell> {
        self.cells
            .iter()
            .find(|c| c.condition == condition.as_str() && c.algorithm == algorithm)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:<15} {:>10} {:>10} {:>6}",
            "condition", "algorithm", "mean_acc", "std_acc", "seeds"
        );
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<12} {:<15} {:>10.4} {:>10.4} {:>6}",
                c.condition, c.algorithm, c.mean_accuracy, c.std_accuracy, c.seeds
            );
        }
        let _ = writeln!(s);
        for o in &self.per_seed {
            let _ = writeln!(
                s,
                "{:<12} seed {:<6} baseline {:.4}  proposed {:.4}  -> {}",
                o.condition, o.seed, o.baseline_accuracy, o.proposed_accuracy, o.winner
            );
        }
        s
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Baseline config: the proposed config with the merge block removed.
pub fn baseline_of(proposed: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        merge: None,
        ..proposed.clone()
    }
}

/// Runs baseline and proposed arms for every condition and seed and
/// summarizes final-round accuracy.
pub fn compare(
    baseline: &ExperimentConfig,
    proposed: &ExperimentConfig,
    conditions: &[Condition],
    seeds: &[u64],
) -> Result<Comparison> {
    if baseline.dataset != proposed.dataset || baseline.model != proposed.model {
        return Err(Error::ConfigInvalid(
            "baseline and proposed must share dataset and model".into(),
        ));
    }
    let data = load_data(proposed)?;
    let arm = |cfg: &ExperimentConfig, condition: Condition| {
        let mut c = cfg.clone();
        c.adversity.condition = condition;
        c.seeds = seeds.to_vec();
        c
    };
    let mut jobs = Vec::new();
    for &condition in conditions {
        for cfg in [arm(baseline, condition), arm(proposed, condition)] {
            cfg.validate()?;
            for &seed in seeds {
                jobs.push((cfg.clone(), seed));
            }
        }
    }
    let results: Vec<RunOutput> = jobs
        .par_iter()
        .map(|(cfg, seed)| run_seed(cfg, &data, *seed))
        .collect::<Result<_>>()?;

    let mut comparison = Comparison::default();
    let final_acc = |out: &RunOutput| out.rows.last().map_or(0.0, |r| r.test_accuracy);
    let mut i = 0;
    for &condition in conditions {
        let mut arms: Vec<(String, Vec<f64>)> = Vec::new();
        for cfg in [baseline, proposed] {
            let mut accs = Vec::new();
            for _ in seeds {
                accs.push(final_acc(&results[i]));
                comparison.runs.extend(results[i].clone());
                i += 1;
            }
            let label = if cfg.merge.is_some() {
                "scaffold_merge"
            } else {
                "scaffold"
            };
            let (mean, std) = mean_std(&accs);
            comparison.cells.push(SummaryCell {
                condition: condition.to_string(),
                algorithm: label.to_string(),
                mean_accuracy: mean,
                std_accuracy: std,
                seeds: accs.len(),
            });
            arms.push((label.to_string(), accs));
        }
        for (k, &seed) in seeds.iter().enumerate() {
            let (b, p) = (arms[0].1[k], arms[1].1[k]);
            let winner = if p > b {
                "proposed"
            } else if b > p {
                "baseline"
            } else {
                "tie"
            };
            comparison.per_seed.push(SeedOutcome {
                condition: condition.to_string(),
                seed,
                baseline_accuracy: b,
                proposed_accuracy: p,
                winner: winner.to_string(),
            });
        }
    }
    Ok(comparison)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareManifest {
    pub config: ExperimentConfig,
    pub conditions: Vec<Condition>,
    pub seeds: Vec<u64>,
}

/// Writes `summary.csv`, `per_seed.csv`, `summary.txt`, all metrics rows and
/// a manifest that reproduces the comparison.
pub fn write_comparison(
    comparison: &Comparison,
    manifest: &CompareManifest,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_err = |path: &Path, e: csv::Error| Error::io(path, std::io::Error::other(e));

    let summary = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary).map_err(|e| csv_err(&summary, e))?;
    for cell in &comparison.cells {
        w.serialize(cell).map_err(|e| csv_err(&summary, e))?;
    }
    w.flush().map_err(|e| Error::io(&summary, e))?;

    let per_seed = dir.join("per_seed.csv");
    let mut w = csv::Writer::from_path(&per_seed).map_err(|e| csv_err(&per_seed, e))?;
    for o in &comparison.per_seed {
        w.serialize(o).map_err(|e| csv_err(&per_seed, e))?;
    }
    w.flush().map_err(|e| Error::io(&per_seed, e))?;

    let text = dir.join("summary.txt");
    std::fs::write(&text, comparison.to_text()).map_err(|e| Error::io(&text, e))?;
    emit_metrics(
        &comparison.runs.rows,
        &dir.join("metrics.csv"),
        MetricsFormat::Csv,
    )?;
    write_jsonl(&comparison.runs.merges, &dir.join("merges.jsonl"))?;
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetConfig::Synthetic {
                n_train: 600,
                n_test: 200,
                input_dim: 8,
                num_classes: 4,
                spread: 0.2,
                seed: 0,
            },
            num_clients: 4,
            classes_per_client: 3,
            rounds: 4,
            local_epochs: 1,
            batch_size: 16,
            eta_l: 0.1,
            model: ModelSpec::new(8, vec![6], 4),
            merge: Some(crate::merge::MergeConfig {
                merge_rounds: vec![1],
                ..Default::default()
            }),
            seeds: vec![3, 4],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn rows_cover_every_seed_and_round() {
        let cfg = small_config();
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.rows.len(), 2 * 4);
        for (k, row) in out.rows.iter().enumerate() {
            assert_eq!(row.round, k % 4);
            assert!((0.0..=1.0).contains(&row.test_accuracy));
        }
        for seed_rows in out.rows.chunks(4) {
            assert!(seed_rows
                .windows(2)
                .all(|w| w[1].n_active_nodes <= w[0].n_active_nodes));
            assert_eq!(seed_rows[0].n_active_nodes, 4);
        }
        assert_eq!(out.merges.len(), 2);
    }

    #[test]
    fn baseline_never_merges() {
        let cfg = baseline_of(&small_config());
        let out = run_experiment(&cfg).unwrap();
        assert!(out
            .rows
            .iter()
            .all(|r| r.n_active_nodes == 4 && r.algorithm == "scaffold"));
        assert!(out.merges.is_empty());
    }

    #[test]
    fn identical_arms_give_identical_summaries() {
        let cfg = small_config();
        let cmp = compare(&cfg, &cfg, &[Condition::Normal, Condition::Poisoning], &[1]).unwrap();
        assert_eq!(cmp.cells.len(), 4);
        assert_eq!(cmp.cells[0].mean_accuracy, cmp.cells[1].mean_accuracy);
        assert!(cmp.per_seed.iter().all(|o| o.winner == "tie"));
    }

    #[test]
    fn mean_std_sample_formula() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }
}
