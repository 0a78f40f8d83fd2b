use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedmerge::adversity::Condition;
use fedmerge::config::{
    ExperimentConfig, MNIST_TEST_IMAGES, MNIST_TEST_LABELS, MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS,
};
use fedmerge::data::{generate_blobs, write_idx, DEFAULT_SYNTHETIC_SPREAD};
use fedmerge::error::{Error, Result};
use fedmerge::experiment::{
    baseline_of, compare, run_experiment, write_comparison, write_run_outputs, CompareManifest,
};
use fedmerge::metrics::{emit_metrics, MetricsFormat};
use fedmerge::selfcheck;

#[derive(Parser)]
#[command(
    name = "fedmerge",
    version,
    about = "SCAFFOLD with correlation-based node merging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config (every seed) and write metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        condition: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Baseline SCAFFOLD vs the merging variant across conditions and seeds.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "normal,packet_loss,poisoning"
        )]
        conditions: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset as MNIST-style IDX files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6000)]
        n: usize,
        #[arg(long)]
        test_n: Option<usize>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 28)]
        rows: usize,
        #[arg(long, default_value_t = 28)]
        cols: usize,
        #[arg(long, default_value_t = DEFAULT_SYNTHETIC_SPREAD)]
        spread: f64,
    },
    /// Run the gradient-check and oracle suites.
    Check {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn parse_conditions(names: &[String]) -> Result<Vec<Condition>> {
    names.iter().map(|s| s.trim().parse()).collect()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            config,
            seed,
            rounds,
            condition,
            out,
            format,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seeds = vec![seed];
            }
            if let Some(rounds) = rounds {
                cfg.rounds = rounds;
            }
            if let Some(condition) = condition {
                cfg.adversity.condition = condition.parse()?;
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            cfg.validate()?;
            let output = run_experiment(&cfg)?;
            write_run_outputs(&cfg, &output, &cfg.output_dir)?;
            if let Format::Jsonl = format {
                emit_metrics(
                    &output.rows,
                    &cfg.output_dir.join("metrics.jsonl"),
                    MetricsFormat::Jsonl,
                )?;
            }
            for row in output.rows.iter().filter(|r| r.round + 1 == cfg.rounds) {
                println!(
                    "{} final accuracy {:.4} loss {:.4} nodes {}",
                    row.run_id, row.test_accuracy, row.test_loss, row.n_active_nodes
                );
            }
            println!("wrote {}", cfg.output_dir.display());
            Ok(true)
        }
        Command::Compare {
            config,
            conditions,
            seeds,
            out,
        } => {
            let mut proposed = ExperimentConfig::load(&config)?;
            if proposed.merge.is_none() {
                return Err(Error::ConfigInvalid(
                    "compare needs a config with a merge block".into(),
                ));
            }
            if let Some(out) = out {
                proposed.output_dir = out;
            }
            let seeds = seeds.unwrap_or_else(|| proposed.seeds.clone());
            let conditions = parse_conditions(&conditions)?;
            let baseline = baseline_of(&proposed);
            let comparison = compare(&baseline, &proposed, &conditions, &seeds)?;
            let manifest = CompareManifest {
                config: proposed.clone(),
                conditions,
                seeds,
            };
            write_comparison(&comparison, &manifest, &proposed.output_dir)?;
            print!("{}", comparison.to_text());
            println!("wrote {}", proposed.output_dir.display());
            Ok(true)
        }
        Command::GenData {
            out,
            n,
            test_n,
            classes,
            seed,
            rows,
            cols,
            spread,
        } => {
            if !(2..=256).contains(&classes) || n < classes || rows * cols == 0 {
                return Err(Error::ConfigInvalid(
                    "need 2..=256 classes, n >= classes and a nonempty image".into(),
                ));
            }
            let test_n = test_n.unwrap_or((n / 6).max(1));
            let all = generate_blobs(n + test_n, rows * cols, classes, spread, seed);
            let train = all.subset(&(0..n).collect::<Vec<_>>());
            let test = all.subset(&(n..n + test_n).collect::<Vec<_>>());
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_idx(
                &train,
                rows,
                cols,
                &out.join(MNIST_TRAIN_IMAGES),
                &out.join(MNIST_TRAIN_LABELS),
            )?;
            write_idx(
                &test,
                rows,
                cols,
                &out.join(MNIST_TEST_IMAGES),
                &out.join(MNIST_TEST_LABELS),
            )?;
            println!(
                "wrote {n} training and {test_n} test samples to {}",
                out.display()
            );
            Ok(true)
        }
        Command::Check { seed } => {
            let results = selfcheck::run_all(seed);
            for r in &results {
                println!("{r}");
            }
            Ok(results.iter().all(|r| r.passed))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDMERGE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
