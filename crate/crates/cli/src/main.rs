use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fediih::graph::{save_graph, GraphFiles};
use fediih::harness::{
    evaluate_clients, export_report, ground_truth_similarity, load_checkpoint, load_dataset, matrix_csv, mean_std,
    partition_graph, prepare, read_report, run_prepared, save_checkpoint, write_similarity, DatasetConfig,
    ExperimentConfig,
};
use fediih::partition::save_partition;

#[derive(Parser)]
#[command(name = "fediih", version, about = "Federated subgraph learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the configured graph into client node sets.
    Partition {
        #[arg(long)]
        config: PathBuf,
        /// Destination partition file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured experiment and write metrics, similarities and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "FEDIIH_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured client shards.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint index (`.json`) written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write per-factor similarity CSVs from a finished run directory.
    ExportHeatmap {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, env = "FEDIIH_OUT_DIR")]
        out: Option<PathBuf>,
        /// Also write the feature/degree ground-truth similarity.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Write the configured synthetic graph as edges.tsv / nodes.tsv.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "FEDIIH_OUT_DIR")]
        out: PathBuf,
    },
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn output_dir(flag: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| config.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Partition { config, out } => {
            let config = read_config(&config)?;
            let graph = load_dataset(&config.dataset)?;
            let partition = partition_graph(&config, &graph)?;
            save_partition(&graph, &partition, &out)?;
            println!("wrote {} client sets to {}", partition.m(), out.display());
        }
        Command::Train { config: path, out } => {
            let config = read_config(&path)?;
            let dir = output_dir(out, &config);
            let prepared = prepare(&config)?;
            log::info!("{} nodes split over {} clients", prepared.graph.n(), prepared.shards.len());
            let output = run_prepared(&config, &prepared)?;
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config)?)?;
            export_report(&dir, &output.report)?;
            for (seed, models) in config.seeds.iter().zip(&output.models) {
                save_checkpoint(&dir, &format!("checkpoint_seed{seed}"), models)?;
            }
            println!(
                "test {:.4} +- {:.4} over {} seed(s); artifacts in {}",
                output.report.test_mean,
                output.report.test_std,
                config.seeds.len(),
                dir.display()
            );
        }
        Command::Eval { config, checkpoint } => {
            let config = read_config(&config)?;
            let prepared = prepare(&config)?;
            let models = load_checkpoint(&checkpoint)?;
            let metrics = evaluate_clients(&config, &prepared.shards, &models)?;
            for m in &metrics {
                println!("{}", serde_json::to_string(m)?);
            }
            let tests: Vec<f64> = metrics.iter().filter_map(|m| m.test).collect();
            let (mean, _) = mean_std(&tests);
            println!("mean test {mean:.4}");
        }
        Command::ExportHeatmap {
            run_dir,
            out,
            ground_truth,
        } => {
            let report = read_report(&run_dir.join("report.json"))?;
            let dir = out.unwrap_or_else(|| run_dir.clone());
            let paths = write_similarity(&dir, &report)?;
            if paths.is_empty() {
                bail!("run in {} has no similarity matrices", run_dir.display());
            }
            if ground_truth {
                let prepared = prepare(&report.config)?;
                let shards: Vec<_> = prepared.shards.iter().map(|s| s.graph.clone()).collect();
                let gt = ground_truth_similarity(&shards, report.config.js_method)?;
                fs::write(dir.join("similarity_ground_truth.csv"), matrix_csv(&gt))?;
            }
            println!("wrote {} matrices to {}", paths.len(), dir.display());
        }
        Command::Generate { config, out } => {
            let config = read_config(&config)?;
            if !matches!(config.dataset, DatasetConfig::Synthetic(_)) {
                bail!("generate needs a synthetic dataset config");
            }
            let graph = load_dataset(&config.dataset)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            save_graph(&graph, &GraphFiles::in_dir(&out))?;
            println!("wrote {} nodes to {}", graph.n(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
