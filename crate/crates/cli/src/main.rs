use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use pfcm_core::cluster::{CutCriterion, Metric};
use pfcm_core::dataset::{generate_synthetic, write_csv_file};
use pfcm_core::experiment::{
    self, load_models, prepare_data, write_comparison, write_test_outcome, write_training,
};
use pfcm_core::{AccessLedger, ErrorKind, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "pfcm",
    version,
    about = "Personalized federated cluster models simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic non-IID dataset and its ground-truth groups.
    Synth(Common),
    /// Global FedAvg, delta clustering and per-cluster training.
    Train(Common),
    /// Register held-out clients against trained cluster models.
    Test {
        #[command(flatten)]
        common: Common,
        /// Directory holding the training run (defaults to --out).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Train, test and score a plain FedAvg baseline on the same split.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV (synthetic data is generated when omitted).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_classes)]
    classes: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    cluster_rounds: Option<usize>,
    /// `gap`, `k=<n>` or `tau=<x>`.
    #[arg(long)]
    cut: Option<CutCriterion>,
    #[arg(long, value_parser = parse_metric)]
    metric: Option<Metric>,
}

fn parse_classes(s: &str) -> std::result::Result<usize, String> {
    match s {
        "2" => Ok(2),
        "3" => Ok(3),
        other => Err(format!("expected 2 or 3, got `{other}`")),
    }
}

fn parse_metric(s: &str) -> std::result::Result<Metric, String> {
    match s {
        "cosine" => Ok(Metric::Cosine),
        "euclidean" => Ok(Metric::Euclidean),
        other => Err(format!("expected `cosine` or `euclidean`, got `{other}`")),
    }
}

impl Common {
    fn resolve(&self) -> pfcm_core::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(data) = &self.data {
            config.data = Some(data.clone());
        }
        if let Some(out) = &self.out {
            config.out = out.clone();
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(classes) = self.classes {
            config.classes = classes;
        }
        if let Some(rounds) = self.rounds {
            config.rounds = rounds;
        }
        if let Some(rounds) = self.cluster_rounds {
            config.cluster_rounds = rounds;
        }
        if let Some(cut) = self.cut {
            config.cut = cut;
        }
        if let Some(metric) = self.metric {
            config.metric = metric;
        }
        config.validate()?;
        Ok(config.resolved())
    }
}

fn synth(config: &ExperimentConfig) -> Result<()> {
    let dir = &config.out;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let data = generate_synthetic(&config.synthetic_spec())?;
    let data_path = dir.join("data.csv");
    let groups_path = dir.join("groups.csv");
    write_csv_file(&data.records, &data_path)?;
    data.write_groups_file(&groups_path)?;
    // the written config trains on the generated files
    let resolved = ExperimentConfig {
        data: Some(data_path.clone()),
        groups: Some(groups_path),
        ..config.clone()
    };
    write_config(dir, &resolved)?;
    println!(
        "wrote {} records for {} clients to {}",
        data.records.len(),
        data.groups.len(),
        data_path.display()
    );
    Ok(())
}

fn write_config(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    let path = dir.join("config.toml");
    std::fs::write(&path, config.to_toml()).with_context(|| format!("writing {}", path.display()))
}

fn report_clamped(clamped: usize) {
    if clamped > 0 {
        warn!("{clamped} test feature values were clamped into the training range");
    }
}

fn train(config: &ExperimentConfig) -> Result<()> {
    let data = prepare_data(config)?;
    let ledger = AccessLedger::new();
    let outcome = experiment::train(config, &data.train, &ledger)?;
    write_training(&config.out, config, &data, &outcome)?;
    let last = outcome.global_reports.last();
    println!(
        "trained {} clients: global accuracy {}, {} clusters; outputs in {}",
        data.train.len(),
        last.map_or("n/a".into(), |r| format!("{:.2}%", 100.0 * r.accuracy)),
        outcome.partition.num_clusters(),
        config.out.display()
    );
    Ok(())
}

fn test(config: &ExperimentConfig, checkpoints: &Path) -> Result<()> {
    let data = prepare_data(config)?;
    report_clamped(data.clamped);
    let (global, clusters) = load_models(checkpoints, &config.cnn_spec())?;
    info!(
        "loaded {} cluster models from {}",
        clusters.len(),
        checkpoints.display()
    );
    let ledger = AccessLedger::new();
    let outcome = experiment::test(config, &data.test, &clusters, &global, &ledger)?;
    write_test_outcome(&config.out, config, &outcome)?;
    println!(
        "tested {} clients: final accuracy {:.2}% (pooled {:.2}%)",
        outcome.report.clients.len(),
        100.0 * outcome.report.final_accuracy,
        100.0 * outcome.report.pooled_accuracy
    );
    Ok(())
}

fn compare(config: &ExperimentConfig) -> Result<()> {
    let data = prepare_data(config)?;
    report_clamped(data.clamped);
    let ledger = AccessLedger::new();
    let outcome = experiment::compare(config, &data, &ledger)?;
    write_comparison(&config.out, config, &data, &outcome)?;
    let cmp = &outcome.comparison;
    println!("method  final_accuracy  pooled_accuracy");
    for (name, r) in [("pfcm", &cmp.pfcm), ("fedavg", &cmp.fedavg)] {
        println!(
            "{name:<7} {:>13.2}% {:>15.2}%",
            100.0 * r.final_accuracy,
            100.0 * r.pooled_accuracy
        );
    }
    if let Some(ari) = cmp.ari {
        println!(
            "clusters: {} (ARI vs ground truth {ari:.3})",
            cmp.num_clusters
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => synth(&common.resolve()?),
        Command::Train(common) => train(&common.resolve()?),
        Command::Test {
            common,
            checkpoints,
        } => {
            let config = common.resolve()?;
            let dir = checkpoints.unwrap_or_else(|| config.out.clone());
            test(&config, &dir)
        }
        Command::Compare(common) => compare(&common.resolve()?),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err
        .downcast_ref::<pfcm_core::Error>()
        .map(pfcm_core::Error::kind)
    {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Data) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
