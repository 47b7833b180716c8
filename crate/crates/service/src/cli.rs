use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use probsaint_core::checkpoint::Checkpoint;
use probsaint_core::features::{read_csv_path, FeatureSchema, RawRow};
use probsaint_core::metrics::write_intervals_csv;
use probsaint_core::synth::{generate_csv, MarketSpec};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Result, ServiceError};
use crate::workflow::{self, Partition, SweepRequest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "probsaint", version, about = "Probabilistic used-car pricing", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic market dataset, its generator spec and its schema.
    Generate {
        /// Generator spec as JSON; the built-in market when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one model and write its checkpoint and training log.
    Train(TrainArgs),
    /// Random hyperparameter search; writes the best checkpoint and the trial table.
    Search(TrainArgs),
    /// Score a labelled CSV and write metric, bucket and interval files.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Rows to score, selected with the split stored in the checkpoint.
        #[arg(long, value_enum, default_value_t = Partition::Test)]
        partition: Partition,
        /// Use MC-Dropout with this many passes instead of the Gaussian head.
        #[arg(long)]
        mc_dropout: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Predict price distributions for every row of a CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Price one vehicle across offer durations.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON vehicle: either a column map or `{"vehicle": {...}, "durations": [...]}`.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated durations in days.
        #[arg(long, value_delimiter = ',')]
        durations: Option<Vec<f64>>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Serve the model over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration JSON with optional `train`, `split` and `search` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the training seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(ServiceError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate { spec, seed, out_dir } => generate(spec.as_deref(), seed, &out_dir),
        Command::Train(args) => train(&args, false),
        Command::Search(args) => train(&args, true),
        Command::Evaluate { checkpoint, data, partition, mc_dropout, seed, out_dir } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let rows = read_rows(&data, &ckpt.schema)?;
            let eval = workflow::evaluate(&ckpt, &rows, partition, mc_dropout.map(|k| (k, seed)))?;
            create_dir(&out_dir)?;
            write_text(&out_dir.join("report.json"), &eval.report.to_json()?)?;
            eval.report.write_buckets_csv(create(&out_dir.join("buckets.csv"))?)?;
            write_intervals_csv(create(&out_dir.join("intervals.csv"))?, &eval.y, &eval.preds)?;
            let r = &eval.report;
            println!(
                "n={} nll={} mae={} mape={} coverage_1sigma={} coverage_2sigma={}",
                r.n, r.nll, r.mae, r.mape, r.coverage_1sigma, r.coverage_2sigma
            );
            Ok(())
        }
        Command::Predict { checkpoint, data, out_dir } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let rows = read_rows(&data, &ckpt.schema)?;
            let records = workflow::predict_records(&ckpt.predictor()?, &rows)?;
            create_dir(&out_dir)?;
            workflow::write_predictions_csv(create(&out_dir.join("predictions.csv"))?, &records)
        }
        Command::Sweep { checkpoint, data, durations, out_dir } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut req = read_sweep_request(&data)?;
            if durations.is_some() {
                req.durations = durations;
            }
            let sweep = workflow::run_sweep(&ckpt.predictor()?, &req)?;
            create_dir(&out_dir)?;
            write_text(&out_dir.join("sweep.json"), &sweep.to_json()?)?;
            sweep.write_csv(create(&out_dir.join("sweep.csv"))?)?;
            Ok(())
        }
        Command::Serve { checkpoint, port } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let state = crate::http::AppState::load(ckpt)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| ServiceError::Server(e.to_string()))?;
            runtime.block_on(crate::http::serve(state, port))
        }
    }
}

fn generate(spec_path: Option<&Path>, seed: u64, out_dir: &Path) -> Result<()> {
    let spec = match spec_path {
        Some(p) => MarketSpec::from_json(&read_text(p)?)?,
        None => MarketSpec::default(),
    };
    create_dir(out_dir)?;
    let n = generate_csv(&spec, seed, create(&out_dir.join("market.csv"))?)?;
    write_text(&out_dir.join("market_spec.json"), &spec.to_json()?)?;
    write_text(&out_dir.join("schema.json"), &spec.schema().to_json()?)?;
    info!("wrote {n} rows to {}", out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct SplitSummary {
    train_end: String,
    val_start: String,
    test_start: String,
    test_end: String,
    train_rows: usize,
    val_rows: usize,
    test_rows: usize,
}

fn train(args: &TrainArgs, search: bool) -> Result<()> {
    let schema = FeatureSchema::load(&args.schema)?;
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let rows = read_rows(&args.data, &schema)?;
    let prep = workflow::prepare(&schema, &rows, &cfg.split)?;
    create_dir(&args.out_dir)?;
    let (ckpt, log) = if search {
        let (ckpt, log, table) = workflow::search_checkpoint(&prep, &cfg.search, &cfg.train, cfg.train.seed)?;
        write_text(&args.out_dir.join("trials.json"), &to_json(&table)?)?;
        (ckpt, log)
    } else {
        workflow::train_checkpoint(&prep, &cfg.train)?
    };
    ckpt.save(args.out_dir.join("model.ckpt"))?;
    log.write_csv(create(&args.out_dir.join("training_log.csv"))?)?;
    let b = prep.bounds;
    let summary = SplitSummary {
        train_end: b.train_end.to_string(),
        val_start: b.val_start.to_string(),
        test_start: b.test_start.to_string(),
        test_end: b.test_end.to_string(),
        train_rows: prep.partitions.train.len(),
        val_rows: prep.partitions.val.len(),
        test_rows: prep.partitions.test.len(),
    };
    write_text(&args.out_dir.join("split.json"), &to_json(&summary)?)?;
    println!("best epoch {} with validation {} {}", log.best_epoch, log.objective_label(), log.best_val);
    Ok(())
}

fn read_sweep_request(path: &Path) -> Result<SweepRequest> {
    let text = read_text(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|source| ServiceError::Json { path: path.display().to_string(), source })?;
    let wrapped = value.get("vehicle").is_some_and(|v| v.is_object());
    let parsed = if wrapped {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|vehicle| SweepRequest { vehicle, ..Default::default() })
    };
    parsed.map_err(|source| ServiceError::Json { path: path.display().to_string(), source })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(ServiceError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn read_rows(path: &Path, schema: &FeatureSchema) -> Result<Vec<RawRow>> {
    let table = read_csv_path(path, schema)?;
    if !table.errors.is_empty() {
        log::warn!("{} unreadable rows in {}, first: {}", table.errors.len(), path.display(), table.errors[0]);
    }
    Ok(table.rows)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| ServiceError::Server(e.to_string()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| ServiceError::file(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| ServiceError::file(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| ServiceError::file(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| ServiceError::file(path, e))
}
