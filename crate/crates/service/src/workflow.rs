//! The operations behind each subcommand and endpoint, kept free of I/O
//! so the CLI and the HTTP server share one code path.

use std::collections::BTreeMap;
use std::io::Write;

use log::{info, warn};
use probsaint_core::checkpoint::Checkpoint;
use probsaint_core::features::{
    encode_rows, fit_encoders, split_by_bounds, EncodedBatch, FeatureSchema, FittedEncoders, Partitions, RawRow,
    SplitBounds,
};
use probsaint_core::forecast::{duration_sweep, SweepResult, DEFAULT_DURATIONS};
use probsaint_core::inference::{ContextPolicy, GaussianPrediction, Predictor};
use probsaint_core::metrics::MetricReport;
use probsaint_core::train::{random_search, train, SearchSpace, TrainConfig, TrainingLog, TrialRecord};
use probsaint_core::RowError;
use serde::{Deserialize, Serialize};

use crate::config::SplitConfig;
use crate::error::{Result, ServiceError};

/// A split dataset with encoders fitted on its training partition.
pub struct Prepared {
    pub schema: FeatureSchema,
    pub bounds: SplitBounds,
    pub partitions: Partitions,
    pub encoders: FittedEncoders,
    pub train: EncodedBatch,
    pub val: EncodedBatch,
}

fn encode_logged(rows: &[RawRow], schema: &FeatureSchema, enc: &FittedEncoders, what: &str) -> Result<EncodedBatch> {
    let out = encode_rows(rows, schema, enc)?;
    if !out.errors.is_empty() {
        warn!("{} {what} rows skipped, first: {}", out.errors.len(), out.errors[0]);
    }
    Ok(out.batch)
}

pub fn prepare(schema: &FeatureSchema, rows: &[RawRow], split: &SplitConfig) -> Result<Prepared> {
    let bounds = split.bounds(rows, schema)?;
    let partitions = split_by_bounds(rows, schema, &bounds)?;
    if !partitions.errors.is_empty() {
        warn!("{} rows without a usable sale date, first: {}", partitions.errors.len(), partitions.errors[0]);
    }
    info!(
        "split at {}: {} train, {} val, {} test rows",
        bounds.test_start,
        partitions.train.len(),
        partitions.val.len(),
        partitions.test.len()
    );
    let encoders = fit_encoders(&partitions.train, schema)?;
    let train = encode_logged(&partitions.train, schema, &encoders, "training")?;
    let val = encode_logged(&partitions.val, schema, &encoders, "validation")?;
    Ok(Prepared { schema: schema.clone(), bounds, partitions, encoders, train, val })
}

pub fn train_checkpoint(prep: &Prepared, cfg: &TrainConfig) -> Result<(Checkpoint, TrainingLog)> {
    let outcome = train(&prep.train, &prep.val, &prep.encoders, cfg)?;
    let log = outcome.log.clone();
    let ckpt = Checkpoint::from_training(
        outcome,
        &prep.partitions.train,
        &prep.train,
        prep.encoders.clone(),
        prep.schema.clone(),
        cfg,
        Some(prep.bounds),
    )?;
    Ok((ckpt, log))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialTable {
    pub best_trial: usize,
    pub trials: Vec<TrialRecord>,
}

pub fn search_checkpoint(
    prep: &Prepared,
    space: &SearchSpace,
    base: &TrainConfig,
    seed: u64,
) -> Result<(Checkpoint, TrainingLog, TrialTable)> {
    let outcome = random_search(space, base, &prep.train, &prep.val, &prep.encoders, space.trials, seed)?;
    let log = outcome.best.log.clone();
    let table = TrialTable { best_trial: outcome.best_trial, trials: outcome.trials };
    let ckpt = Checkpoint::from_training(
        outcome.best,
        &prep.partitions.train,
        &prep.train,
        prep.encoders.clone(),
        prep.schema.clone(),
        &outcome.best_config,
        Some(prep.bounds),
    )?;
    Ok((ckpt, log, table))
}

/// Which rows of the input file `evaluate` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Partition {
    All,
    Train,
    Val,
    Test,
}

pub struct Evaluation {
    pub report: MetricReport,
    pub y: Vec<f64>,
    pub preds: Vec<GaussianPrediction>,
    pub skipped: Vec<RowError>,
}

/// Scores one partition of `rows` under the fixed-context policy, or with
/// MC-Dropout when `mc_dropout = Some((passes, seed))`.
pub fn evaluate(
    ckpt: &Checkpoint,
    rows: &[RawRow],
    partition: Partition,
    mc_dropout: Option<(usize, u64)>,
) -> Result<Evaluation> {
    let selected = match partition {
        Partition::All => rows.to_vec(),
        part => {
            let bounds = ckpt.split.ok_or_else(|| {
                ServiceError::Usage("the checkpoint stores no split; evaluate with --partition all".into())
            })?;
            let mut p = split_by_bounds(rows, &ckpt.schema, &bounds)?;
            match part {
                Partition::Train => std::mem::take(&mut p.train),
                Partition::Val => std::mem::take(&mut p.val),
                _ => std::mem::take(&mut p.test),
            }
        }
    };
    let predictor = ckpt.predictor()?;
    let (batch, skipped) = predictor.encode(&selected)?;
    if !skipped.is_empty() {
        warn!("{} rows skipped, first: {}", skipped.len(), skipped[0]);
    }
    let y = batch.targets_raw()?;
    let preds = match mc_dropout {
        Some((k, seed)) => predictor.mc_dropout_predict(&batch, k, seed, ContextPolicy::FixedContext)?,
        None => predictor.predict_encoded(&batch, ContextPolicy::FixedContext)?,
    };
    let std = ckpt.encoders.target.std;
    let report = MetricReport::compute(&y, &preds, ckpt.model.config.epsilon * std * std, None)?;
    Ok(Evaluation { report, y, preds, skipped })
}

/// One output line of `predict`: a prediction, or the reason there is none.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionRecord {
    pub row: usize,
    pub prediction: Option<GaussianPrediction>,
    pub error: Option<String>,
}

pub fn predict_records(predictor: &Predictor, rows: &[RawRow]) -> Result<Vec<PredictionRecord>> {
    let mut records: Vec<PredictionRecord> =
        (0..rows.len()).map(|row| PredictionRecord { row, prediction: None, error: None }).collect();
    let (batch, errors) = predictor.encode(rows)?;
    for e in errors {
        records[e.row].error = Some(e.message);
    }
    let preds = predictor.predict_encoded(&batch, ContextPolicy::FixedContext)?;
    for (p, &src) in preds.into_iter().zip(&batch.source_rows) {
        records[src].prediction = Some(p);
    }
    Ok(records)
}

pub fn write_predictions_csv<W: Write>(writer: W, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let csv_err = |e: csv::Error| ServiceError::Server(format!("writing predictions: {e}"));
    w.write_record(["row", "mu", "sigma", "confidence", "excluded", "error"]).map_err(csv_err)?;
    for r in records {
        let p = r.prediction.as_ref();
        w.write_record([
            r.row.to_string(),
            fmt(p.map(|p| p.mu)),
            fmt(p.map(|p| p.sigma)),
            fmt(p.and_then(|p| p.confidence)),
            p.map(|p| p.excluded.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| ServiceError::Server(format!("writing predictions: {e}")))
}

/// Body of `POST /v1/sweep`, also accepted by the `sweep` subcommand.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRequest {
    pub vehicle: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub durations: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vehicle_id: Option<String>,
}

pub fn run_sweep(predictor: &Predictor, req: &SweepRequest) -> Result<SweepResult> {
    let row = RawRow::from_json_map(&predictor.schema, &req.vehicle, 0).map_err(probsaint_core::Error::from)?;
    let durations = req.durations.clone().unwrap_or_else(|| DEFAULT_DURATIONS.to_vec());
    Ok(duration_sweep(predictor, &row, &durations, req.vehicle_id.clone())?)
}
