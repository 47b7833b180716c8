use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RowError};
use crate::features::{encode_rows, EncodedBatch, FeatureSchema, FittedEncoders, RawRow, Standardizer};
use crate::model::{ModelConfig, ProbSaintModel, RawOutputs};

/// Predictive distribution for one row, in currency units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mu: f64,
    pub sigma: f64,
    /// `1 - sigma / mu`; absent when `mu <= 0`.
    pub confidence: Option<f64>,
    pub excluded: bool,
}

impl GaussianPrediction {
    pub fn new(mu: f64, sigma: f64) -> Self {
        let confidence = (mu > 0.0).then(|| 1.0 - sigma / mu);
        Self { mu, sigma, confidence, excluded: confidence.is_none() }
    }
}

/// How rows are grouped into batches at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ContextPolicy {
    /// Consecutive chunks of `batch_size` rows in input order; the last
    /// chunk may be short.
    BatchAsIs { batch_size: usize },
    /// Each row is scored alone together with the stored context rows.
    FixedContext,
}

/// Fixed-context queries evaluated per forward pass.
const QUERIES_PER_PASS: usize = 256;

fn eval_pass(model: &ProbSaintModel, context: Option<&EncodedBatch>, batch: &EncodedBatch) -> Result<RawOutputs> {
    // Dropout is inactive in evaluation mode, so the generator is never drawn from.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    match context {
        Some(ctx) => model.forward_fixed_context(ctx, batch, false, &mut rng),
        None => model.forward_eval(batch),
    }
}

/// Smallest predictive standard deviation in currency units.
pub fn sigma_floor(config: &ModelConfig, target: &Standardizer) -> f64 {
    config.epsilon.sqrt() * target.std
}

/// Un-standardizes raw outputs. Point models get the floor as sigma.
pub fn to_predictions(out: &RawOutputs, config: &ModelConfig, target: &Standardizer) -> Vec<GaussianPrediction> {
    out.mu_std
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let sigma = match &out.s_raw {
                Some(s) => config.link(s[i]).sqrt() * target.std,
                None => sigma_floor(config, target),
            };
            GaussianPrediction::new(target.invert(m), sigma)
        })
        .collect()
}

/// Scores `batch` in consecutive chunks of `batch_size` rows (the last one
/// may be short), in evaluation mode.
pub fn predict_batch_as_is(
    model: &ProbSaintModel,
    target: &Standardizer,
    batch: &EncodedBatch,
    batch_size: usize,
) -> Result<Vec<GaussianPrediction>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut preds = Vec::with_capacity(batch.len());
    for chunk in idx.chunks(batch_size) {
        let out = model.forward_eval(&batch.subset(chunk))?;
        preds.extend(to_predictions(&out, &model.config, target));
    }
    Ok(preds)
}

/// Seeded choice of `m` distinct training rows to serve as the fixed
/// context, returned in ascending order.
pub fn select_context(n: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, m.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Scores every row of `batch` as its own episode `[context, row]`.
pub fn predict_fixed_context(
    model: &ProbSaintModel,
    target: &Standardizer,
    context: &EncodedBatch,
    batch: &EncodedBatch,
) -> Result<Vec<GaussianPrediction>> {
    let out = run_policy(Some(context), true, batch, ContextPolicy::FixedContext, |c, b| eval_pass(model, c, b))?;
    Ok(to_predictions(&out, &model.config, target))
}

/// Rows of models that never attend across rows need no context, so
/// `FixedContext` degenerates to independent chunks for them.
fn run_policy(
    context: Option<&EncodedBatch>,
    couples_rows: bool,
    batch: &EncodedBatch,
    policy: ContextPolicy,
    mut forward: impl FnMut(Option<&EncodedBatch>, &EncodedBatch) -> Result<RawOutputs>,
) -> Result<RawOutputs> {
    let (ctx, chunk_size) = match policy {
        ContextPolicy::BatchAsIs { batch_size: 0 } => {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        ContextPolicy::BatchAsIs { batch_size } => (None, batch_size),
        ContextPolicy::FixedContext if context.is_none() && !couples_rows => (None, QUERIES_PER_PASS),
        ContextPolicy::FixedContext => {
            let ctx = context
                .ok_or_else(|| Error::Checkpoint("fixed-context inference needs a stored context batch".into()))?;
            (Some(ctx), QUERIES_PER_PASS)
        }
    };
    let mut all = RawOutputs { mu_std: Vec::with_capacity(batch.len()), s_raw: None };
    let idx: Vec<usize> = (0..batch.len()).collect();
    for chunk in idx.chunks(chunk_size) {
        let out = forward(ctx, &batch.subset(chunk))?;
        all.mu_std.extend_from_slice(&out.mu_std);
        if let Some(s) = out.s_raw {
            all.s_raw.get_or_insert_with(Vec::new).extend_from_slice(&s);
        }
    }
    Ok(all)
}

/// Everything needed to score rows: network, encoders, schema and the
/// encoded context batch.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub model: ProbSaintModel,
    pub encoders: FittedEncoders,
    pub schema: FeatureSchema,
    pub context: Option<EncodedBatch>,
}

impl Predictor {
    pub fn new(
        model: ProbSaintModel,
        encoders: FittedEncoders,
        schema: FeatureSchema,
        context_rows: &[RawRow],
    ) -> Result<Self> {
        let context = if context_rows.is_empty() {
            None
        } else {
            let enc = encode_rows(context_rows, &schema, &encoders)?;
            if !enc.errors.is_empty() {
                return Err(Error::Checkpoint(format!("context row failed to encode: {}", enc.errors[0])));
            }
            Some(enc.batch)
        };
        Ok(Self { model, encoders, schema, context })
    }

    pub fn encode(&self, rows: &[RawRow]) -> Result<(EncodedBatch, Vec<RowError>)> {
        let enc = encode_rows(rows, &self.schema, &self.encoders)?;
        Ok((enc.batch, enc.errors))
    }

    /// Raw outputs for `batch` under `policy`, in batch order.
    pub fn raw_outputs(&self, batch: &EncodedBatch, policy: ContextPolicy) -> Result<RawOutputs> {
        self.run(batch, policy, |c, b| eval_pass(&self.model, c, b))
    }

    fn run(
        &self,
        batch: &EncodedBatch,
        policy: ContextPolicy,
        forward: impl FnMut(Option<&EncodedBatch>, &EncodedBatch) -> Result<RawOutputs>,
    ) -> Result<RawOutputs> {
        run_policy(self.context.as_ref(), self.model.config.couples_rows(), batch, policy, forward)
    }

    pub fn predict_encoded(&self, batch: &EncodedBatch, policy: ContextPolicy) -> Result<Vec<GaussianPrediction>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        if let ContextPolicy::BatchAsIs { batch_size } = policy {
            return predict_batch_as_is(&self.model, &self.encoders.target, batch, batch_size);
        }
        let out = self.raw_outputs(batch, policy)?;
        Ok(to_predictions(&out, &self.model.config, &self.encoders.target))
    }

    /// Encodes and scores raw rows. Rows that fail validation are reported
    /// and get no prediction.
    pub fn predict_rows(
        &self,
        rows: &[RawRow],
        policy: ContextPolicy,
    ) -> Result<(Vec<GaussianPrediction>, EncodedBatch, Vec<RowError>)> {
        let (batch, errors) = self.encode(rows)?;
        let preds = self.predict_encoded(&batch, policy)?;
        Ok((preds, batch, errors))
    }

    /// MC-Dropout: `k` dropout-active passes; mu is the mean of the point
    /// predictions and sigma their unbiased standard deviation (floored).
    pub fn mc_dropout_predict(
        &self,
        batch: &EncodedBatch,
        k: usize,
        seed: u64,
        policy: ContextPolicy,
    ) -> Result<Vec<GaussianPrediction>> {
        if k < 2 {
            return Err(Error::Config(format!("MC-Dropout needs at least 2 passes, got {k}")));
        }
        if self.model.config.dropout == 0.0 {
            warn!("MC-Dropout with dropout rate 0 is degenerate; sigma collapses to the floor");
        }
        let target = &self.encoders.target;
        let floor = sigma_floor(&self.model.config, target);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch.len();
        let mut samples = vec![Vec::with_capacity(k); n];
        for _ in 0..k {
            let out = self.run(batch, policy, |c, b| match c {
                Some(ctx) => self.model.forward_fixed_context(ctx, b, true, &mut rng),
                None => self.model.forward(b, true, &mut rng),
            })?;
            for (i, m) in out.mu_std.iter().enumerate() {
                samples[i].push(target.invert(*m));
            }
        }
        Ok(samples
            .iter()
            .map(|s| {
                let mean = if s.iter().all(|v| *v == s[0]) {
                    s[0]
                } else {
                    probsaint_autodiff::pairwise_sum(s) / k as f64
                };
                let sq: Vec<f64> = s.iter().map(|v| (v - mean) * (v - mean)).collect();
                let sd = (probsaint_autodiff::pairwise_sum(&sq) / (k - 1) as f64).sqrt();
                GaussianPrediction::new(mean, sd.max(floor))
            })
            .collect())
    }
}
