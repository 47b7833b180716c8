use std::io::Write;
use std::time::Instant;

use log::{debug, info, warn};
use probsaint_autodiff::{Adam, Tape, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{EncodedBatch, FittedEncoders};
use crate::inference::{predict_batch_as_is, predict_fixed_context, select_context, GaussianPrediction};
use crate::metrics::nll_metric;
use crate::model::{InputLayout, ModelConfig, Objective, ProbSaintModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
    pub objective: Objective,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 100,
            patience: 5,
            lr: 1e-3,
            seed: 0,
            objective: Objective::Nll,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.batch_size < 2 && self.model.couples_rows() {
            return Err(Error::Config("inter-sample attention needs batch_size >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.objective == Objective::Nll && !self.model.architecture.is_probabilistic() {
            return Err(Error::Config("the point architecture trains on the mse objective".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's mini-batches, standardized units.
    pub train_loss: f64,
    /// Validation NLL in currency units (squared error for the mse objective).
    pub val_metric: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub objective: Objective,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
}

impl TrainingLog {
    /// Equality ignoring wall-clock timings.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        let strip = |l: &Self| {
            let mut l = l.clone();
            l.epochs.iter_mut().for_each(|e| e.wall_ms = 0);
            l
        };
        strip(self) == strip(other)
    }

    /// Name of the validation metric: `nll` or `mse`.
    pub fn objective_label(&self) -> &'static str {
        match self.objective {
            Objective::Nll => "nll",
            Objective::Mse => "mse",
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let metric = format!("val_{}", self.objective_label());
        w.write_record(["epoch", "train_loss", metric.as_str(), "wall_ms"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.val_metric.to_string(), e.wall_ms.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ProbSaintModel,
    pub log: TrainingLog,
    /// Positions within the training batch of the rows used as fixed
    /// context; empty for architectures that score rows independently.
    pub context_indices: Vec<usize>,
}

/// Validation score used for model selection: raw-unit NLL, or raw-unit
/// mean squared error for the mse objective. With a context batch each row
/// is scored as its own `[context, row]` episode; otherwise rows are scored
/// batch-as-is in chunks of `batch_size`.
pub fn validation_metric(
    model: &ProbSaintModel,
    encoders: &FittedEncoders,
    val: &EncodedBatch,
    context: Option<&EncodedBatch>,
    batch_size: usize,
    objective: Objective,
) -> Result<f64> {
    let preds = match context {
        Some(ctx) => predict_fixed_context(model, &encoders.target, ctx, val)?,
        None => predict_batch_as_is(model, &encoders.target, val, batch_size)?,
    };
    score(&preds, val, objective, model.config.epsilon * encoders.target.std * encoders.target.std)
}

fn score(preds: &[GaussianPrediction], batch: &EncodedBatch, objective: Objective, eps_raw: f64) -> Result<f64> {
    let y = batch.targets_raw()?;
    let mu: Vec<f64> = preds.iter().map(|p| p.mu).collect();
    match objective {
        Objective::Nll => {
            let s2: Vec<f64> = preds.iter().map(|p| p.sigma * p.sigma).collect();
            nll_metric(&y, &mu, &s2, eps_raw)
        }
        Objective::Mse => {
            let sq: Vec<f64> = y.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).collect();
            Ok(probsaint_autodiff::pairwise_sum(&sq) / sq.len() as f64)
        }
    }
}

/// Mini-batch training with validation-based early stopping. The returned
/// model carries the parameters of the best validation epoch.
pub fn train(
    train: &EncodedBatch,
    val: &EncodedBatch,
    encoders: &FittedEncoders,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let layout = InputLayout::from_encoders(encoders);
    let mut model = ProbSaintModel::new(cfg.model.clone(), layout, cfg.seed)?;
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let n = train.len();
    // Incomplete trailing batches are dropped, unless the whole set is smaller than one batch.
    let bs = cfg.batch_size.min(n);
    let steps_per_epoch = n / bs;

    let context_indices = if cfg.model.couples_rows() {
        select_context(n, cfg.model.context_size, cfg.seed ^ 0xc0_47e7)
    } else {
        Vec::new()
    };
    let context = (!context_indices.is_empty()).then(|| train.subset(&context_indices));
    let mut best_val = validation_metric(&model, encoders, val, context.as_ref(), cfg.batch_size, cfg.objective)?;
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..n).collect();
    let mut global_step = 0;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(steps_per_epoch);
        for step in 0..steps_per_epoch {
            global_step += 1;
            let batch = train.subset(&order[step * bs..(step + 1) * bs]);
            let mut tape = Tape::new();
            let loss = model.record_loss(&mut tape, &batch, true, cfg.objective, &mut rng)?;
            let value = tape.data(loss)[0];
            if !value.is_finite() {
                return Err(Error::Training { epoch, step, message: format!("non-finite loss {value}") });
            }
            tape.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate(&tape);
            adam.step(&mut model.params).map_err(|e| match e {
                TensorError::NonFiniteGradient { param, .. } => {
                    Error::Training { epoch, step, message: format!("non-finite gradient for `{param}` (update {global_step})") }
                }
                other => other.into(),
            })?;
            losses.push(value);
        }
        let train_loss = probsaint_autodiff::pairwise_sum(&losses) / losses.len().max(1) as f64;
        let val_metric = validation_metric(&model, encoders, val, context.as_ref(), cfg.batch_size, cfg.objective)?;
        let wall_ms = start.elapsed().as_millis() as u64;
        info!("epoch {epoch}: train_loss={train_loss:.5} val={val_metric:.5} ({wall_ms} ms)");
        epochs.push(EpochRecord { epoch, train_loss, val_metric, wall_ms });
        if val_metric < best_val {
            best_val = val_metric;
            best_params = model.params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                debug!("no improvement for {since_best} epochs, stopping");
                stopped_early = true;
                break;
            }
        }
    }
    model.params = best_params;
    Ok(TrainOutcome {
        model,
        log: TrainingLog { objective: cfg.objective, epochs, best_epoch, best_val, stopped_early },
        context_indices,
    })
}

/// Hyperparameter grid searched by [`random_search`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub dropouts: Vec<f64>,
    /// Learning rates are drawn log-uniformly from this closed range.
    pub lr_range: (f64, f64),
    pub trials: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            dims: vec![32, 64, 128, 256],
            depths: vec![1, 2, 3, 6, 12],
            heads: vec![2, 4, 8],
            dropouts: (0..=8).map(|i| f64::from(i) / 10.0).collect(),
            lr_range: (5e-4, 1e-3),
            trials: 10,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.depths.is_empty() || self.heads.is_empty() || self.dropouts.is_empty() {
            return Err(Error::Config("every search dimension needs at least one value".into()));
        }
        let (lo, hi) = self.lr_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("invalid learning-rate range ({lo}, {hi})")));
        }
        if self.dims.iter().any(|d| self.heads.iter().any(|h| d % h != 0)) {
            return Err(Error::Config("every dim must be divisible by every head count".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub dropout: f64,
    pub lr: f64,
}

/// Draws `trials` configurations uniformly from the space.
pub fn sample_trials(space: &SearchSpace, trials: usize, seed: u64) -> Result<Vec<TrialConfig>> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = space.lr_range;
    Ok((0..trials)
        .map(|_| {
            let pick = |rng: &mut ChaCha8Rng, n: usize| rng.random_range(0..n);
            let dim = space.dims[pick(&mut rng, space.dims.len())];
            let depth = space.depths[pick(&mut rng, space.depths.len())];
            let heads = space.heads[pick(&mut rng, space.heads.len())];
            let dropout = space.dropouts[pick(&mut rng, space.dropouts.len())];
            let lr = if hi > lo { (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp() } else { lo };
            TrialConfig { dim, depth, heads, dropout, lr }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub config: TrialConfig,
    pub val_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best: TrainOutcome,
    pub best_trial: usize,
    /// Full training configuration of the best trial.
    pub best_config: TrainConfig,
    pub trials: Vec<TrialRecord>,
}

/// Trains one model per sampled configuration (trial `i` uses seed
/// `base.seed + i`) and keeps the one with the best validation score.
pub fn random_search(
    space: &SearchSpace,
    base: &TrainConfig,
    train_set: &EncodedBatch,
    val: &EncodedBatch,
    encoders: &FittedEncoders,
    trials: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    if trials == 0 {
        return Err(Error::Config("a search needs at least one trial".into()));
    }
    let configs = sample_trials(space, trials, seed)?;
    let mut records = Vec::with_capacity(trials);
    let mut best: Option<(usize, TrainOutcome, TrainConfig)> = None;
    for (i, tc) in configs.into_iter().enumerate() {
        let mut cfg = base.clone();
        cfg.seed = base.seed.wrapping_add(i as u64);
        cfg.lr = tc.lr;
        cfg.model.dim = tc.dim;
        cfg.model.depth = tc.depth;
        cfg.model.heads = tc.heads;
        cfg.model.dropout = tc.dropout;
        info!("trial {i}: {tc:?}");
        match train(train_set, val, encoders, &cfg) {
            Ok(out) => {
                records.push(TrialRecord {
                    trial: i,
                    config: tc,
                    val_metric: Some(out.log.best_val),
                    best_epoch: Some(out.log.best_epoch),
                    epochs_run: out.log.epochs.len(),
                    error: None,
                });
                if best.as_ref().is_none_or(|(_, b, _)| out.log.best_val < b.log.best_val) {
                    best = Some((i, out, cfg));
                }
            }
            Err(e @ (Error::Training { .. } | Error::Model { .. })) => {
                warn!("trial {i} diverged: {e}");
                records.push(TrialRecord {
                    trial: i,
                    config: tc,
                    val_metric: None,
                    best_epoch: None,
                    epochs_run: 0,
                    error: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((best_trial, best, best_config)) => Ok(SearchOutcome { best, best_trial, best_config, trials: records }),
        None => Err(Error::AllTrialsDiverged(records)),
    }
}
