//! The ProbSAINT network and its baselines on a shared tape-based forward
//! pass.
//!
//! Every feature becomes a `d`-dimensional token (categorical columns via
//! embedding tables, numeric features via a small per-feature ReLU MLP). A
//! learned pooling token is prepended, the sequence passes through `L`
//! post-norm blocks of self-attention and inter-sample attention, and the
//! pooling token's final state feeds a two-layer head.
//!
//! Rows are processed in a canonical order (sorted by their encoded
//! features) and results are mapped back to the caller's order. Attention
//! reductions therefore always run in the same order for a given set of
//! rows, which makes the forward pass exactly permutation-equivariant.

use std::cmp::Ordering;

use probsaint_autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{EncodedBatch, FittedEncoders};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Attention backbone with a Gaussian head.
    ProbSaint,
    /// Attention backbone with a single point output, trained on squared error.
    SaintPoint,
    /// Fully connected backbone with a Gaussian head.
    ProbMlp,
}

impl Architecture {
    pub fn is_probabilistic(self) -> bool {
        !matches!(self, Architecture::SaintPoint)
    }
}

/// Maps the raw variance output `s` to a variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceLink {
    /// `max(s, eps)`: the gradient vanishes below the floor.
    Clamp,
    /// `softplus(s) + eps`.
    Softplus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ff_multiplier: usize,
    /// Head hidden width; defaults to `dim`.
    pub head_hidden: Option<usize>,
    /// Hidden width of each numeric feature encoder.
    pub numeric_hidden: usize,
    pub variance_link: VarianceLink,
    /// Training rows scored alongside each query at inference.
    pub context_size: usize,
    /// Variance floor in standardized target units.
    pub epsilon: f64,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::ProbSaint,
            dim: 32,
            depth: 1,
            heads: 2,
            dropout: 0.1,
            ff_multiplier: 2,
            head_hidden: None,
            numeric_hidden: 16,
            variance_link: VarianceLink::Clamp,
            context_size: 32,
            epsilon: 1e-6,
            mlp_hidden: 64,
            mlp_layers: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if self.ff_multiplier == 0 || self.numeric_hidden == 0 || self.head_hidden == Some(0) {
            return bad("layer widths must be positive".into());
        }
        if self.architecture == Architecture::ProbMlp && (self.mlp_hidden == 0 || self.mlp_layers == 0) {
            return bad("the MLP needs at least one hidden layer of positive width".into());
        }
        if self.context_size == 0 {
            return bad("context_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_hidden_dim(&self) -> usize {
        self.head_hidden.unwrap_or(self.dim)
    }

    /// Inter-sample attention couples rows only for the attention backbones.
    pub fn couples_rows(&self) -> bool {
        self.architecture != Architecture::ProbMlp
    }

    /// Converts a raw variance output into a variance in standardized units.
    pub fn link(&self, s_raw: f64) -> f64 {
        match self.variance_link {
            VarianceLink::Clamp => s_raw.max(self.epsilon),
            VarianceLink::Softplus => softplus(s_raw) + self.epsilon,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Input columns the network was built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputLayout {
    pub categorical: Vec<String>,
    pub vocab_sizes: Vec<usize>,
    pub numeric: Vec<String>,
}

impl InputLayout {
    pub fn from_encoders(enc: &FittedEncoders) -> Self {
        Self {
            categorical: enc.categorical_names().into_iter().map(String::from).collect(),
            vocab_sizes: enc.vocab_sizes(),
            numeric: enc.numeric_names().into_iter().map(String::from).collect(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.categorical.len() + self.numeric.len()
    }

    /// Tokens per row, counting the pooling token.
    pub fn seq_len(&self) -> usize {
        self.n_features() + 1
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    qkv: Linear,
    out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    self_attn: Attention,
    norm1: Norm,
    ff1: FeedForward,
    norm2: Norm,
    inter_attn: Attention,
    norm3: Norm,
    ff2: FeedForward,
    norm4: Norm,
}

#[derive(Clone, Debug)]
enum Backbone {
    Saint { pool: ParamId, num_w1: ParamId, num_b1: ParamId, num_w2: ParamId, num_b2: ParamId, blocks: Vec<Block> },
    Mlp { layers: Vec<Linear> },
}

/// All learned parameters plus the structure needed to run them.
#[derive(Clone, Debug)]
pub struct ProbSaintModel {
    pub config: ModelConfig,
    pub layout: InputLayout,
    pub params: ParamStore,
    embeddings: Vec<ParamId>,
    backbone: Backbone,
    head: [Linear; 2],
}

/// Raw network outputs in standardized target space, in input row order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawOutputs {
    pub mu_std: Vec<f64>,
    /// Pre-link variance; absent for the point architecture.
    pub s_raw: Option<Vec<f64>>,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Ok(self.store.insert(name, Tensor::new(shape.to_vec(), data)?)?)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.store.insert(name, Tensor::full(shape, value)?)?)
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        Ok(self.store.insert(name, Tensor::new(shape.to_vec(), data)?)?)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.uniform(&format!("{name}.weight"), &[fan_in, fan_out], fan_in)?,
            b: self.constant(&format!("{name}.bias"), &[fan_out], 0.0)?,
        })
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: self.constant(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    fn attention(&mut self, name: &str, dim: usize) -> Result<Attention> {
        Ok(Attention { qkv: self.linear(&format!("{name}.qkv"), dim, 3 * dim)?, out: self.linear(&format!("{name}.out"), dim, dim)? })
    }

    fn feed_forward(&mut self, name: &str, dim: usize, mult: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            up: self.linear(&format!("{name}.up"), dim, dim * mult)?,
            down: self.linear(&format!("{name}.down"), dim * mult, dim)?,
        })
    }
}

/// Output-layer bias for the variance unit: one standardized unit, well
/// clear of the clamp floor.
const INITIAL_VARIANCE: f64 = 1.0;

impl ProbSaintModel {
    pub fn new(config: ModelConfig, layout: InputLayout, seed: u64) -> Result<Self> {
        config.validate()?;
        if layout.n_features() == 0 {
            return Err(Error::Config("the model needs at least one input feature".into()));
        }
        if layout.vocab_sizes.len() != layout.categorical.len() || layout.vocab_sizes.contains(&0) {
            return Err(Error::Config("every categorical column needs a non-empty vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: ParamStore::new(), rng: &mut rng };
        let d = config.dim;
        let mut embeddings = Vec::new();
        for (name, &vocab) in layout.categorical.iter().zip(&layout.vocab_sizes) {
            embeddings.push(b.normal(&format!("embed.{name}"), &[vocab, d], 0.02)?);
        }
        let (backbone, head_in) = match config.architecture {
            Architecture::ProbSaint | Architecture::SaintPoint => {
                let n = layout.numeric.len().max(1);
                let h = config.numeric_hidden;
                let num_w1 = b.uniform("numeric.w1", &[n, 1, h], 1)?;
                let num_b1 = b.constant("numeric.b1", &[n, 1, h], 0.0)?;
                let num_w2 = b.uniform("numeric.w2", &[n, h, d], h)?;
                let num_b2 = b.constant("numeric.b2", &[n, 1, d], 0.0)?;
                let pool = b.normal("pool_token", &[1, 1, d], 0.02)?;
                let row_dim = layout.seq_len() * d;
                let mut blocks = Vec::with_capacity(config.depth);
                for l in 0..config.depth {
                    let p = format!("block{l}");
                    blocks.push(Block {
                        self_attn: b.attention(&format!("{p}.self_attn"), d)?,
                        norm1: b.norm(&format!("{p}.norm1"), d)?,
                        ff1: b.feed_forward(&format!("{p}.ff1"), d, config.ff_multiplier)?,
                        norm2: b.norm(&format!("{p}.norm2"), d)?,
                        inter_attn: b.attention(&format!("{p}.inter_attn"), row_dim)?,
                        norm3: b.norm(&format!("{p}.norm3"), d)?,
                        ff2: b.feed_forward(&format!("{p}.ff2"), d, config.ff_multiplier)?,
                        norm4: b.norm(&format!("{p}.norm4"), d)?,
                    });
                }
                (Backbone::Saint { pool, num_w1, num_b1, num_w2, num_b2, blocks }, d)
            }
            Architecture::ProbMlp => {
                let input = layout.categorical.len() * d + layout.numeric.len();
                let mut layers = Vec::new();
                let mut width = input;
                for l in 0..config.mlp_layers {
                    layers.push(b.linear(&format!("mlp.{l}"), width, config.mlp_hidden)?);
                    width = config.mlp_hidden;
                }
                (Backbone::Mlp { layers }, width)
            }
        };
        let hidden = config.head_hidden_dim();
        let outputs = if config.architecture.is_probabilistic() { 2 } else { 1 };
        let head = [b.linear("head.hidden", head_in, hidden)?, b.linear("head.out", hidden, outputs)?];
        let mut params = b.store;
        if outputs == 2 {
            params.get_mut(head[1].b).data_mut()[1] = INITIAL_VARIANCE;
        }
        Ok(Self { config, layout, params, embeddings, backbone, head })
    }

    /// Checks that a batch matches this model's input layout.
    fn check_batch(&self, batch: &EncodedBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Config("cannot run the model on an empty batch".into()));
        }
        if batch.n_cat != self.layout.categorical.len() || batch.n_num != self.layout.numeric.len() {
            return Err(Error::Config(format!(
                "batch has {} categorical and {} numeric features, model expects {} and {}",
                batch.n_cat,
                batch.n_num,
                self.layout.categorical.len(),
                self.layout.numeric.len()
            )));
        }
        Ok(())
    }

    /// Records the forward pass for `batch` (already in the order the
    /// network should see it). Inter-sample attention runs separately
    /// within each run of `group` consecutive rows. Returns `[m, outputs]`.
    pub fn record_forward(
        &self,
        tape: &mut Tape,
        batch: &EncodedBatch,
        group: usize,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let m = batch.len();
        if group == 0 || m % group != 0 {
            return Err(Error::Config(format!("{m} rows cannot be split into groups of {group}")));
        }
        let p = self.config.dropout;
        let store = &self.params;
        let pooled = match &self.backbone {
            Backbone::Mlp { layers } => {
                let mut parts = self.categorical_tokens(tape, batch)?;
                if batch.n_num > 0 {
                    parts.push(tape.constant(&[m, batch.n_num], batch.num_values.clone())?);
                }
                let mut x = tape.concat(&parts, 1)?;
                for l in layers {
                    x = linear(tape, store, *l, x)?;
                    x = tape.relu(x);
                    x = tape.dropout(x, p, training, rng)?;
                }
                x
            }
            Backbone::Saint { blocks, .. } => {
                let mut z = self.token_sequence(tape, batch)?;
                let dims = [m, self.layout.seq_len(), self.config.dim];
                for (l, blk) in blocks.iter().enumerate() {
                    z = row_stage(tape, store, blk, z, self.config.heads, p, training, rng)?;
                    z = inter_stage(tape, store, blk, z, dims, group, self.config.heads, p, training, rng)?;
                    check_finite(tape, z, l)?;
                }
                tape.select(z, 1, 0)?
            }
        };
        self.head_forward(tape, pooled, training, rng)
    }

    /// One `[m, d]` embedding per categorical column.
    fn categorical_tokens(&self, tape: &mut Tape, batch: &EncodedBatch) -> Result<Vec<Var>> {
        let m = batch.len();
        let mut tokens = Vec::with_capacity(self.embeddings.len());
        for (c, &table) in self.embeddings.iter().enumerate() {
            let idx: Vec<usize> = (0..m).map(|i| batch.cat_row(i)[c]).collect();
            let t = tape.param(&self.params, table);
            tokens.push(tape.embedding(t, &idx, &self.layout.categorical[c])?);
        }
        Ok(tokens)
    }

    /// The `[m, S, d]` token sequence: pooling token, categorical tokens,
    /// numeric tokens.
    fn token_sequence(&self, tape: &mut Tape, batch: &EncodedBatch) -> Result<Var> {
        let Backbone::Saint { pool, num_w1, num_b1, num_w2, num_b2, .. } = &self.backbone else {
            unreachable!("token sequences exist only for the attention backbone")
        };
        let (m, d, store) = (batch.len(), self.config.dim, &self.params);
        let tokens = self.categorical_tokens(tape, batch)?;
        let mut seq: Vec<Var> = Vec::with_capacity(3);
        let pool = tape.param(store, *pool);
        seq.push(tape.expand(pool, &[m, 1, d])?);
        if !tokens.is_empty() {
            let cats = tape.concat(&tokens, 1)?;
            seq.push(tape.reshape(cats, &[m, tokens.len(), d])?);
        }
        let n_num = batch.n_num;
        if n_num > 0 {
            // Feature-major copy so each feature's column is one [m, 1] slice.
            let mut cols = vec![0.0; n_num * m];
            for i in 0..m {
                for (j, v) in batch.num_row(i).iter().enumerate() {
                    cols[j * m + i] = *v;
                }
            }
            let x = tape.constant(&[n_num, m, 1], cols)?;
            let (w1, b1) = (tape.param(store, *num_w1), tape.param(store, *num_b1));
            let (w2, b2) = (tape.param(store, *num_w2), tape.param(store, *num_b2));
            let h = tape.matmul(x, w1)?;
            let h = tape.add(h, b1)?;
            let h = tape.relu(h);
            let e = tape.matmul(h, w2)?;
            let e = tape.add(e, b2)?;
            seq.push(tape.permute(e, &[1, 0, 2])?);
        }
        Ok(tape.concat(&seq, 1)?)
    }

    fn head_forward(&self, tape: &mut Tape, pooled: Var, training: bool, rng: &mut dyn RngCore) -> Result<Var> {
        let store = &self.params;
        let h = linear(tape, store, self.head[0], pooled)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.config.dropout, training, rng)?;
        let out = linear(tape, store, self.head[1], h)?;
        check_finite(tape, out, self.config.depth).map_err(|_| Error::Model {
            block: self.config.depth,
            message: "non-finite head output".into(),
        })?;
        Ok(out)
    }

    /// Mean per-row training loss in standardized units, recorded on
    /// `tape`: Gaussian negative log-likelihood for the probabilistic heads, squared error otherwise.
    /// Rows are put in canonical order first.
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        batch: &EncodedBatch,
        training: bool,
        objective: Objective,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let order = canonical_order(batch);
        let sorted = batch.subset(&order);
        let y = sorted.targets()?;
        let m = y.len();
        let out = self.record_forward(tape, &sorted, m, training, rng)?;
        let target = tape.constant(&[m], y)?;
        let mu = tape.select(out, 1, 0)?;
        let resid = tape.sub(target, mu)?;
        let sq = tape.square(resid);
        match objective {
            Objective::Mse => Ok(tape.mean(sq)),
            Objective::Nll => {
                if !self.config.architecture.is_probabilistic() {
                    return Err(Error::Config("the point architecture cannot be trained on NLL".into()));
                }
                let s = tape.select(out, 1, 1)?;
                let var = match self.config.variance_link {
                    VarianceLink::Clamp => tape.clamp_min(s, self.config.epsilon),
                    VarianceLink::Softplus => {
                        let sp = tape.softplus(s);
                        tape.add_scalar(sp, self.config.epsilon)
                    }
                };
                let log_var = tape.log(var);
                let ratio = tape.div(sq, var)?;
                let per_row = tape.add(log_var, ratio)?;
                let half = tape.scale(per_row, 0.5);
                Ok(tape.mean(half))
            }
        }
    }

    /// Runs the network on `batch` and returns outputs in batch order.
    pub fn forward(&self, batch: &EncodedBatch, training: bool, rng: &mut dyn RngCore) -> Result<RawOutputs> {
        self.forward_groups(batch, batch.len(), training, rng)
    }

    /// Like [`forward`](Self::forward), but every run of `group`
    /// consecutive rows is an independent batch as far as inter-sample
    /// attention is concerned.
    pub fn forward_groups(
        &self,
        batch: &EncodedBatch,
        group: usize,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<RawOutputs> {
        if batch.is_empty() {
            return Err(Error::Config("cannot run the model on an empty batch".into()));
        }
        if group == 0 || batch.len() % group != 0 {
            return Err(Error::Config(format!("{} rows cannot be split into groups of {group}", batch.len())));
        }
        let mut order = Vec::with_capacity(batch.len());
        for start in (0..batch.len()).step_by(group) {
            let idx: Vec<usize> = (start..start + group).collect();
            order.extend(canonical_order(&batch.subset(&idx)).into_iter().map(|i| start + i));
        }
        let sorted = batch.subset(&order);
        let mut tape = Tape::new();
        let out = self.record_forward(&mut tape, &sorted, group, training, rng)?;
        let data = tape.data(out);
        let k = tape.shape(out)[1];
        let m = batch.len();
        let mut mu = vec![0.0; m];
        let mut s = vec![0.0; if k == 2 { m } else { 0 }];
        for (pos, &row) in order.iter().enumerate() {
            mu[row] = data[pos * k];
            if k == 2 {
                s[row] = data[pos * k + 1];
            }
        }
        Ok(RawOutputs { mu_std: mu, s_raw: (k == 2).then_some(s) })
    }

    /// Deterministic evaluation-mode forward.
    pub fn forward_eval(&self, batch: &EncodedBatch) -> Result<RawOutputs> {
        self.forward_eval_groups(batch, batch.len())
    }

    pub fn forward_eval_groups(&self, batch: &EncodedBatch, group: usize) -> Result<RawOutputs> {
        // Dropout is inactive in evaluation mode, so the generator is never drawn from.
        self.forward_groups(batch, group, false, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// Scores every query row as its own episode `[context, query]` and
    /// returns the query rows' outputs in query order.
    ///
    /// With a single block the context rows are encoded once and only the
    /// query row is carried past inter-sample attention; this gives the
    /// same numbers as running each episode in full, at a fraction of the
    /// cost. Deeper networks run the episodes in full.
    pub fn forward_fixed_context(
        &self,
        context: &EncodedBatch,
        queries: &EncodedBatch,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<RawOutputs> {
        self.check_batch(context)?;
        self.check_batch(queries)?;
        match &self.backbone {
            Backbone::Mlp { .. } => self.forward(queries, training, rng),
            Backbone::Saint { blocks, .. } if blocks.len() == 1 => {
                let mut tape = Tape::new();
                let out = self.record_fixed_context(&mut tape, &blocks[0], context, queries, training, rng)?;
                let data = tape.data(out);
                let k = tape.shape(out)[1];
                Ok(RawOutputs {
                    mu_std: data.iter().step_by(k).copied().collect(),
                    s_raw: (k == 2).then(|| data.iter().skip(1).step_by(k).copied().collect()),
                })
            }
            Backbone::Saint { .. } => {
                let c = context.len();
                let parts: Vec<EncodedBatch> = (0..queries.len()).map(|i| queries.subset(&[i])).collect();
                let mut episodes = Vec::with_capacity(2 * parts.len());
                for q in &parts {
                    episodes.push(context);
                    episodes.push(q);
                }
                let out = self.forward_groups(&EncodedBatch::concat(&episodes), c + 1, training, rng)?;
                let pick = |v: &[f64]| (0..parts.len()).map(|k| v[k * (c + 1) + c]).collect();
                Ok(RawOutputs { mu_std: pick(&out.mu_std), s_raw: out.s_raw.as_deref().map(pick) })
            }
        }
    }

    fn record_fixed_context(
        &self,
        tape: &mut Tape,
        blk: &Block,
        context: &EncodedBatch,
        queries: &EncodedBatch,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let (c, nq) = (context.len(), queries.len());
        let (s, d, heads) = (self.layout.seq_len(), self.config.dim, self.config.heads);
        let (e, p, store) = (s * d, self.config.dropout, &self.params);
        let dh = e / heads;

        let zc = self.token_sequence(tape, context)?;
        let zc = row_stage(tape, store, blk, zc, heads, p, training, rng)?;
        let zq = self.token_sequence(tape, queries)?;
        let zq = row_stage(tape, store, blk, zq, heads, p, training, rng)?;

        // Projections for every context and query row; table row `c + j`
        // belongs to query `j`.
        let flat_c = tape.reshape(zc, &[c, e])?;
        let flat_q = tape.reshape(zq, &[nq, e])?;
        let table = tape.concat(&[flat_c, flat_q], 0)?;
        let qkv = linear(tape, store, blk.inter_attn.qkv, table)?;

        // Each episode's rows in the canonical order the full pass would use.
        let mut gather = Vec::with_capacity(nq * (c + 1));
        for j in 0..nq {
            let episode = EncodedBatch::concat(&[context, &queries.subset(&[j])]);
            gather.extend(canonical_order(&episode).into_iter().map(|i| if i < c { i } else { c + j }));
        }
        let kv = tape.embedding(qkv, &gather, "episode")?;
        let kv = tape.reshape(kv, &[nq, c + 1, 3, heads, dh])?;
        let kv = tape.permute(kv, &[2, 0, 3, 1, 4])?;
        let k = tape.select(kv, 0, 1)?;
        let v = tape.select(kv, 0, 2)?;
        let own: Vec<usize> = (c..c + nq).collect();
        let q = tape.embedding(qkv, &own, "query")?;
        let q = tape.reshape(q, &[nq, 1, 3, heads, dh])?;
        let q = tape.permute(q, &[2, 0, 3, 1, 4])?;
        let q = tape.select(q, 0, 0)?;

        let kt = tape.permute(k, &[0, 1, 3, 2])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = tape.softmax(scores, 3)?;
        let mixed = tape.matmul(weights, v)?;
        let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = tape.reshape(mixed, &[nq, 1, e])?;
        let a = linear(tape, store, blk.inter_attn.out, mixed)?;
        let a = tape.reshape(a, &[nq, s, d])?;
        let z = finish_inter_stage(tape, store, blk, zq, a, p, training, rng)?;
        check_finite(tape, z, 0)?;
        let pooled = tape.select(z, 1, 0)?;
        self.head_forward(tape, pooled, training, rng)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Names of the inter-sample attention parameters.
    pub fn inter_sample_params(&self) -> Vec<String> {
        let mut names = Vec::new();
        if let Backbone::Saint { blocks, .. } = &self.backbone {
            for blk in blocks {
                for l in [blk.inter_attn.qkv, blk.inter_attn.out] {
                    names.push(self.params.name(l.w).to_string());
                    names.push(self.params.name(l.b).to_string());
                }
            }
        }
        names
    }

    /// Zeroes every inter-sample attention weight and bias, leaving only
    /// the residual path so rows no longer interact.
    pub fn zero_inter_sample(&mut self) {
        for name in self.inter_sample_params() {
            if let Some(t) = self.params.by_name_mut(&name) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Zeroes the input weights of one numeric feature's encoder so its
    /// token no longer depends on the feature value.
    pub fn zero_numeric_encoder(&mut self, feature: &str) -> Result<()> {
        let j = self
            .layout
            .numeric
            .iter()
            .position(|n| n == feature)
            .ok_or_else(|| Error::Config(format!("no numeric feature `{feature}`")))?;
        match &self.backbone {
            Backbone::Saint { num_w1, .. } => {
                let h = self.config.numeric_hidden;
                self.params.get_mut(*num_w1).data_mut()[j * h..(j + 1) * h].fill(0.0);
            }
            Backbone::Mlp { layers } => {
                let w = self.params.get_mut(layers[0].w);
                let cols = w.shape()[1];
                let row = self.layout.categorical.len() * self.config.dim + j;
                w.data_mut()[row * cols..(row + 1) * cols].fill(0.0);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Nll,
    Mse,
}

/// Sort order putting rows in a canonical sequence: lexicographic on the
/// categorical codes, then on the numeric values' total order. Equal rows
/// keep their relative order.
pub fn canonical_order(batch: &EncodedBatch) -> Vec<usize> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| {
        batch.cat_row(a).cmp(batch.cat_row(b)).then_with(|| {
            batch
                .num_row(a)
                .iter()
                .zip(batch.num_row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    order
}

/// `x @ W + b` over the last axis of `x`.
fn linear(tape: &mut Tape, store: &ParamStore, l: Linear, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let k = *shape.last().expect("non-scalar input");
    let rows = shape.iter().product::<usize>() / k;
    let flat = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, k])? };
    let w = tape.param(store, l.w);
    let b = tape.param(store, l.b);
    let y = tape.matmul(flat, w)?;
    let y = tape.add(y, b)?;
    let n = tape.shape(y)[1];
    if shape.len() == 2 {
        return Ok(y);
    }
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-empty") = n;
    Ok(tape.reshape(y, &out_shape)?)
}

/// Multi-head scaled dot-product attention over axis 1 of `x: [B, T, E]`.
fn attention(tape: &mut Tape, store: &ParamStore, a: Attention, x: Var, heads: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (bsz, t, e) = (shape[0], shape[1], shape[2]);
    let dh = e / heads;
    let qkv = linear(tape, store, a.qkv, x)?;
    let qkv = tape.reshape(qkv, &[bsz, t, 3, heads, dh])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let q = tape.select(qkv, 0, 0)?;
    let k = tape.select(qkv, 0, 1)?;
    let v = tape.select(qkv, 0, 2)?;
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = tape.softmax(scores, 3)?;
    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[bsz, t, e])?;
    linear(tape, store, a.out, ctx)
}

fn feed_forward(
    tape: &mut Tape,
    store: &ParamStore,
    f: FeedForward,
    x: Var,
    p: f64,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let h = linear(tape, store, f.up, x)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, p, training, rng)?;
    linear(tape, store, f.down, h)
}

fn residual_norm(
    tape: &mut Tape,
    store: &ParamStore,
    n: Norm,
    x: Var,
    update: Var,
    p: f64,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let update = tape.dropout(update, p, training, rng)?;
    let sum = tape.add(x, update)?;
    let g = tape.param(store, n.gamma);
    let b = tape.param(store, n.beta);
    Ok(tape.layer_norm(sum, g, b, LAYER_NORM_EPS)?)
}

fn check_finite(tape: &Tape, x: Var, block: usize) -> Result<()> {
    if tape.data(x).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Model { block, message: "non-finite activations".into() })
    }
}

/// First half of a post-norm block: self-attention over each row's tokens
/// and a feed-forward layer, each wrapped in residual + layer norm. Rows do
/// not interact here.
#[allow(clippy::too_many_arguments)]
fn row_stage(
    tape: &mut Tape,
    store: &ParamStore,
    blk: &Block,
    z: Var,
    heads: usize,
    p: f64,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let a = attention(tape, store, blk.self_attn, z, heads)?;
    let z = residual_norm(tape, store, blk.norm1, z, a, p, training, rng)?;
    let f = feed_forward(tape, store, blk.ff1, z, p, training, rng)?;
    residual_norm(tape, store, blk.norm2, z, f, p, training, rng)
}

/// Second half: inter-sample attention across the rows of each group,
/// then a feed-forward layer.
#[allow(clippy::too_many_arguments)]
fn inter_stage(
    tape: &mut Tape,
    store: &ParamStore,
    blk: &Block,
    z: Var,
    [m, s, d]: [usize; 3],
    group: usize,
    heads: usize,
    p: f64,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let rows = tape.reshape(z, &[m / group, group, s * d])?;
    let a = attention(tape, store, blk.inter_attn, rows, heads)?;
    let a = tape.reshape(a, &[m, s, d])?;
    finish_inter_stage(tape, store, blk, z, a, p, training, rng)
}

#[allow(clippy::too_many_arguments)]
fn finish_inter_stage(
    tape: &mut Tape,
    store: &ParamStore,
    blk: &Block,
    z: Var,
    a: Var,
    p: f64,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let z = residual_norm(tape, store, blk.norm3, z, a, p, training, rng)?;
    let f = feed_forward(tape, store, blk.ff2, z, p, training, rng)?;
    residual_norm(tape, store, blk.norm4, z, f, p, training, rng)
}

/// Runs inter-sample attention alone on `z: [m, S, d]` with freshly drawn
/// weights; exposed for shape and equivariance checks.
pub fn inter_sample_attention(z: &Tensor, heads: usize, seed: u64) -> Result<Tensor> {
    let shape = z.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Config(format!("expected [m, S, d], got {shape:?}")));
    }
    let (m, s, d) = (shape[0], shape[1], shape[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder { store: ParamStore::new(), rng: &mut rng };
    let a = b.attention("inter", s * d)?;
    let store = b.store;
    let mut tape = Tape::new();
    let x = tape.leaf(z);
    let rows = tape.reshape(x, &[1, m, s * d])?;
    let out = attention(&mut tape, &store, a, rows, heads)?;
    let out = tape.reshape(out, &[m, s, d])?;
    Ok(tape.value(out))
}
