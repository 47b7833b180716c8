//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use probsaint_core::features::{
    default_test_start, encode_rows, fit_encoders, time_split, EncodedBatch, FeatureSchema, FittedEncoders,
    Partitions, RawRow, SplitWindows,
};
use probsaint_core::inference::Predictor;
use probsaint_core::model::{InputLayout, ModelConfig, ProbSaintModel};
use probsaint_core::synth::{generate, MarketSpec};

pub fn row(values: &[&str]) -> RawRow {
    RawRow(values.iter().map(|v| (!v.is_empty()).then(|| v.to_string())).collect())
}

/// A small synthetic market, split and encoded with the default windows.
pub struct Market {
    pub spec: MarketSpec,
    pub schema: FeatureSchema,
    pub parts: Partitions,
    pub encoders: FittedEncoders,
    pub train: EncodedBatch,
    pub val: EncodedBatch,
    pub test: EncodedBatch,
}

impl Market {
    pub fn new(n_rows: usize, seed: u64) -> Self {
        Self::with_spec(MarketSpec { n_rows, ..MarketSpec::default() }, seed)
    }

    pub fn with_spec(spec: MarketSpec, seed: u64) -> Self {
        let schema = spec.schema();
        let rows = generate(&spec, seed).unwrap();
        let windows = SplitWindows::default();
        let start = default_test_start(&rows, &schema, &windows).unwrap();
        let parts = time_split(&rows, &schema, start, &windows).unwrap();
        let encoders = fit_encoders(&parts.train, &schema).unwrap();
        let enc = |rows: &[RawRow]| encode_rows(rows, &schema, &encoders).unwrap().batch;
        let (train, val, test) = (enc(&parts.train), enc(&parts.val), enc(&parts.test));
        Self { spec, schema, parts, encoders, train, val, test }
    }

    pub fn layout(&self) -> InputLayout {
        InputLayout::from_encoders(&self.encoders)
    }

    pub fn model(&self, config: ModelConfig, seed: u64) -> ProbSaintModel {
        ProbSaintModel::new(config, self.layout(), seed).unwrap()
    }

    /// Predictor around `model` whose context is the first `context_size`
    /// training rows.
    pub fn predictor(&self, model: ProbSaintModel) -> Predictor {
        let n = model.config.context_size.min(self.parts.train.len());
        Predictor::new(model, self.encoders.clone(), self.schema.clone(), &self.parts.train[..n]).unwrap()
    }
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig { dim: 8, depth: 1, heads: 2, dropout: 0.0, numeric_hidden: 8, context_size: 8, ..ModelConfig::default() }
}

/// Parameter names, shapes and values, ignoring gradient buffers.
pub fn weights(model: &ProbSaintModel) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    model.params.iter().map(|(_, name, t)| (name.to_string(), t.shape().to_vec(), t.data().to_vec())).collect()
}
