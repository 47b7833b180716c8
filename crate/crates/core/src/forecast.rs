//! Duration sweeps: price one vehicle at a series of hypothetical offer
//! durations, holding every other feature fixed.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{NumericSource, RawRow};
use crate::inference::{ContextPolicy, Predictor};

pub const DEFAULT_DURATIONS: [f64; 5] = [15.0, 45.0, 75.0, 105.0, 150.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vehicle_id: Option<String>,
    pub durations: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `mu[j] / mu[0]`; empty until [`normalize_sweep`] has run.
    pub mu_normalized: Vec<f64>,
    /// `1 - sigma / mu` per point; `None` where `mu <= 0`.
    pub confidence: Vec<Option<f64>>,
}

impl SweepResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plot-ready rows `(duration, mu, sigma, mu_normalized)`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["duration", "mu", "sigma", "mu_normalized"])?;
        for j in 0..self.durations.len() {
            w.write_record([
                self.durations[j].to_string(),
                self.mu[j].to_string(),
                self.sigma[j].to_string(),
                self.mu_normalized.get(j).map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores `vehicle` once per duration. Each duration is its own
/// fixed-context query, so hypothetical variants of the car never attend
/// to one another. The result is already normalized when `mu[0] != 0`.
pub fn duration_sweep(
    predictor: &Predictor,
    vehicle: &RawRow,
    durations: &[f64],
    vehicle_id: Option<String>,
) -> Result<SweepResult> {
    if durations.is_empty() {
        return Err(Error::Forecast("at least one duration is required".into()));
    }
    if let Some(bad) = durations.iter().find(|o| !(o.is_finite() && **o > 0.0)) {
        return Err(Error::Forecast(format!("durations must be positive and finite, got {bad}")));
    }
    let column = predictor
        .schema
        .offer_duration_column()
        .ok_or_else(|| Error::Config("the schema has no offer-duration column".into()))?;
    let col = predictor
        .schema
        .position(column)
        .ok_or_else(|| Error::Config(format!("offer-duration column `{column}` is not in the schema")))?;
    let pos = predictor
        .encoders
        .numeric
        .iter()
        .position(|f| matches!(&f.source, NumericSource::Column { column: c } if *c == col))
        .ok_or_else(|| Error::Config(format!("offer-duration column `{column}` is not a numeric feature")))?;
    let stats = predictor.encoders.numeric[pos].stats;

    let (base, errors) = predictor.encode(std::slice::from_ref(vehicle))?;
    if let Some(e) = errors.into_iter().next() {
        return Err(e.into());
    }
    let mut batch = base.subset(&vec![0; durations.len()]);
    for (j, &o) in durations.iter().enumerate() {
        batch.num_row_mut(j)[pos] = stats.apply(o);
    }
    let preds = predictor.predict_encoded(&batch, ContextPolicy::FixedContext)?;
    let sweep = SweepResult {
        vehicle_id,
        durations: durations.to_vec(),
        mu: preds.iter().map(|p| p.mu).collect(),
        sigma: preds.iter().map(|p| p.sigma).collect(),
        mu_normalized: Vec::new(),
        confidence: preds.iter().map(|p| p.confidence).collect(),
    };
    match normalize_sweep(sweep.clone()) {
        Ok(normalized) => Ok(normalized),
        Err(_) => Ok(sweep),
    }
}

/// Divides every `mu` by the first one.
pub fn normalize_sweep(mut sweep: SweepResult) -> Result<SweepResult> {
    let first = *sweep.mu.first().ok_or_else(|| Error::Forecast("empty sweep".into()))?;
    if first == 0.0 || !first.is_finite() {
        return Err(Error::Forecast(format!("cannot normalize by a first mu of {first}")));
    }
    sweep.mu_normalized = sweep.mu.iter().map(|m| m / first).collect();
    Ok(sweep)
}
