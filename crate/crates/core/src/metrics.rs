//! Point and probabilistic metrics, confidence buckets, calibration
//! coverage and a nearest-neighbour baseline. Sums use pairwise
//! reduction so results do not depend on thread or chunk layout.

use std::io::Write;

use probsaint_autodiff::pairwise_sum;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::EncodedBatch;
use crate::inference::GaussianPrediction;

/// Denominator floor for MAPE, in currency units.
pub const MAPE_EPS: f64 = 1e-8;

fn same_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Metric(format!("{what}: length mismatch ({a} vs {b})")));
    }
    Ok(())
}

fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Metric("no samples".into()));
    }
    Ok(pairwise_sum(values) / values.len() as f64)
}

/// Mean of `0.5 * (ln(max(s2, eps)) + (y - mu)^2 / max(s2, eps))`.
pub fn nll_metric(y: &[f64], mu: &[f64], sigma2: &[f64], eps: f64) -> Result<f64> {
    same_len("nll", y.len(), mu.len())?;
    same_len("nll", y.len(), sigma2.len())?;
    if !(eps > 0.0) {
        return Err(Error::Metric(format!("eps must be positive, got {eps}")));
    }
    let per: Vec<f64> = y
        .iter()
        .zip(mu)
        .zip(sigma2)
        .map(|((y, m), s2)| {
            let v = s2.max(eps);
            0.5 * (v.ln() + (y - m) * (y - m) / v)
        })
        .collect();
    mean(&per)
}

pub fn mae_metric(y: &[f64], mu: &[f64]) -> Result<f64> {
    same_len("mae", y.len(), mu.len())?;
    let per: Vec<f64> = y.iter().zip(mu).map(|(y, m)| (y - m).abs()).collect();
    mean(&per)
}

/// Mean of `|y - mu| / max(eps, |y|)`.
pub fn mape_metric(y: &[f64], mu: &[f64], eps: f64) -> Result<f64> {
    same_len("mape", y.len(), mu.len())?;
    let per: Vec<f64> = y.iter().zip(mu).map(|(y, m)| (y - m).abs() / eps.max(y.abs())).collect();
    mean(&per)
}

/// `1 - sigma / mu` per row; `None` marks rows excluded because `mu <= 0`.
pub fn confidence_scores(preds: &[GaussianPrediction]) -> Vec<Option<f64>> {
    preds.iter().map(|p| (p.mu > 0.0).then(|| 1.0 - p.sigma / p.mu)).collect()
}

/// Fraction of rows with `|y - mu| <= k sigma`.
pub fn coverage(y: &[f64], preds: &[GaussianPrediction], k: f64) -> Result<f64> {
    same_len("coverage", y.len(), preds.len())?;
    if !(k > 0.0) {
        return Err(Error::Metric(format!("k must be positive, got {k}")));
    }
    if y.is_empty() {
        return Err(Error::Metric("no samples".into()));
    }
    let hits = y.iter().zip(preds).filter(|(y, p)| (*y - p.mu).abs() <= k * p.sigma).count();
    Ok(hits as f64 / y.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub confidence_lo: f64,
    pub confidence_hi: f64,
    pub n: usize,
    pub mape: Option<f64>,
}

/// `n` equal-width buckets spanning the observed confidence range. The top
/// edge sits just above the maximum so every score lands in a bucket.
pub fn default_bucket_edges(confidences: &[Option<f64>], n: usize) -> Vec<f64> {
    let vals: Vec<f64> = confidences.iter().flatten().copied().filter(|c| c.is_finite()).collect();
    let (lo, hi) = match (vals.iter().copied().reduce(f64::min), vals.iter().copied().reduce(f64::max)) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => return vec![0.0, 1.0],
    };
    let n = n.max(1);
    let top = hi.next_up();
    let width = (top - lo) / n as f64;
    if !(width > 0.0) {
        return vec![lo, top];
    }
    let mut edges: Vec<f64> = (0..n).map(|i| lo + width * i as f64).collect();
    edges.push(top);
    // A range only a few ulps wide rounds several edges onto the same value.
    edges.dedup();
    edges
}

/// Per-bucket MAPE over rows grouped by confidence into `[lo, hi)`.
pub fn bucketed_report(y: &[f64], preds: &[GaussianPrediction], edges: &[f64]) -> Result<Vec<Bucket>> {
    same_len("buckets", y.len(), preds.len())?;
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Metric("bucket edges must be strictly increasing with at least two entries".into()));
    }
    let conf = confidence_scores(preds);
    let mut errs: Vec<Vec<f64>> = vec![Vec::new(); edges.len() - 1];
    for ((y, p), c) in y.iter().zip(preds).zip(&conf) {
        let Some(c) = c else { continue };
        // Index of the last edge <= c.
        let pos = edges.partition_point(|e| e <= c);
        if pos == 0 || pos == edges.len() {
            continue;
        }
        errs[pos - 1].push((y - p.mu).abs() / MAPE_EPS.max(y.abs()));
    }
    Ok(errs
        .iter()
        .enumerate()
        .map(|(i, e)| Bucket {
            confidence_lo: edges[i],
            confidence_hi: edges[i + 1],
            n: e.len(),
            mape: (!e.is_empty()).then(|| pairwise_sum(e) / e.len() as f64),
        })
        .collect())
}

/// MAPE over the `fraction` of included rows with the highest confidence.
pub fn top_confidence_mape(y: &[f64], preds: &[GaussianPrediction], fraction: f64) -> Result<f64> {
    same_len("top-confidence", y.len(), preds.len())?;
    let conf = confidence_scores(preds);
    let mut idx: Vec<usize> = (0..y.len()).filter(|&i| conf[i].is_some()).collect();
    idx.sort_by(|&a, &b| conf[b].unwrap_or(f64::NEG_INFINITY).total_cmp(&conf[a].unwrap_or(f64::NEG_INFINITY)).then(a.cmp(&b)));
    let take = ((idx.len() as f64 * fraction).round() as usize).max(1).min(idx.len());
    let ys: Vec<f64> = idx[..take].iter().map(|&i| y[i]).collect();
    let mus: Vec<f64> = idx[..take].iter().map(|&i| preds[i].mu).collect();
    mape_metric(&ys, &mus, MAPE_EPS)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    /// Mean Gaussian negative log-likelihood in currency units.
    pub nll: f64,
    pub mae: f64,
    pub mape: f64,
    pub coverage_1sigma: f64,
    pub coverage_2sigma: f64,
    /// Rows with `mu <= 0`, left out of the confidence buckets.
    pub excluded: usize,
    pub buckets: Vec<Bucket>,
}

impl MetricReport {
    /// `eps_raw` is the variance floor in squared currency units.
    pub fn compute(y: &[f64], preds: &[GaussianPrediction], eps_raw: f64, edges: Option<&[f64]>) -> Result<Self> {
        same_len("report", y.len(), preds.len())?;
        let mu: Vec<f64> = preds.iter().map(|p| p.mu).collect();
        let s2: Vec<f64> = preds.iter().map(|p| p.sigma * p.sigma).collect();
        let conf = confidence_scores(preds);
        let default_edges;
        let edges = match edges {
            Some(e) => e,
            None => {
                default_edges = default_bucket_edges(&conf, 20);
                &default_edges
            }
        };
        Ok(Self {
            n: y.len(),
            nll: nll_metric(y, &mu, &s2, eps_raw)?,
            mae: mae_metric(y, &mu)?,
            mape: mape_metric(y, &mu, MAPE_EPS)?,
            coverage_1sigma: coverage(y, preds, 1.0)?,
            coverage_2sigma: coverage(y, preds, 2.0)?,
            excluded: conf.iter().filter(|c| c.is_none()).count(),
            buckets: bucketed_report(y, preds, edges)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_buckets_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["confidence_lo", "confidence_hi", "n", "mape"])?;
        for b in &self.buckets {
            w.write_record([
                b.confidence_lo.to_string(),
                b.confidence_hi.to_string(),
                b.n.to_string(),
                b.mape.map(|m| m.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Interval-plot rows `(index, y, mu, sigma)` sorted by descending `y`.
pub fn write_intervals_csv<W: Write>(writer: W, y: &[f64], preds: &[GaussianPrediction]) -> Result<()> {
    same_len("intervals", y.len(), preds.len())?;
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| y[b].total_cmp(&y[a]).then(a.cmp(&b)));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "y", "mu", "sigma"])?;
    for i in idx {
        w.write_record([i.to_string(), y[i].to_string(), preds[i].mu.to_string(), preds[i].sigma.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// k-nearest-neighbour point predictions: squared Euclidean distance over
/// standardized numerics plus one per mismatched categorical code; the
/// prediction is the mean raw target of the `k` nearest training rows
/// (ties broken by training order).
pub fn knn_baseline(train: &EncodedBatch, test: &EncodedBatch, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > train.len() {
        return Err(Error::Metric(format!("k = {k} must lie in 1..={}", train.len())));
    }
    if train.n_cat != test.n_cat || train.n_num != test.n_num {
        return Err(Error::Metric("train and test batches have different layouts".into()));
    }
    let targets = train.targets_raw()?;
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    let mut out = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let (qc, qn) = (test.cat_row(i), test.num_row(i));
        dist.clear();
        for j in 0..train.len() {
            let mismatches = qc.iter().zip(train.cat_row(j)).filter(|(a, b)| a != b).count() as f64;
            let sq: f64 = qn.iter().zip(train.num_row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            dist.push((mismatches + sq, j));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        let mut near: Vec<f64> = dist[..k].iter().map(|&(_, j)| targets[j]).collect();
        near.sort_by(f64::total_cmp);
        out.push(pairwise_sum(&near) / k as f64);
    }
    Ok(out)
}
