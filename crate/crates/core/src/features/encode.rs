use std::collections::HashMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::dates::{derive_date_features, parse_date, DATE_FEATURES};
use super::schema::{ColumnKind, FeatureSchema};
use super::table::RawRow;
use crate::error::{Error, Result, RowError};

/// Category-to-index map for one column. Index 0 is shared by unknown and
/// missing values; observed categories start at 1 in order of first
/// appearance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    pub column: String,
    categories: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    column: String,
    categories: Vec<String>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        let index = r.categories.iter().enumerate().map(|(i, c)| (c.clone(), i + 1)).collect();
        Self { column: r.column, categories: r.categories, index }
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        Self { column: v.column, categories: v.categories }
    }
}

impl Vocabulary {
    pub const UNKNOWN: usize = 0;

    fn new(column: &str) -> Self {
        VocabularyRepr { column: column.to_string(), categories: Vec::new() }.into()
    }

    fn observe(&mut self, value: &str) {
        if !self.index.contains_key(value) {
            self.categories.push(value.to_string());
            self.index.insert(value.to_string(), self.categories.len());
        }
    }

    pub fn encode(&self, value: Option<&str>) -> usize {
        value.and_then(|v| self.index.get(v).copied()).unwrap_or(Self::UNKNOWN)
    }

    pub fn decode(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.categories.get(i)).map(String::as_str)
    }

    /// Number of embedding rows needed, including the unknown slot.
    pub fn size(&self) -> usize {
        self.categories.len() + 1
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn contains(&self, value: &str) -> bool {
        self.index.contains_key(value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// Population mean and standard deviation. Constant (or empty) inputs
    /// get `std = 1` so standardization never divides by zero.
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 1.0 };
        }
        let first = values[0];
        if values.iter().all(|&v| v == first) {
            return Self { mean: first, std: 1.0 };
        }
        let n = values.len() as f64;
        let mean = probsaint_autodiff::pairwise_sum(values) / n;
        let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        let std = (probsaint_autodiff::pairwise_sum(&sq) / n).sqrt();
        let std = if std > 1e-12 * mean.abs().max(1.0) && std.is_finite() { std } else { 1.0 };
        Self { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NumericSource {
    Column { column: usize },
    DatePart { column: usize, part: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericFeature {
    pub name: String,
    pub source: NumericSource,
    /// Raw-unit replacement for missing values.
    pub placeholder: f64,
    pub stats: Standardizer,
}

/// Encoders fitted on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedEncoders {
    pub categorical: Vec<(usize, Vocabulary)>,
    pub numeric: Vec<NumericFeature>,
    pub target: Standardizer,
}

impl FittedEncoders {
    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.categorical.iter().map(|(_, v)| v.size()).collect()
    }

    pub fn categorical_names(&self) -> Vec<&str> {
        self.categorical.iter().map(|(_, v)| v.column.as_str()).collect()
    }

    pub fn numeric_names(&self) -> Vec<&str> {
        self.numeric.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn numeric_position(&self, name: &str) -> Option<usize> {
        self.numeric.iter().position(|f| f.name == name)
    }

    pub fn vocabulary(&self, column: &str) -> Option<&Vocabulary> {
        self.categorical.iter().map(|(_, v)| v).find(|v| v.column == column)
    }
}

/// Model-ready rows: integer category codes and standardized numerics.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub n_cat: usize,
    pub n_num: usize,
    /// Row-major `rows x n_cat`.
    pub cat_indices: Vec<usize>,
    /// Row-major `rows x n_num`, standardized, NaN-free.
    pub num_values: Vec<f64>,
    pub target: Vec<Option<f64>>,
    pub target_raw: Vec<Option<f64>>,
    pub sale_dates: Vec<Option<NaiveDate>>,
    /// Position of each encoded row in the input that produced it.
    pub source_rows: Vec<usize>,
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn cat_row(&self, i: usize) -> &[usize] {
        &self.cat_indices[i * self.n_cat..(i + 1) * self.n_cat]
    }

    pub fn num_row(&self, i: usize) -> &[f64] {
        &self.num_values[i * self.n_num..(i + 1) * self.n_num]
    }

    pub fn num_row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.num_values[i * self.n_num..(i + 1) * self.n_num]
    }

    /// Rows picked by index, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut out = Self::empty(self.n_cat, self.n_num);
        for &r in rows {
            out.push_from(self, r);
        }
        out
    }

    pub fn concat(parts: &[&Self]) -> Self {
        let (n_cat, n_num) = parts.first().map(|p| (p.n_cat, p.n_num)).unwrap_or((0, 0));
        let mut out = Self::empty(n_cat, n_num);
        for p in parts {
            for r in 0..p.len() {
                out.push_from(p, r);
            }
        }
        out
    }

    fn empty(n_cat: usize, n_num: usize) -> Self {
        Self {
            n_cat,
            n_num,
            cat_indices: Vec::new(),
            num_values: Vec::new(),
            target: Vec::new(),
            target_raw: Vec::new(),
            sale_dates: Vec::new(),
            source_rows: Vec::new(),
        }
    }

    fn push_from(&mut self, other: &Self, r: usize) {
        self.cat_indices.extend_from_slice(other.cat_row(r));
        self.num_values.extend_from_slice(other.num_row(r));
        self.target.push(other.target[r]);
        self.target_raw.push(other.target_raw[r]);
        self.sale_dates.push(other.sale_dates[r]);
        self.source_rows.push(other.source_rows[r]);
    }

    /// Standardized targets; errors if any row lacks one.
    pub fn targets(&self) -> Result<Vec<f64>> {
        collect_targets(&self.target)
    }

    /// Targets in original currency units; errors if any row lacks one.
    pub fn targets_raw(&self) -> Result<Vec<f64>> {
        collect_targets(&self.target_raw)
    }
}

fn collect_targets(t: &[Option<f64>]) -> Result<Vec<f64>> {
    t.iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| RowError::new(i, "missing target value").into()))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub batch: EncodedBatch,
    pub errors: Vec<RowError>,
}

fn parse_number(text: &str) -> Option<f64> {
    text.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn fit_encoders(train: &[RawRow], schema: &FeatureSchema) -> Result<FittedEncoders> {
    if train.is_empty() {
        return Err(Error::Config("cannot fit encoders on an empty training set".into()));
    }
    let width = schema.columns.len();
    let rows: Vec<&RawRow> = train.iter().filter(|r| r.0.len() == width).collect();

    let mut categorical = Vec::new();
    let mut numeric = Vec::new();
    for (col, spec) in schema.columns.iter().enumerate() {
        match spec.kind {
            ColumnKind::Categorical => {
                let mut vocab = Vocabulary::new(&spec.name);
                for r in &rows {
                    if let Some(v) = r.get(col) {
                        vocab.observe(v);
                    }
                }
                categorical.push((col, vocab));
            }
            ColumnKind::Numeric => {
                let values: Vec<f64> = rows.iter().filter_map(|r| r.get(col).and_then(parse_number)).collect();
                let stats = Standardizer::fit(&values);
                numeric.push(NumericFeature {
                    name: spec.name.clone(),
                    source: NumericSource::Column { column: col },
                    placeholder: spec.missing_placeholder.unwrap_or(stats.mean),
                    stats,
                });
            }
            ColumnKind::Date | ColumnKind::SaleDate => {
                let derived: Vec<[f64; 6]> = rows
                    .iter()
                    .filter_map(|r| r.get(col).and_then(parse_date))
                    .map(|d| derive_date_features(d, schema.reference_date).to_array())
                    .collect();
                for (part, suffix) in DATE_FEATURES.iter().enumerate() {
                    let values: Vec<f64> = derived.iter().map(|f| f[part]).collect();
                    let stats = Standardizer::fit(&values);
                    numeric.push(NumericFeature {
                        name: format!("{}.{}", spec.name, suffix),
                        source: NumericSource::DatePart { column: col, part },
                        placeholder: stats.mean,
                        stats,
                    });
                }
            }
            ColumnKind::Target => {}
        }
    }

    let tcol = schema.target_position();
    let targets: Vec<f64> = rows.iter().filter_map(|r| r.get(tcol).and_then(parse_number)).collect();
    if targets.is_empty() {
        return Err(Error::Config(format!(
            "target column `{}` is missing in every training row",
            schema.target
        )));
    }
    Ok(FittedEncoders { categorical, numeric, target: Standardizer::fit(&targets) })
}

/// Encodes rows against fitted encoders. Rows that fail validation are
/// reported and skipped; the call only fails when no row survives (an
/// empty input yields an empty batch).
pub fn encode_rows(rows: &[RawRow], schema: &FeatureSchema, enc: &FittedEncoders) -> Result<Encoded> {
    let mut batch = EncodedBatch::empty(enc.categorical.len(), enc.numeric.len());
    let mut errors = Vec::new();
    let tcol = schema.target_position();
    let scol = schema.sale_date_position();
    let mut num_buf = Vec::with_capacity(enc.numeric.len());
    'rows: for (i, row) in rows.iter().enumerate() {
        if row.0.len() != schema.columns.len() {
            errors.push(RowError::new(
                i,
                format!("expected {} values, found {}", schema.columns.len(), row.0.len()),
            ));
            continue;
        }
        num_buf.clear();
        let mut date_cache: Option<(usize, Option<[f64; 6]>)> = None;
        for f in &enc.numeric {
            let raw = match f.source {
                NumericSource::Column { column } => match row.get(column) {
                    None => f.placeholder,
                    Some(text) => match parse_number(text) {
                        Some(v) => v,
                        None => {
                            errors.push(RowError::new(
                                i,
                                format!("column `{}`: `{text}` is not a number", schema.columns[column].name),
                            ));
                            continue 'rows;
                        }
                    },
                },
                NumericSource::DatePart { column, part } => {
                    if date_cache.map(|(c, _)| c) != Some(column) {
                        let derived = match row.get(column) {
                            None => None,
                            Some(text) => match parse_date(text) {
                                Some(d) => Some(derive_date_features(d, schema.reference_date).to_array()),
                                None => {
                                    errors.push(RowError::new(
                                        i,
                                        format!(
                                            "column `{}`: `{text}` is not an ISO-8601 date",
                                            schema.columns[column].name
                                        ),
                                    ));
                                    continue 'rows;
                                }
                            },
                        };
                        date_cache = Some((column, derived));
                    }
                    match date_cache.and_then(|(_, d)| d) {
                        Some(parts) => parts[part],
                        None => f.placeholder,
                    }
                }
            };
            num_buf.push(f.stats.apply(raw));
        }
        let target_raw = match row.get(tcol) {
            None => None,
            Some(text) => match parse_number(text) {
                Some(v) => Some(v),
                None => {
                    errors.push(RowError::new(i, format!("target `{text}` is not a number")));
                    continue;
                }
            },
        };
        for (col, vocab) in &enc.categorical {
            batch.cat_indices.push(vocab.encode(row.get(*col)));
        }
        batch.num_values.extend_from_slice(&num_buf);
        batch.target.push(target_raw.map(|y| enc.target.apply(y)));
        batch.target_raw.push(target_raw);
        batch.sale_dates.push(row.get(scol).and_then(parse_date));
        batch.source_rows.push(i);
    }
    if batch.is_empty() && !errors.is_empty() {
        return Err(Error::AllRowsFailed(errors));
    }
    Ok(Encoded { batch, errors })
}
