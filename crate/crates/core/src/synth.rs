//! Seeded synthetic used-car market with an exactly computable generative
//! mean and standard deviation per row.
//!
//! Log-price is additive in categorical effects, age, mileage, engine power,
//! season, trend and a per-body-type offer-duration elasticity; noise is
//! Gaussian in currency units with a standard deviation that grows linearly
//! with age. Every coefficient lives in [`MarketSpec`], which is written
//! next to the generated CSV.

use std::collections::HashMap;
use std::io::Write;

use chrono::{Datelike, Months, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{month_cycle, parse_date, write_csv, ColumnKind, ColumnSpec, FeatureSchema, RawRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub name: String,
    pub effect: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub effect: f64,
    /// First sale date at which the variant appears on the market.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub introduced: Option<NaiveDate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub name: String,
    pub effect: f64,
    /// Median engine power in kW.
    pub base_power: f64,
    pub variants: Vec<Variant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Brand {
    pub name: String,
    pub effect: f64,
    /// Extra log-price lost per year of age on top of the global rate.
    pub depreciation: f64,
    pub models: Vec<Model>,
}

/// Log-price response to the offer duration `o` (days).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Elasticity {
    Flat,
    /// Rises linearly by `amplitude` until `peak` days, flat afterwards.
    Hump { amplitude: f64, peak: f64 },
    /// Falls linearly by `amplitude` over `span` days, flat afterwards.
    Decreasing { amplitude: f64, span: f64 },
}

impl Elasticity {
    pub fn effect(self, o: f64) -> f64 {
        match self {
            Elasticity::Flat => 0.0,
            Elasticity::Hump { amplitude, peak } => amplitude * o.min(peak) / peak,
            Elasticity::Decreasing { amplitude, span } => -amplitude * o.min(span) / span,
        }
    }

    /// Sign of the effect change between two durations: -1, 0 or 1.
    pub fn sign_between(self, from: f64, to: f64) -> i32 {
        let d = self.effect(to) - self.effect(from);
        if d > 0.0 {
            1
        } else if d < 0.0 {
            -1
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyType {
    pub name: String,
    pub effect: f64,
    pub weight: f64,
    pub elasticity: Elasticity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub n_rows: usize,
    pub start_date: NaiveDate,
    /// Exclusive upper bound on sale dates.
    pub end_date: NaiveDate,
    pub reference_date: NaiveDate,
    /// Listing volume grows as `exp(growth_per_day * t)`.
    pub growth_per_day: f64,

    pub brands: Vec<Brand>,
    pub fuel_types: Vec<Level>,
    pub transmissions: Vec<Level>,
    pub conditions: Vec<Level>,
    pub body_types: Vec<BodyType>,

    pub base_log_price: f64,
    pub min_age_months: u32,
    pub max_age_months: u32,
    pub age_coef_per_year: f64,
    pub km_per_year_mean: f64,
    pub km_per_year_sd: f64,
    pub odometer_coef_per_100k: f64,
    pub power_coef: f64,
    pub power_ref: f64,
    pub power_log_sd: f64,
    pub engine_size_missing_rate: f64,
    pub season_sin: f64,
    pub season_cos: f64,
    pub trend_per_year: f64,

    pub offer_gamma_shape: f64,
    pub offer_gamma_scale: f64,
    pub offer_min: f64,
    pub offer_max: f64,

    pub sigma0: f64,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub mu: f64,
    pub sigma: f64,
}

pub const COLUMNS: [(&str, ColumnKind); 14] = [
    ("brand", ColumnKind::Categorical),
    ("model", ColumnKind::Categorical),
    ("variant", ColumnKind::Categorical),
    ("fuel_type", ColumnKind::Categorical),
    ("transmission", ColumnKind::Categorical),
    ("condition", ColumnKind::Categorical),
    ("body_type", ColumnKind::Categorical),
    ("odometer", ColumnKind::Numeric),
    ("age_months", ColumnKind::Numeric),
    ("engine_power", ColumnKind::Numeric),
    ("engine_size", ColumnKind::Numeric),
    ("offer_duration", ColumnKind::Numeric),
    ("sale_date", ColumnKind::SaleDate),
    ("sale_price", ColumnKind::Target),
];

const BRAND: usize = 0;
const MODEL: usize = 1;
const VARIANT: usize = 2;
const FUEL: usize = 3;
const TRANSMISSION: usize = 4;
const CONDITION: usize = 5;
const BODY: usize = 6;
const ODOMETER: usize = 7;
const AGE: usize = 8;
const POWER: usize = 9;
const ENGINE_SIZE: usize = 10;
const OFFER: usize = 11;
const SALE_DATE: usize = 12;
const PRICE: usize = 13;

fn level(name: &str, effect: f64, weight: f64) -> Level {
    Level { name: name.into(), effect, weight }
}

impl Default for MarketSpec {
    fn default() -> Self {
        let d = |s| parse_date(s).expect("valid literal date");
        let trims = [("base", -0.04), ("comfort", 0.0), ("sport", 0.05)];
        let brand_table = [
            ("Aurel", 0.12, 0.004, [("A3", -0.08, 85.0), ("A5", 0.04, 110.0), ("A7", 0.16, 150.0)]),
            ("Borva", -0.10, 0.008, [("Mino", -0.12, 60.0), ("Terra", 0.0, 90.0), ("Vasta", 0.09, 120.0)]),
            ("Castell", 0.02, 0.0, [("C1", -0.06, 75.0), ("C2", 0.03, 100.0), ("CX", 0.12, 140.0)]),
            ("Delmar", -0.04, -0.004, [("Lido", -0.05, 70.0), ("Rio", 0.02, 95.0), ("Sierra", 0.10, 130.0)]),
            ("Elkin", 0.07, 0.006, [("E20", -0.03, 90.0), ("E40", 0.05, 115.0), ("E60", 0.14, 165.0)]),
        ];
        let late = d("2022-04-25");
        let brands = brand_table
            .iter()
            .enumerate()
            .map(|(bi, (name, effect, depreciation, models))| Brand {
                name: (*name).into(),
                effect: *effect,
                depreciation: *depreciation,
                models: models
                    .iter()
                    .enumerate()
                    .map(|(mi, (mname, meffect, power))| {
                        let model_name = format!("{name} {mname}");
                        let mut variants: Vec<Variant> = trims
                            .iter()
                            .map(|(t, e)| Variant { name: format!("{model_name} {t}"), effect: *e, introduced: None })
                            .collect();
                        // A handful of variants launch inside the evaluation window
                        // and are therefore unknown to any encoder fitted on training rows.
                        if (bi + mi) % 4 == 0 {
                            variants.push(Variant {
                                name: format!("{model_name} facelift"),
                                effect: 0.03,
                                introduced: Some(late),
                            });
                        }
                        Model { name: model_name, effect: *meffect, base_power: *power, variants }
                    })
                    .collect(),
            })
            .collect();
        Self {
            n_rows: 20_000,
            start_date: d("2018-07-01"),
            end_date: d("2022-08-20"),
            reference_date: d("2018-07-01"),
            growth_per_day: 0.002,
            brands,
            fuel_types: vec![
                level("petrol", 0.0, 0.5),
                level("diesel", 0.03, 0.35),
                level("hybrid", 0.07, 0.1),
                level("electric", 0.10, 0.05),
            ],
            transmissions: vec![level("manual", 0.0, 0.6), level("automatic", 0.05, 0.4)],
            conditions: vec![level("excellent", 0.04, 0.3), level("good", 0.0, 0.5), level("fair", -0.07, 0.2)],
            body_types: vec![
                BodyType {
                    name: "sedan".into(),
                    effect: 0.0,
                    weight: 1.0,
                    elasticity: Elasticity::Flat,
                },
                BodyType {
                    name: "suv".into(),
                    effect: 0.06,
                    weight: 1.0,
                    elasticity: Elasticity::Hump { amplitude: 0.08, peak: 45.0 },
                },
                BodyType {
                    name: "hatchback".into(),
                    effect: -0.04,
                    weight: 1.0,
                    elasticity: Elasticity::Decreasing { amplitude: 0.10, span: 180.0 },
                },
            ],
            base_log_price: 9.95,
            min_age_months: 6,
            max_age_months: 120,
            age_coef_per_year: 0.05,
            km_per_year_mean: 13_000.0,
            km_per_year_sd: 4_000.0,
            odometer_coef_per_100k: 0.10,
            power_coef: 0.20,
            power_ref: 100.0,
            power_log_sd: 0.08,
            engine_size_missing_rate: 0.03,
            season_sin: 0.03,
            season_cos: 0.015,
            trend_per_year: 0.03,
            offer_gamma_shape: 2.0,
            offer_gamma_scale: 25.0,
            offer_min: 1.0,
            offer_max: 180.0,
            sigma0: 1000.0,
            alpha: 0.06,
        }
    }
}

/// Name lookups into the market's effect tables.
struct Index<'a> {
    brands: HashMap<&'a str, &'a Brand>,
    models: HashMap<&'a str, (&'a Brand, &'a Model)>,
    variants: HashMap<(&'a str, &'a str), &'a Variant>,
    fuel: HashMap<&'a str, f64>,
    transmission: HashMap<&'a str, f64>,
    condition: HashMap<&'a str, f64>,
    body: HashMap<&'a str, &'a BodyType>,
}

impl<'a> Index<'a> {
    fn new(spec: &'a MarketSpec) -> Self {
        let levels = |ls: &'a [Level]| ls.iter().map(|l| (l.name.as_str(), l.effect)).collect();
        let mut models = HashMap::new();
        let mut variants = HashMap::new();
        for b in &spec.brands {
            for m in &b.models {
                models.insert(m.name.as_str(), (b, m));
                for v in &m.variants {
                    variants.insert((m.name.as_str(), v.name.as_str()), v);
                }
            }
        }
        Self {
            brands: spec.brands.iter().map(|b| (b.name.as_str(), b)).collect(),
            models,
            variants,
            fuel: levels(&spec.fuel_types),
            transmission: levels(&spec.transmissions),
            condition: levels(&spec.conditions),
            body: spec.body_types.iter().map(|b| (b.name.as_str(), b)).collect(),
        }
    }
}

fn oracle_err(msg: impl Into<String>) -> Error {
    Error::Oracle(msg.into())
}

impl MarketSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Generation(m.into()));
        if self.sigma0 <= 0.0 || !self.sigma0.is_finite() {
            return fail("sigma0 must be positive");
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return fail("alpha must be non-negative");
        }
        if self.end_date <= self.start_date {
            return fail("end_date must be after start_date");
        }
        if self.min_age_months > self.max_age_months {
            return fail("min_age_months exceeds max_age_months");
        }
        if !(self.offer_min >= 1.0 && self.offer_max >= self.offer_min) {
            return fail("offer-duration bounds must satisfy 1 <= offer_min <= offer_max");
        }
        if self.brands.iter().any(|b| b.models.is_empty() || b.models.iter().any(|m| m.variants.is_empty())) {
            return fail("every brand needs a model and every model a variant");
        }
        for (name, levels) in [("fuel_types", &self.fuel_types), ("transmissions", &self.transmissions), ("conditions", &self.conditions)] {
            if levels.is_empty() || levels.iter().any(|l| l.weight <= 0.0) {
                return Err(Error::Generation(format!("{name} needs at least one level with positive weights")));
            }
        }
        if self.brands.is_empty() || self.body_types.is_empty() || self.body_types.iter().any(|b| b.weight <= 0.0) {
            return fail("brands and body types must be non-empty with positive weights");
        }
        if !(0.0..1.0).contains(&self.engine_size_missing_rate) {
            return fail("engine_size_missing_rate must lie in [0, 1)");
        }
        Ok(())
    }

    /// The feature schema matching the generated CSV.
    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            columns: COLUMNS.iter().map(|(n, k)| ColumnSpec::new(*n, *k)).collect(),
            reference_date: self.reference_date,
            target: "sale_price".into(),
            sale_date: "sale_date".into(),
            offer_duration: Some("offer_duration".into()),
        }
    }

    pub fn sigma_star(&self, age_years: f64) -> f64 {
        self.sigma0 * (1.0 + self.alpha * age_years)
    }

    /// Elasticity of the named body type.
    pub fn elasticity(&self, body_type: &str) -> Option<Elasticity> {
        self.body_types.iter().find(|b| b.name == body_type).map(|b| b.elasticity)
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T], weight: impl Fn(&T) -> f64) -> &'a T {
    let total: f64 = items.iter().map(&weight).sum();
    let mut u = rng.random::<f64>() * total;
    for it in items {
        u -= weight(it);
        if u < 0.0 {
            return it;
        }
    }
    items.last().expect("non-empty choice set")
}

/// Day offset drawn from a density proportional to `exp(g t)` on `[0, n)`.
fn sample_day(rng: &mut ChaCha8Rng, g: f64, n: i64) -> i64 {
    let u: f64 = rng.random();
    let t = if g.abs() < 1e-12 {
        u * n as f64
    } else {
        ((u * ((g * n as f64).exp() - 1.0)) + 1.0).ln() / g
    };
    (t.floor() as i64).clamp(0, n - 1)
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Draws `spec.n_rows` rows. Sale prices are `mu* + sigma* z`; in the
/// vanishing event that a draw is not positive, `z` is redrawn.
pub fn generate(spec: &MarketSpec, seed: u64) -> Result<Vec<RawRow>> {
    spec.validate()?;
    if spec.n_rows == 0 {
        return Err(Error::Generation("n_rows must be at least 1".into()));
    }
    let schema = spec.schema();
    let index = Index::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_days = (spec.end_date - spec.start_date).num_days();
    let offer = Gamma::new(spec.offer_gamma_shape, spec.offer_gamma_scale)
        .map_err(|e| Error::Generation(format!("offer-duration distribution: {e}")))?;
    let km = Normal::new(spec.km_per_year_mean, spec.km_per_year_sd)
        .map_err(|e| Error::Generation(format!("mileage distribution: {e}")))?;

    let mut rows = Vec::with_capacity(spec.n_rows);
    for _ in 0..spec.n_rows {
        let sale = spec.start_date + chrono::Days::new(sample_day(&mut rng, spec.growth_per_day, n_days) as u64);
        let brand = pick(&mut rng, &spec.brands, |_| 1.0);
        let model = pick(&mut rng, &brand.models, |_| 1.0);
        let available: Vec<&Variant> =
            model.variants.iter().filter(|v| v.introduced.is_none_or(|d| d <= sale)).collect();
        let variant = if available.is_empty() {
            &model.variants[0]
        } else {
            *pick(&mut rng, &available, |_| 1.0)
        };
        let fuel = pick(&mut rng, &spec.fuel_types, |l| l.weight);
        let trans = pick(&mut rng, &spec.transmissions, |l| l.weight);
        let cond = pick(&mut rng, &spec.conditions, |l| l.weight);
        let body = pick(&mut rng, &spec.body_types, |b| b.weight);

        let age_months = rng.random_range(spec.min_age_months..=spec.max_age_months);
        let age_years = f64::from(age_months) / 12.0;
        let per_year: f64 = km.sample(&mut rng).max(1000.0);
        let odometer = (per_year * age_years).round();
        let z_power: f64 = StandardNormal.sample(&mut rng);
        let power = (model.base_power * (spec.power_log_sd * z_power).exp()).round().max(1.0);
        let size_noise: f64 = StandardNormal.sample(&mut rng);
        let engine_size = ((power / 65.0 + 0.15 * size_noise).max(0.6) * 10.0).round() / 10.0;
        let size_missing = rng.random::<f64>() < spec.engine_size_missing_rate;
        let duration = offer.sample(&mut rng).round().clamp(spec.offer_min, spec.offer_max);

        let mut row = RawRow(vec![None; COLUMNS.len()]);
        row.set(BRAND, Some(brand.name.clone()));
        row.set(MODEL, Some(model.name.clone()));
        row.set(VARIANT, Some(variant.name.clone()));
        row.set(FUEL, Some(fuel.name.clone()));
        row.set(TRANSMISSION, Some(trans.name.clone()));
        row.set(CONDITION, Some(cond.name.clone()));
        row.set(BODY, Some(body.name.clone()));
        row.set(ODOMETER, Some(fmt_num(odometer)));
        row.set(AGE, Some(age_months.to_string()));
        row.set(POWER, Some(fmt_num(power)));
        row.set(ENGINE_SIZE, (!size_missing).then(|| format!("{engine_size:.1}")));
        row.set(OFFER, Some(fmt_num(duration)));
        row.set(SALE_DATE, Some(sale.format("%Y-%m-%d").to_string()));

        let m = moments_indexed(&row, &schema, spec, &index)?;
        let price = loop {
            let z: f64 = StandardNormal.sample(&mut rng);
            let y = ((m.mu + m.sigma * z) * 100.0).round() / 100.0;
            if y > 0.0 {
                break y;
            }
        };
        row.set(PRICE, Some(format!("{price:.2}")));
        rows.push(row);
    }
    Ok(rows)
}

pub fn generate_csv<W: Write>(spec: &MarketSpec, seed: u64, writer: W) -> Result<usize> {
    let rows = generate(spec, seed)?;
    write_csv(writer, &spec.schema(), &rows)?;
    Ok(rows.len())
}

fn field<'r>(row: &'r RawRow, schema: &FeatureSchema, name: &str) -> Result<&'r str> {
    let col = schema.position(name).ok_or_else(|| oracle_err(format!("schema has no column `{name}`")))?;
    row.get(col).ok_or_else(|| oracle_err(format!("row is missing `{name}`")))
}

fn number(row: &RawRow, schema: &FeatureSchema, name: &str) -> Result<f64> {
    let text = field(row, schema, name)?;
    text.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| oracle_err(format!("`{name}` value `{text}` is not a number")))
}

/// Exact generative mean and standard deviation of the sale price.
pub fn oracle_moments(row: &RawRow, schema: &FeatureSchema, spec: &MarketSpec) -> Result<Moments> {
    moments_indexed(row, schema, spec, &Index::new(spec))
}

/// Generative log-mean for a row.
pub fn oracle_log_mean(row: &RawRow, schema: &FeatureSchema, spec: &MarketSpec) -> Result<f64> {
    log_mean(row, schema, spec, &Index::new(spec))
}

fn log_mean(row: &RawRow, schema: &FeatureSchema, spec: &MarketSpec, ix: &Index) -> Result<f64> {
    let unknown = |col: &str, v: &str| oracle_err(format!("unknown {col} `{v}`"));
    let brand_name = field(row, schema, "brand")?;
    let brand = ix.brands.get(brand_name).ok_or_else(|| unknown("brand", brand_name))?;
    let model_name = field(row, schema, "model")?;
    let (owner, model) = ix.models.get(model_name).ok_or_else(|| unknown("model", model_name))?;
    if owner.name != brand.name {
        return Err(oracle_err(format!("model `{model_name}` does not belong to brand `{brand_name}`")));
    }
    let variant_name = field(row, schema, "variant")?;
    let variant = ix.variants.get(&(model_name, variant_name)).ok_or_else(|| unknown("variant", variant_name))?;
    let lookup = |map: &HashMap<&str, f64>, col: &str| -> Result<f64> {
        let v = field(row, schema, col)?;
        map.get(v).copied().ok_or_else(|| unknown(col, v))
    };
    let fuel = lookup(&ix.fuel, "fuel_type")?;
    let trans = lookup(&ix.transmission, "transmission")?;
    let cond = lookup(&ix.condition, "condition")?;
    let body_name = field(row, schema, "body_type")?;
    let body = ix.body.get(body_name).ok_or_else(|| unknown("body_type", body_name))?;

    let age_years = number(row, schema, "age_months")? / 12.0;
    let odometer = number(row, schema, "odometer")?;
    let power = number(row, schema, "engine_power")?;
    if power <= 0.0 {
        return Err(oracle_err("engine_power must be positive"));
    }
    let offer = number(row, schema, "offer_duration")?;
    let date_text = field(row, schema, "sale_date")?;
    let sale = parse_date(date_text).ok_or_else(|| oracle_err(format!("bad sale_date `{date_text}`")))?;
    let (sin_m, cos_m) = month_cycle(sale.month());
    let days = (sale - spec.reference_date).num_days() as f64;

    Ok(spec.base_log_price
        + brand.effect
        + model.effect
        + variant.effect
        + fuel
        + trans
        + cond
        + body.effect
        - (spec.age_coef_per_year + brand.depreciation) * age_years
        - spec.odometer_coef_per_100k * odometer / 100_000.0
        + spec.power_coef * (power / spec.power_ref).ln()
        + spec.season_sin * sin_m
        + spec.season_cos * cos_m
        + spec.trend_per_year * days / 365.25
        + body.elasticity.effect(offer))
}

fn moments_indexed(row: &RawRow, schema: &FeatureSchema, spec: &MarketSpec, ix: &Index) -> Result<Moments> {
    let mu = log_mean(row, schema, spec, ix)?.exp();
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::Generation(format!("non-positive generative mean {mu}")));
    }
    let age_years = number(row, schema, "age_months")? / 12.0;
    Ok(Moments { mu, sigma: spec.sigma_star(age_years) })
}

/// Gaussian NLL of the generative truth, averaged over rows (raw units).
pub fn bayes_optimal_nll(rows: &[RawRow], schema: &FeatureSchema, spec: &MarketSpec) -> Result<f64> {
    if rows.is_empty() {
        return Err(oracle_err("no rows to score"));
    }
    let ix = Index::new(spec);
    let per_row = rows
        .iter()
        .map(|r| {
            let m = moments_indexed(r, schema, spec, &ix)?;
            let y = number(r, schema, &schema.target)?;
            let s2 = m.sigma * m.sigma;
            Ok(0.5 * (s2.ln() + (y - m.mu).powi(2) / s2))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(probsaint_autodiff::pairwise_sum(&per_row) / rows.len() as f64)
}

/// Copy of `row` with its sale date moved `months` later.
pub fn shift_sale_month(row: &RawRow, schema: &FeatureSchema, months: u32) -> Option<RawRow> {
    let col = schema.position(&schema.sale_date)?;
    let d = parse_date(row.get(col)?)?.checked_add_months(Months::new(months))?;
    let mut out = row.clone();
    out.set(col, Some(d.format("%Y-%m-%d").to_string()));
    Some(out)
}
