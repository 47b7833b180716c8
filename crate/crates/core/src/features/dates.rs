use std::f64::consts::PI;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

/// Names of the numeric features a date expands into, in order.
pub const DATE_FEATURES: [&str; 6] = ["day", "month", "year", "sin_month", "cos_month", "days_since_ref"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DateFeatures {
    pub day: f64,
    pub month: f64,
    pub year: f64,
    pub sin_month: f64,
    pub cos_month: f64,
    pub days_since_ref: f64,
}

impl DateFeatures {
    pub fn to_array(self) -> [f64; 6] {
        [self.day, self.month, self.year, self.sin_month, self.cos_month, self.days_since_ref]
    }
}

/// Seasonal month encoding: `(sin(2*pi*m/12), cos(2*pi*m/12))` for month
/// `m` in 1..=12.
pub fn month_cycle(month: u32) -> (f64, f64) {
    let angle = 2.0 * PI * f64::from(month) / 12.0;
    (angle.sin(), angle.cos())
}

pub fn derive_date_features(date: NaiveDate, reference: NaiveDate) -> DateFeatures {
    let (sin_month, cos_month) = month_cycle(date.month());
    DateFeatures {
        day: f64::from(date.day()),
        month: f64::from(date.month()),
        year: f64::from(date.year()),
        sin_month,
        cos_month,
        days_since_ref: (date - reference).num_days() as f64,
    }
}

/// ISO-8601 calendar date (`YYYY-MM-DD`).
pub fn parse_date(text: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(text.trim(), "%Y-%m-%d").ok()
}
