use chrono::{Days, Months, NaiveDate};
use serde::{Deserialize, Serialize};

use super::dates::parse_date;
use super::schema::FeatureSchema;
use super::table::RawRow;
use crate::error::{Error, Result, RowError};

/// A calendar span. Month spans keep the day of month fixed (clamped at
/// month end), so a one-month window before 2022-03-20 starts on
/// 2022-02-20.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Span {
    Days(u32),
    Months(u32),
}

impl Span {
    pub fn before(self, date: NaiveDate) -> Option<NaiveDate> {
        match self {
            Span::Days(n) => date.checked_sub_days(Days::new(n.into())),
            Span::Months(n) => date.checked_sub_months(Months::new(n)),
        }
    }

    pub fn after(self, date: NaiveDate) -> Option<NaiveDate> {
        match self {
            Span::Days(n) => date.checked_add_days(Days::new(n.into())),
            Span::Months(n) => date.checked_add_months(Months::new(n)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitWindows {
    pub val: Span,
    pub test: Span,
    pub train_gap: Span,
}

impl Default for SplitWindows {
    fn default() -> Self {
        Self { val: Span::Months(1), test: Span::Months(3), train_gap: Span::Months(1) }
    }
}

/// Boundary dates of a split; every interval is half-open.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: NaiveDate,
    pub val_start: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

#[derive(Clone, Debug, Default)]
pub struct Partitions {
    pub train: Vec<RawRow>,
    pub val: Vec<RawRow>,
    pub test: Vec<RawRow>,
    /// Rows whose sale date is missing or unparseable.
    pub errors: Vec<RowError>,
}

impl SplitWindows {
    pub fn bounds(&self, test_start: NaiveDate) -> Result<SplitBounds> {
        let overflow = || Error::Split(format!("window arithmetic overflows around {test_start}"));
        Ok(SplitBounds {
            train_end: self.train_gap.before(test_start).ok_or_else(overflow)?,
            val_start: self.val.before(test_start).ok_or_else(overflow)?,
            test_start,
            test_end: self.test.after(test_start).ok_or_else(overflow)?,
        })
    }
}

/// Time-wise split on the sale date: train `< train_end`, validation in
/// `[val_start, test_start)`, test in `[test_start, test_end)`. Rows keep
/// their input order within each partition.
pub fn time_split(
    rows: &[RawRow],
    schema: &FeatureSchema,
    test_start: NaiveDate,
    windows: &SplitWindows,
) -> Result<Partitions> {
    split_by_bounds(rows, schema, &windows.bounds(test_start)?)
}

/// [`time_split`] with the boundary dates given directly.
pub fn split_by_bounds(rows: &[RawRow], schema: &FeatureSchema, b: &SplitBounds) -> Result<Partitions> {
    let col = schema.sale_date_position();
    let mut out = Partitions::default();
    for (i, row) in rows.iter().enumerate() {
        let Some(date) = row.get(col).and_then(parse_date) else {
            out.errors.push(RowError::new(i, format!("sale date `{}` is missing or invalid", row.get(col).unwrap_or(""))));
            continue;
        };
        if date < b.train_end {
            out.train.push(row.clone());
        } else if date >= b.val_start && date < b.test_start {
            out.val.push(row.clone());
        } else if date >= b.test_start && date < b.test_end {
            out.test.push(row.clone());
        }
    }
    if out.train.is_empty() {
        return Err(Error::Split(format!("no training rows dated before {}", b.train_end)));
    }
    if out.test.is_empty() {
        return Err(Error::Split(format!("no test rows dated in [{}, {})", b.test_start, b.test_end)));
    }
    Ok(out)
}

/// Test start that puts the test window flush against the end of the
/// data: one test span before the day after the latest sale date.
pub fn default_test_start(rows: &[RawRow], schema: &FeatureSchema, windows: &SplitWindows) -> Result<NaiveDate> {
    let col = schema.sale_date_position();
    let last = rows
        .iter()
        .filter_map(|r| r.get(col).and_then(parse_date))
        .max()
        .ok_or_else(|| Error::Split("no row has a valid sale date".into()))?;
    last.checked_add_days(Days::new(1))
        .and_then(|d| windows.test.before(d))
        .ok_or_else(|| Error::Split(format!("window arithmetic overflows around {last}")))
}
