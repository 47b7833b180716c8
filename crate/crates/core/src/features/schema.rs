use std::collections::HashSet;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Categorical,
    Numeric,
    Date,
    Target,
    SaleDate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Replacement for missing numeric values, in raw units. Missing values
    /// fall back to the fitted training mean when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_placeholder: Option<f64>,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Self { name: name.into(), kind, missing_placeholder: None }
    }

    /// Dates (including the sale date) expand into derived numeric features.
    pub fn is_date(&self) -> bool {
        matches!(self.kind, ColumnKind::Date | ColumnKind::SaleDate)
    }
}

/// Column typing for a dataset. The sale-date column doubles as a date
/// feature and as the key for time-wise splitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub columns: Vec<ColumnSpec>,
    pub reference_date: NaiveDate,
    pub target: String,
    pub sale_date: String,
    /// Column swept by the duration forecaster. Defaults to a column named
    /// `offer_duration` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offer_duration: Option<String>,
}

impl FeatureSchema {
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column `{}`", c.name)));
            }
        }
        for (kind, name, label) in [
            (ColumnKind::Target, &self.target, "target"),
            (ColumnKind::SaleDate, &self.sale_date, "sale_date"),
        ] {
            let of_kind: Vec<_> = self.columns.iter().filter(|c| c.kind == kind).collect();
            if of_kind.len() != 1 {
                return Err(Error::Schema(format!(
                    "expected exactly one {label} column, found {}",
                    of_kind.len()
                )));
            }
            if &of_kind[0].name != name {
                return Err(Error::Schema(format!(
                    "{label} is `{name}` but the {label} column is `{}`",
                    of_kind[0].name
                )));
            }
        }
        if let Some(od) = &self.offer_duration {
            match self.column(od) {
                Some(c) if c.kind == ColumnKind::Numeric => {}
                _ => {
                    return Err(Error::Schema(format!(
                        "offer duration column `{od}` must be a numeric column"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn target_position(&self) -> usize {
        self.position(&self.target).expect("validated schema has a target")
    }

    pub fn sale_date_position(&self) -> usize {
        self.position(&self.sale_date).expect("validated schema has a sale date")
    }

    /// Resolved offer-duration column name, if the schema has one.
    pub fn offer_duration_column(&self) -> Option<&str> {
        match &self.offer_duration {
            Some(name) => Some(name.as_str()),
            None => self
                .column("offer_duration")
                .filter(|c| c.kind == ColumnKind::Numeric)
                .map(|c| c.name.as_str()),
        }
    }

    pub fn categorical_columns(&self) -> impl Iterator<Item = (usize, &ColumnSpec)> {
        self.columns.iter().enumerate().filter(|(_, c)| c.kind == ColumnKind::Categorical)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn json(cols: &str) -> String {
        format!(
            r#"{{"columns":[{cols}],"reference_date":"2018-07-01","target":"price","sale_date":"sold"}}"#
        )
    }

    #[test]
    fn parses_and_validates() {
        let s = FeatureSchema::from_json(&json(
            r#"{"name":"make","kind":"categorical"},{"name":"odo","kind":"numeric","missing_placeholder":0},
               {"name":"sold","kind":"sale_date"},{"name":"price","kind":"target"}"#,
        ))
        .unwrap();
        assert_eq!(s.columns.len(), 4);
        assert_eq!(s.column("odo").unwrap().missing_placeholder, Some(0.0));
        assert_eq!(s.offer_duration_column(), None);
    }

    #[test]
    fn rejects_duplicates_and_missing_roles() {
        let dup = json(
            r#"{"name":"a","kind":"numeric"},{"name":"a","kind":"numeric"},
               {"name":"sold","kind":"sale_date"},{"name":"price","kind":"target"}"#,
        );
        assert!(FeatureSchema::from_json(&dup).is_err());
        let no_target = json(r#"{"name":"sold","kind":"sale_date"}"#);
        assert!(FeatureSchema::from_json(&no_target).is_err());
        let two_targets = json(
            r#"{"name":"sold","kind":"sale_date"},{"name":"price","kind":"target"},{"name":"p2","kind":"target"}"#,
        );
        assert!(FeatureSchema::from_json(&two_targets).is_err());
    }
}
