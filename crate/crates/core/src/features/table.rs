use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schema::FeatureSchema;
use crate::error::{Error, Result, RowError};

/// One input row as raw text, aligned with the schema's column order.
/// `None` marks a missing value (an empty CSV field).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RawRow(pub Vec<Option<String>>);

impl RawRow {
    pub fn get(&self, col: usize) -> Option<&str> {
        self.0.get(col).and_then(|v| v.as_deref())
    }

    pub fn set(&mut self, col: usize, value: Option<String>) {
        self.0[col] = value;
    }

    /// Builds a row from a JSON object keyed by column name. Absent keys
    /// and `null` become missing values; unknown keys are rejected.
    pub fn from_json_map(
        schema: &FeatureSchema,
        map: &BTreeMap<String, serde_json::Value>,
        row: usize,
    ) -> std::result::Result<Self, RowError> {
        let mut values = vec![None; schema.columns.len()];
        for (key, value) in map {
            let col = schema
                .position(key)
                .ok_or_else(|| RowError::new(row, format!("unknown column `{key}`")))?;
            values[col] = match value {
                serde_json::Value::Null => None,
                serde_json::Value::String(s) if s.is_empty() => None,
                serde_json::Value::String(s) => Some(s.clone()),
                serde_json::Value::Number(n) => Some(n.to_string()),
                other => {
                    return Err(RowError::new(
                        row,
                        format!("column `{key}` must be a string or number, got {other}"),
                    ))
                }
            };
        }
        Ok(Self(values))
    }

    pub fn to_json_map(&self, schema: &FeatureSchema) -> BTreeMap<String, serde_json::Value> {
        schema
            .columns
            .iter()
            .zip(&self.0)
            .filter_map(|(c, v)| v.as_ref().map(|v| (c.name.clone(), serde_json::Value::String(v.clone()))))
            .collect()
    }
}

/// Rows read from a CSV file plus the rows that could not be read.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub rows: Vec<RawRow>,
    pub errors: Vec<RowError>,
}

/// Reads the CSV dialect used throughout: comma separated, header row,
/// UTF-8, empty field = missing. The target column may be absent; every
/// other schema column must appear in the header. Extra columns are
/// ignored.
pub fn read_csv<R: Read>(reader: R, schema: &FeatureSchema) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let target = schema.target_position();
    let mut mapping = Vec::with_capacity(schema.columns.len());
    for (i, col) in schema.columns.iter().enumerate() {
        match header.iter().position(|h| h == &col.name) {
            Some(p) => mapping.push(Some(p)),
            None if i == target => mapping.push(None),
            None => return Err(Error::Schema(format!("CSV header lacks column `{}`", col.name))),
        }
    }
    let mut table = Table::default();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            table.errors.push(RowError::new(
                row,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
            continue;
        }
        let values = mapping
            .iter()
            .map(|m| m.and_then(|p| Some(record.get(p)?.to_string()).filter(|s| !s.is_empty())))
            .collect();
        table.rows.push(RawRow(values));
    }
    if table.rows.is_empty() && !table.errors.is_empty() {
        return Err(Error::AllRowsFailed(table.errors));
    }
    Ok(table)
}

pub fn read_csv_path(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Table> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.as_ref().display())))?;
    read_csv(std::io::BufReader::new(file), schema)
}

/// Writes rows in schema column order with a header.
pub fn write_csv<W: std::io::Write>(writer: W, schema: &FeatureSchema, rows: &[RawRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(schema.columns.iter().map(|c| c.name.as_str()))?;
    for r in rows {
        w.write_record(r.0.iter().map(|v| v.as_deref().unwrap_or("")))?;
    }
    w.flush()?;
    Ok(())
}
