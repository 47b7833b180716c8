//! JSON run configuration accepted by `train` and `search` via `--config`.

use std::path::Path;

use probsaint_core::features::{default_test_start, parse_date, FeatureSchema, RawRow, SplitBounds, SplitWindows};
use probsaint_core::train::{SearchSpace, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub search: SearchSpace,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// First test day (`YYYY-MM-DD`). Defaults to one test window before
    /// the end of the data.
    pub test_start: Option<String>,
    pub windows: SplitWindows,
}

impl SplitConfig {
    pub fn bounds(&self, rows: &[RawRow], schema: &FeatureSchema) -> Result<SplitBounds> {
        let start = match &self.test_start {
            Some(text) => parse_date(text)
                .ok_or_else(|| ServiceError::Usage(format!("test_start `{text}` is not a YYYY-MM-DD date")))?,
            None => default_test_start(rows, schema, &self.windows)?,
        };
        Ok(self.windows.bounds(start)?)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::file(path, e))?;
        serde_json::from_str(&text).map_err(|source| ServiceError::Json { path: path.display().to_string(), source })
    }
}
