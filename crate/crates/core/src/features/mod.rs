//! Raw rows to model-ready batches: schema, CSV ingestion, encoders, date
//! expansion and time-wise splitting.

pub mod dates;
pub mod encode;
pub mod schema;
pub mod split;
pub mod table;

pub use dates::{derive_date_features, month_cycle, parse_date, DateFeatures, DATE_FEATURES};
pub use encode::{
    encode_rows, fit_encoders, Encoded, EncodedBatch, FittedEncoders, NumericFeature, NumericSource, Standardizer,
    Vocabulary,
};
pub use schema::{ColumnKind, ColumnSpec, FeatureSchema};
pub use split::{default_test_start, split_by_bounds, time_split, Partitions, Span, SplitBounds, SplitWindows};
pub use table::{read_csv, read_csv_path, write_csv, RawRow, Table};
