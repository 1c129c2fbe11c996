//! Schema-driven ingestion, encoding, splitting, KL shift grouping, and
//! the synthetic benchmark generator.

mod benchmark;
mod dataset;
mod kl;
mod schema;

pub use benchmark::{gen_benchmark, BenchmarkConfig};
pub use dataset::{read_csv_provenance, Cell, DomainDataset, NumericStats, Row};
pub use kl::{
    build_shift_groups, build_shift_groups_with, kl_divergence, kl_divergence_with,
    kl_from_counts, smoothing_floor, CircleKl, KlOptions, ShiftGroup, ShiftGroups,
    DEFAULT_GROUP_SIZES,
};
pub use schema::{demo_schema, FeatureKind, FeatureSpan, FeatureSpec, TabularSchema};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid schema: {reason}")]
    InvalidSchema { reason: String },
    #[error("invalid config: {reason}")]
    InvalidConfig { reason: String },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("row {row}, column '{column}': unknown category '{value}'")]
    UnknownCategory {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column '{column}': cannot parse numeric value '{value}'")]
    BadNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column '{column}': cell kind does not match schema")]
    CellKindMismatch { row: usize, column: String },
    #[error("required column '{column}' not found in header")]
    MissingColumn { column: String },
    #[error("label values must be \"0\" or \"1\", got '{value}'")]
    InvalidLabel { value: String },
    #[error("{what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("dataset has no labels")]
    MissingLabels,
    #[error("dataset is not encoded yet")]
    NotEncoded,
    #[error("datasets use different schemas")]
    SchemaMismatch,
    #[error("train fraction {value} outside (0, 1)")]
    InvalidFraction { value: f64 },
    #[error("too few minority samples ({minority}) for a stratified split")]
    TooFewMinority { minority: usize },
    #[error("empty subset")]
    EmptySubset,
    #[error("group size {size} exceeds available circles ({circles})")]
    GroupSizeExceedsCircles { size: usize, circles: usize },
    #[error("minority rate {rate} infeasible for {rows} rows")]
    InfeasibleMinorityRate { rate: f64, rows: usize },
}
