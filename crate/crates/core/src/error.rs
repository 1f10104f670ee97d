use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // attention / feature containers
    #[error("negative attention entry at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize },
    #[error("row {row} sums to {sum}, outside 1 \u{b1} 1e-5")]
    RowSumOutOfTolerance { row: usize, sum: f64 },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("head stack is empty")]
    EmptyStack,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid feature map: {0}")]
    InvalidFeatureMap(String),

    // scoring
    #[error("power mapper needs non-negative key scores, got {value} at key {index}")]
    NonPositiveScoreForPower { index: usize, value: f64 },
    #[error("negative or non-finite score {value} at index {index}")]
    NegativeScore { index: usize, value: f64 },
    #[error("scores sum to zero; mapper output is degenerate")]
    AllZeroScores,
    #[error("no score vectors to aggregate")]
    EmptyInput,
    #[error("score vectors have different lengths ({expected} vs {found})")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid mapper parameter: {0}")]
    InvalidMapper(String),
    #[error("invalid G-WPR options: {0}")]
    InvalidOptions(String),

    // masks and recovery
    #[error("pruning ratio {0} outside [0, 1)")]
    RatioOutOfRange(f64),
    #[error("token grid {height}x{width} is too small for bicubic recovery (need >= 4)")]
    GridTooSmall { height: usize, width: usize },
    #[error("token grid {height}x{width} must have even sides for bicubic recovery")]
    OddDimensions { height: usize, width: usize },
    #[error("mask retains no tokens")]
    EmptyRetainedSet,

    // schedules
    #[error("tau {tau} outside [0, {total_steps}]")]
    TauOutOfRange { tau: usize, total_steps: usize },
    #[error("unknown block identifier `{0}`")]
    UnknownBlock(String),
    #[error("variance sequence is empty")]
    EmptySequence,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    // cost model
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("resolution {resolution} is not divisible by {required}")]
    ResolutionIncompatible { resolution: usize, required: usize },
    #[error("target {target:.4e} exceeds the unpruned cost {full:.4e}")]
    TargetAboveFullCost { target: f64, full: f64 },
    #[error("target {target:.4e} is below the cheapest reachable cost {floor:.4e}")]
    TargetBelowFloor { target: f64, floor: f64 },

    // harness
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("benchmark check failed: {0}")]
    BenchmarkCheck(String),

    // io
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end:
    /// 2 for validation failures, 3 for infeasible budgets, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::TargetAboveFullCost { .. } | Error::TargetBelowFloor { .. } => 3,
            Error::Io { .. } | Error::Csv(_) => 1,
            _ => 2,
        }
    }

    /// Stable identifier for foreign callers.
    pub fn code(&self) -> &'static str {
        match self {
            Error::NegativeEntry { .. } => "negative_entry",
            Error::RowSumOutOfTolerance { .. } => "row_sum_out_of_tolerance",
            Error::NonFinite { .. } => "non_finite",
            Error::EmptyStack => "empty_stack",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::InvalidFeatureMap(_) => "invalid_feature_map",
            Error::NonPositiveScoreForPower { .. } => "non_positive_score_for_power",
            Error::NegativeScore { .. } => "negative_score",
            Error::AllZeroScores => "all_zero_scores",
            Error::EmptyInput => "empty_input",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::InvalidMapper(_) => "invalid_mapper",
            Error::InvalidOptions(_) => "invalid_options",
            Error::RatioOutOfRange(_) => "ratio_out_of_range",
            Error::GridTooSmall { .. } => "grid_too_small",
            Error::OddDimensions { .. } => "odd_dimensions",
            Error::EmptyRetainedSet => "empty_retained_set",
            Error::TauOutOfRange { .. } => "tau_out_of_range",
            Error::UnknownBlock(_) => "unknown_block",
            Error::EmptySequence => "empty_sequence",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::InvalidTopology(_) => "invalid_topology",
            Error::ResolutionIncompatible { .. } => "resolution_incompatible",
            Error::TargetAboveFullCost { .. } => "target_above_full_cost",
            Error::TargetBelowFloor { .. } => "target_below_floor",
            Error::ConfigInvalid(_) => "config_invalid",
            Error::BenchmarkCheck(_) => "benchmark_check",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
