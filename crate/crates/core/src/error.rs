use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{file}:{line}: malformed row: {reason}")]
    MalformedRow {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("unknown CBG `{0}`")]
    UnknownCbg(String),
    #[error("negative value in {field}")]
    NegativeValue { field: String },
    #[error("schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("invalid coordinate ({lat}, {lon})")]
    InvalidCoordinate { lat: f64, lon: f64 },

    #[error("no edges remain after applying w_min = {w_min}")]
    EmptyGraphAfterThreshold { w_min: f64 },
    #[error("total edge weight is zero")]
    ZeroTotalWeight,

    #[error("CBG `{0}` has no inflow from origins with defined demographics")]
    NoInflow(String),
    #[error("not a probability vector: {0}")]
    NotAProbabilityVector(String),
    #[error("need {needed} neighbours with defined demographics, found {found}")]
    InsufficientNeighbors { needed: usize, found: usize },

    #[error("no visitor mix for destination `{0}`")]
    MissingVisitorMix(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("training loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("origin `{0}` appears in its own candidate set")]
    SelfPair(String),
    #[error("expected {expected} candidate destinations, got {found}")]
    WrongCandidateCount { expected: usize, found: usize },

    #[error("both vectors are all zero")]
    BothZero,
    #[error("negative entry at index {0}")]
    NegativeEntry(usize),
    #[error("vector is constant")]
    ConstantVector,
    #[error("actual values have zero range (rmse = {rmse})")]
    ZeroRange { rmse: f64 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} CBGs, found {found}")]
    TooFewCbgs { needed: usize, found: usize },

    #[error("no feature rows")]
    EmptyFeatures,
    #[error("no SHAP reports to aggregate")]
    EmptyReports,

    #[error("no trained model available")]
    UntrainedModel,
    #[error("unknown POI type `{0}`")]
    UnknownPoiType(String),
    #[error("negative density for `{0}`")]
    NegativeDensity(String),
    #[error("slot `{0}` is not editable")]
    LockedSlot(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("storage failure at {path}: {reason}")]
    StorageFailure { path: PathBuf, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("input too large for exhaustive oracle: {size} > {limit}")]
    TooLarge { size: usize, limit: usize },
    #[error("too many features for exact enumeration: {size} > {limit}")]
    TooManyFeatures { size: usize, limit: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the variant, used by the CLI and HTTP layers.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedRow { .. } => "MalformedRow",
            Error::UnknownCbg(_) => "UnknownCbg",
            Error::NegativeValue { .. } => "NegativeValue",
            Error::SchemaMismatch { .. } => "SchemaMismatch",
            Error::UnknownAttribute(_) => "UnknownAttribute",
            Error::InvalidCoordinate { .. } => "InvalidCoordinate",
            Error::EmptyGraphAfterThreshold { .. } => "EmptyGraphAfterThreshold",
            Error::ZeroTotalWeight => "ZeroTotalWeight",
            Error::NoInflow(_) => "NoInflow",
            Error::NotAProbabilityVector(_) => "NotAProbabilityVector",
            Error::InsufficientNeighbors { .. } => "InsufficientNeighbors",
            Error::MissingVisitorMix(_) => "MissingVisitorMix",
            Error::InsufficientData(_) => "InsufficientData",
            Error::DivergedLoss { .. } => "DivergedLoss",
            Error::SelfPair(_) => "SelfPair",
            Error::WrongCandidateCount { .. } => "WrongCandidateCount",
            Error::BothZero => "BothZero",
            Error::NegativeEntry(_) => "NegativeEntry",
            Error::ConstantVector => "ConstantVector",
            Error::ZeroRange { .. } => "ZeroRange",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::TooFewCbgs { .. } => "TooFewCbgs",
            Error::EmptyFeatures => "EmptyFeatures",
            Error::EmptyReports => "EmptyReports",
            Error::UntrainedModel => "UntrainedModel",
            Error::UnknownPoiType(_) => "UnknownPoiType",
            Error::NegativeDensity(_) => "NegativeDensity",
            Error::LockedSlot(_) => "LockedSlot",
            Error::UnknownStrategy(_) => "UnknownStrategy",
            Error::StorageFailure { .. } => "StorageFailure",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::TooLarge { .. } => "TooLarge",
            Error::TooManyFeatures { .. } => "TooManyFeatures",
            Error::Io { .. } => "Io",
            Error::Serde(_) => "Serde",
        }
    }

    /// True for errors caused by bad user input rather than internal failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::StorageFailure { .. } | Error::DivergedLoss { .. }
        )
    }
}
