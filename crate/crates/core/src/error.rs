use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Pipeline stage that produced an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    ZeroStrategy,
    Composition,
    GeometricMean,
    Centring,
    Transform,
    Fit,
    Drift,
    InverseTransform,
    Perturbation,
    Scoring,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::ZeroStrategy => "zero-strategy",
            Stage::Composition => "composition",
            Stage::GeometricMean => "geometric-mean",
            Stage::Centring => "centring",
            Stage::Transform => "transform",
            Stage::Fit => "fit",
            Stage::Drift => "drift",
            Stage::InverseTransform => "inverse-transform",
            Stage::Perturbation => "perturbation",
            Stage::Scoring => "scoring",
        };
        f.write_str(name)
    }
}

/// Coarse error grouping used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    Parse,
    Config,
    Numeric,
    Io,
}

impl ErrorFamily {
    /// 2 = parse, 3 = config, 4 = numeric, 5 = io.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorFamily::Parse => 2,
            ErrorFamily::Config => 3,
            ErrorFamily::Numeric => 4,
            ErrorFamily::Io => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("year {year} has zero total deaths")]
    YearWithZeroTotal { year: i32 },
    #[error("cannot close an all-zero vector")]
    AllZeroVector,
    #[error("negative entry {value} at index {index}")]
    NegativeEntry { index: usize, value: f64 },
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("perturbation component {index} is not strictly positive")]
    NonPositivePerturbation { index: usize },
    #[error("column {part} contains a zero; resolve zeros before taking geometric means")]
    ZeroInColumn { part: usize },
    #[error("omitting zero-containing parts removed every part")]
    AllPartsDropped,
    #[error("part count {parts} is too small (need at least 2)")]
    PartCountTooSmall { parts: usize },
    #[error("component {index} is not strictly positive (unresolved zero; use a zero strategy or alpha > 0)")]
    NonPositiveComponent { index: usize },
    #[error("alpha {0} is outside (0, 1]")]
    AlphaOutOfRange(f64),
    #[error("row has no positive entry")]
    AllZeroRow,
    #[error("every component fell outside the alpha-space and was clamped")]
    AllComponentsClamped,
    #[error("too few years: need at least {needed}, found {found}")]
    TooFewYears { needed: usize, found: usize },
    #[error("rate at row {row}, column {col} is not strictly positive")]
    NonPositiveRate { row: usize, col: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("insufficient years for fold plan: {0}")]
    InsufficientYears(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot take a quantile of an empty sample")]
    EmptySamples,
    #[error("invalid panel: {0}")]
    InvalidPanel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("duplicate cell at line {line}: year {year}, age band {age_band:?}, cause {cause:?}")]
    DuplicateCell {
        line: u64,
        year: i32,
        age_band: String,
        cause: String,
    },
    #[error("missing cell: year {year}, age band {age_band:?}, cause {cause:?}")]
    MissingCell {
        year: i32,
        age_band: String,
        cause: String,
    },
    #[error("negative deaths at line {line}")]
    NegativeDeaths { line: u64 },
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn family(&self) -> ErrorFamily {
        match self {
            Error::Parse { .. }
            | Error::DuplicateCell { .. }
            | Error::MissingCell { .. }
            | Error::NegativeDeaths { .. }
            | Error::Csv(_)
            | Error::Json(_) => ErrorFamily::Parse,
            Error::InvalidConfig(_)
            | Error::AlphaOutOfRange(_)
            | Error::InsufficientYears(_)
            | Error::InvalidPanel(_) => ErrorFamily::Config,
            Error::Io(_) => ErrorFamily::Io,
            Error::Stage { source, .. } => source.family(),
            _ => ErrorFamily::Numeric,
        }
    }

    /// Stage tag of the outermost stage wrapper, if any.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// Innermost error beneath any stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn at(self, stage: Stage) -> Result<T> {
        self.map_err(|source| match source {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}
