use thiserror::Error;

use crate::localpoly::Side;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad grouping used by front ends to map failures onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Estimation,
    Argument,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("unit {unit} period {period}: {message}")]
    Consistency {
        unit: String,
        period: i64,
        message: &'static str,
    },

    #[error("duplicate row for unit {unit} period {period}")]
    Duplicate { unit: String, period: i64 },

    #[error("no units satisfy the cohort rule at focal period {period}")]
    EmptyCohort { period: i64 },

    #[error("{} unit(s) lack required event-time observations: {}", units.len(), preview(units))]
    Balance { units: Vec<String> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular {side} fit of order {order}: {n_eff} observation(s) with positive weight, condition estimate {condition:.3e}")]
    SingularFit {
        side: Side,
        order: usize,
        n_eff: usize,
        condition: f64,
    },

    #[error("degenerate denominator on {side} side: |{value:.3e}| is below tolerance")]
    DegenerateDenominator { side: Side, value: f64 },

    #[error("group `{group}` is empty near the cutoff on the {side} side (fitted share {value:.3e})")]
    DegenerateGroup {
        side: Side,
        group: &'static str,
        value: f64,
    },

    #[error("{side} side has {have} observation(s); nearest-neighbour moments need at least {need}")]
    InsufficientNeighbors { side: Side, have: usize, need: usize },

    #[error("{side} side has {have} observation(s); at least {need} are required")]
    InsufficientData { side: Side, have: usize, need: usize },

    #[error("assembled variance {0:.3e} is negative")]
    NegativeVariance(f64),

    #[error("no eligible cohorts for tau = {tau}")]
    NoCohorts { tau: i64 },

    #[error("no horizon could be estimated ({dropped} cohort estimate(s) failed)")]
    NoEstimates { dropped: usize },

    #[error("cohort keys do not match: {0}")]
    KeyMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn preview(units: &[String]) -> String {
    const SHOWN: usize = 10;
    let mut out = units.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if units.len() > SHOWN {
        out.push_str(", ...");
    }
    out
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            MissingColumn(_)
            | Parse { .. }
            | Consistency { .. }
            | Duplicate { .. }
            | Io(_)
            | Csv(_)
            | EmptyCohort { .. }
            | Balance { .. } => ErrorClass::Data,
            InvalidArgument(_) => ErrorClass::Argument,
            SingularFit { .. }
            | DegenerateDenominator { .. }
            | DegenerateGroup { .. }
            | InsufficientNeighbors { .. }
            | InsufficientData { .. }
            | NegativeVariance(_)
            | NoCohorts { .. }
            | NoEstimates { .. }
            | KeyMismatch(_) => ErrorClass::Estimation,
        }
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        use Error::*;
        match self {
            MissingColumn(_) => "missing_column",
            Parse { .. } => "parse",
            Consistency { .. } => "consistency",
            Duplicate { .. } => "duplicate",
            EmptyCohort { .. } => "empty_cohort",
            Balance { .. } => "balance",
            InvalidArgument(_) => "invalid_argument",
            SingularFit { .. } => "singular_fit",
            DegenerateDenominator { .. } => "degenerate_denominator",
            DegenerateGroup { .. } => "degenerate_group",
            InsufficientNeighbors { .. } => "insufficient_neighbors",
            InsufficientData { .. } => "insufficient_data",
            NegativeVariance(_) => "negative_variance",
            NoCohorts { .. } => "no_cohorts",
            NoEstimates { .. } => "no_estimates",
            KeyMismatch(_) => "key_mismatch",
            Io(_) => "io",
            Csv(_) => "csv",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
