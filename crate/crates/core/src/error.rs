use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("degenerate distribution: all {0} entries are equal")]
    DegenerateGroup(usize),
    #[error("group needs at least 2 entries, got {0}")]
    GroupTooSmall(usize),
    #[error("k = {k} out of range for {total} entries")]
    KOutOfRange { k: usize, total: usize },
    #[error("t = {t} outside [0, {max}]")]
    StepOutOfRange { t: usize, max: usize },
    #[error("site {0} would be sliced to width 0")]
    EmptySite(String),
    #[error("mask does not match site {site}: expected width {expected}, got {got}")]
    MaskMisaligned {
        site: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("accumulated-gradient scores requested without an importance ledger")]
    MissingLedger,
    #[error("incomplete run: {0}")]
    IncompleteRun(String),
    #[error("reports are not comparable: {0}")]
    MismatchedReports(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable identifier for machine-readable error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidShape { .. } => "invalid_shape",
            Error::NonFinite(_) => "non_finite",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::DegenerateGroup(_) => "degenerate_group",
            Error::GroupTooSmall(_) => "group_too_small",
            Error::KOutOfRange { .. } => "k_out_of_range",
            Error::StepOutOfRange { .. } => "step_out_of_range",
            Error::EmptySite(_) => "empty_site",
            Error::MaskMisaligned { .. } => "mask_misaligned",
            Error::InvalidConfig(_) => "invalid_config",
            Error::MissingLedger => "missing_ledger",
            Error::IncompleteRun(_) => "incomplete_run",
            Error::MismatchedReports(_) => "mismatched_reports",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
