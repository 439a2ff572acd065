use thiserror::Error;

/// Errors raised anywhere in the coefficient pipeline.
#[derive(Debug, Error)]
pub enum FlashError {
    #[error("normalized time {0} lies outside [0, 1]")]
    Domain(f64),

    #[error("invalid degree {0}: supported range is 1..=16")]
    InvalidDegree(usize),

    #[error("underdetermined fit: {nodes} nodes for {coeffs} coefficients")]
    Underdetermined { nodes: usize, coeffs: usize },

    #[error("node grid must be strictly increasing (violated at index {0})")]
    NodeOrder(usize),

    #[error("insufficient data: window needs steps {first}..={last}, recording covers {have_first}..={have_last}")]
    InsufficientData {
        first: i64,
        last: i64,
        have_first: i64,
        have_last: i64,
    },

    #[error("singular fit: condition estimate {condition:e}")]
    SingularFit { condition: f64 },

    #[error("infeasible constraints: continuity order {order} needs {rows} rows but degree {degree} has {coeffs} coefficients")]
    InfeasibleConstraint {
        order: usize,
        degree: usize,
        rows: usize,
        coeffs: usize,
    },

    #[error("degenerate anchors: {0}")]
    DegenerateAnchor(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("coefficients are scale-normalized; denormalize before decoding")]
    MustDenormalize,

    #[error("training diverged at batch index {index}: {what}")]
    TrainingDivergence { index: usize, what: String },

    #[error("inference diverged at Euler step {step}")]
    InferenceDivergence { step: usize },

    #[error("physics diverged at control step {step}")]
    PhysicsDivergence { step: usize },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("empty record")]
    EmptyRecord,

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = FlashError> = std::result::Result<T, E>;
