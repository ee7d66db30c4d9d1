use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("empty reduction over axes {0:?}")]
    EmptyReduction(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("domain error in {op}: input {value} must be strictly positive")]
    Domain { op: &'static str, value: f64 },

    #[error("backward requires a single-element root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-deterministic objective: two evaluations at the same point differ by {0:e}")]
    NonDeterministic(f64),

    #[error("frozen-value replay mismatch: {0}")]
    FrozenReplay(String),

    #[error("no supervision in batch: every label is unknown")]
    NoSupervision,

    #[error("kernel bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),

    #[error("retry budget exhausted after {attempts} attempts: {reason}")]
    RetryBudgetExhausted { attempts: usize, reason: String },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("quadratic weighted kappa undefined: expected-agreement denominator is zero")]
    DegenerateMarginals,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checkpoint does not match configuration: {0}")]
    CheckpointMismatch(String),

    #[error("loss component {component} is not finite ({value})")]
    NumericalFailure { component: String, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by numerics rather than bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Domain { .. }
                | Error::NumericalFailure { .. }
                | Error::NonDeterministic(_)
        )
    }
}
