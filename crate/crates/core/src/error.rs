use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("fom: Newton failed at step {step} for mu={mu:?} (residual {residual:.3e} after {iterations} iterations)")]
    Solver {
        step: usize,
        mu: Vec<f64>,
        residual: f64,
        iterations: usize,
    },

    #[error("fom: linear solve failed at step {step}: {reason}")]
    LinearSolve { step: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("trainer: non-finite {term} at epoch {epoch}")]
    NonFinite { term: String, epoch: usize },

    #[error("trainer: loss diverged ({loss:.3e}) at epoch {epoch}")]
    Diverged { loss: f64, epoch: usize },

    #[error("trainer: FOM solve for greedy sample mu={mu:?} failed: {source}")]
    GreedySample {
        mu: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("rom: latent trajectory blew up for mu={mu:?} at step {step}")]
    Instability { mu: Vec<f64>, step: usize },

    #[error("rom: zero-norm reference snapshot at step {0}")]
    ZeroNorm(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: usize, found: usize) -> Self {
        Error::Shape {
            context,
            expected,
            found,
        }
    }

    /// True for failures of the numerics (solver, divergence, instability)
    /// as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Solver { .. }
            | Error::LinearSolve { .. }
            | Error::NonFinite { .. }
            | Error::Diverged { .. }
            | Error::Instability { .. }
            | Error::ZeroNorm(_) => true,
            Error::GreedySample { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
