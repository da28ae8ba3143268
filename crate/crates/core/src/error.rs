use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive semi-definite: eigenvalue {eigenvalue:e} below threshold {threshold:e}")]
    NotPsd { eigenvalue: f64, threshold: f64 },

    #[error("symmetric eigensolver did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("invalid observation operator: {0}")]
    InvalidObservation(String),

    #[error("non-finite state at step {step}: {context}")]
    BlowUp { step: usize, context: String },

    #[error("root finding failed: {0}")]
    RootFinding(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("weight file schema error: {0}")]
    Schema(String),

    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for failures caused by the numerics rather than the inputs.
    pub fn is_blow_up(&self) -> bool {
        match self {
            Error::BlowUp { .. } => true,
            Error::Trial { source, .. } => source.is_blow_up(),
            _ => false,
        }
    }

    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Toml(_) | Error::Schema(_) | Error::InvalidObservation(_) => {
                true
            }
            Error::Trial { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
