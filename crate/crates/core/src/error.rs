use std::path::PathBuf;

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
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient flowing out of {op} (node {node})")]
    NonFiniteGradient { op: &'static str, node: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("gis block in mode `off` is an identity and has no forward kernel")]
    ModeError,
    #[error("predicted quaternion norm {0:e} is below the degeneracy floor")]
    DegenerateQuaternion(f64),
    #[error("quaternion norm {0} is not unit within tolerance")]
    NonUnitQuaternion(f64),
    #[error("feature row {0} has zero norm")]
    DegenerateFeature(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("subsampling fraction {0} outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("missing feature file {0}")]
    MissingFeatureFile(PathBuf),
    #[error("bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
