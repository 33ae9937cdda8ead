use std::path::PathBuf;

use crate::grid::Coord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("state has no occupied cells")]
    EmptyState,

    #[error("point or cell {what} lies outside the grid of resolution {resolution}")]
    OutOfBounds { what: String, resolution: u32 },

    #[error("latent code has length {got}, expected {expected}")]
    LatentDim { expected: usize, got: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("parameter {0:?} is not present in the store")]
    MissingParam(String),

    #[error("tape is stale: parameters changed since the forward pass")]
    StaleTape,

    #[error("non-finite gradient in parameter {0:?}")]
    NonFiniteGradient(String),

    #[error("chain died at step {step}: state became empty")]
    ChainDied { step: usize },

    #[error("domain mismatch: {0}")]
    DomainMismatch(String),

    #[error("argument outside the function domain: {0}")]
    DomainError(String),

    #[error("final-step loss requires a saturated infusion rate, got alpha = {0}")]
    NotSaturated(f64),

    #[error("query set is empty")]
    EmptyQuerySet,

    #[error("no sample fell inside a surface cell")]
    NoSurfaceCells,

    #[error("sequence does not end at the target occupancy")]
    SequenceNotConverged,

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("at least two completions are required")]
    NeedTwo,

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("training diverged: final loss {last} is not below initial loss {first}")]
    TrainingDiverged { first: f64, last: f64 },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Owning module and the invariant that failed, for diagnostics.
    pub fn origin(&self) -> (&'static str, &'static str) {
        match self {
            Error::EmptyState => ("grid", "non-empty state"),
            Error::OutOfBounds { .. } => ("grid", "within grid bounds"),
            Error::LatentDim { .. } => ("grid", "latent length K"),
            Error::ShapeMismatch { .. } => ("net", "matching shapes"),
            Error::MissingParam(_) => ("net", "parameter present"),
            Error::StaleTape => ("net", "fresh tape"),
            Error::NonFiniteGradient(_) => ("net", "finite gradients"),
            Error::ChainDied { .. } => ("kernel", "non-empty chain"),
            Error::DomainMismatch(_) => ("infusion", "aligned domains"),
            Error::DomainError(_) => ("loss", "argument domain"),
            Error::NotSaturated(_) => ("loss", "saturated infusion rate"),
            Error::EmptyQuerySet => ("autoencoder", "non-empty queries"),
            Error::NoSurfaceCells => ("autoencoder", "surface cells present"),
            Error::SequenceNotConverged => ("loss", "sequence ends at x"),
            Error::EmptyCloud => ("metrics", "non-empty cloud"),
            Error::NeedTwo => ("metrics", "two or more completions"),
            Error::Misaligned(_) => ("metrics", "aligned inputs"),
            Error::TrainingDiverged { .. } => ("training", "loss decreases"),
            Error::NonFiniteLoss { .. } => ("training", "finite loss"),
            Error::Config(_) => ("config", "valid configuration"),
            Error::Format { .. } => ("io", "well-formed file"),
            Error::Io { .. } => ("io", "readable and writable paths"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn out_of_bounds(c: Coord, resolution: u32) -> Self {
        Error::OutOfBounds {
            what: format!("({}, {}, {})", c.i, c.j, c.k),
            resolution,
        }
    }
}
