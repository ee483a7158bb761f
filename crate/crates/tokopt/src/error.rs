use std::path::PathBuf;

/// Errors shared across the crate.
///
/// Display strings for the domain variants are stable and machine-parsable;
/// the CLI prints them verbatim on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("target below character coverage")]
    TargetBelowCoverage,
    #[error("duplicate entry: {0:?}")]
    DuplicateEntry(String),
    #[error("unnormalized vocabulary (sum of probabilities = {0})")]
    UnnormalizedVocab(f64),
    #[error("coverage violation: character {0:?} has no single-character entry")]
    CoverageViolation(char),
    #[error("no path through the lattice for {0:?}")]
    NoPath(String),
    #[error("oracle blowup: more than {0} segmentations")]
    OracleBlowup(usize),
    #[error("numeric overflow")]
    NumericOverflow,
    #[error("unreachable class balance after {0} attempts")]
    UnreachableBalance(usize),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("snapshot error: {0}")]
    Snapshot(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
