use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed pilot set for device {device}: {reason}")]
    MalformedPilots { device: usize, reason: String },

    #[error("synchronization failed for pair ({tx}, {rx}): {reason}")]
    SyncFailure { tx: usize, rx: usize, reason: String },

    #[error("missing synchronization estimate for pair ({tx}, {rx})")]
    MissingSync { tx: usize, rx: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("velocity regression matrix is rank deficient")]
    RankDeficient,

    #[error("{count} Doppler tuples exceed the cap of {cap}; enable the feasibility prefilter")]
    TupleCapExceeded { count: f64, cap: usize },

    #[error("association infeasible: target {target} has no finite-cost tuple")]
    AssociationInfeasible { target: usize },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn at(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// Innermost error, looking through stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
