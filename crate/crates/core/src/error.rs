use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },

    #[error("candidate-absent: candidate token {0} not found in generated region")]
    CandidateAbsent(usize),

    #[error("candidate token {0} occurs more than once")]
    DuplicateCandidate(usize),

    #[error("empty-mask: cannot derive a box from an empty mask")]
    EmptyMask,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("missing loss constituent `{0}`")]
    MissingConstituent(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("unsupported: {0}")]
    Unsupported(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
