use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("rank {rank} out of range 1..={max} for {what}")]
    Rank {
        what: &'static str,
        rank: usize,
        max: usize,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("invalid spectrum: {0}")]
    Spectrum(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("weights are already absorbed")]
    AlreadyAbsorbed,

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    Vocab { id: usize, vocab: usize },

    #[error("layer kind error: {0}")]
    Kind(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
