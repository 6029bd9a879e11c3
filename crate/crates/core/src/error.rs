use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty corpus: no documents left after filtering")]
    EmptyCorpus,

    #[error("duplicate document id {0:?}")]
    DuplicateDoc(String),

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("embedding dimension mismatch: store has D={expected}, record has {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid store file: {0}")]
    InvalidStore(String),

    #[error("degenerate split at year {0}")]
    DegenerateSplit(i32),

    #[error("word {0} has no scorable candidate year")]
    Unscorable(u32),

    #[error("degenerate labels: logistic regression needs both classes")]
    DegenerateLabels,

    #[error("cascade for {0:?} has no events")]
    EmptyCascade(String),

    #[error("infeasible parameters: zero intensity with a positive count")]
    Infeasible,

    #[error("rank-deficient design: dependent columns {0:?}")]
    RankDeficient(Vec<String>),

    #[error("missing feature {column:?} for document {doc_id:?}")]
    MissingFeature { doc_id: String, column: String },

    #[error("models are not nested: full LL {full} < restricted LL {restricted}")]
    NotNested { full: f64, restricted: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` needs {artifact} from stage `{requires}`; run it first")]
    MissingUpstream {
        stage: String,
        requires: String,
        artifact: PathBuf,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
