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

    #[error("malformed record in {file} line {line}: field `{field}`: {message}")]
    MalformedRecord {
        file: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("unresolved clip references: {}", .0.join(", "))]
    DanglingClips(Vec<String>),

    #[error("need at least 3 distinct episodes to split, found {0}")]
    TooFewEpisodes(usize),

    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),

    #[error("knowledge base is empty: no instance contributes knowledge text")]
    EmptyKnowledgeBase,

    #[error("knowledge id {id} out of range 1..={size}")]
    KnowledgeIdOutOfRange { id: usize, size: usize },

    #[error("knowledge missing from the knowledge base for instances: {}", .0.join(", "))]
    MissingKnowledge(Vec<String>),

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("language input overflow: question and candidate need {needed} tokens but the limit is {limit}")]
    SequenceOverflow { needed: usize, limit: usize },

    #[error("dimension mismatch{}: expected {expected}, got {actual}", context_suffix(.context))]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("predictions do not cover the split: missing [{}], extra [{}]", .missing.join(", "), .extra.join(", "))]
    Coverage {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("split `{0}` contains no instances")]
    EmptySplit(String),

    #[error("instance {0} is not knowledge-decidable")]
    NotDecidable(String),

    #[error("instance {0} is not recorded in the ground-truth ledger")]
    NotInLedger(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("instance {id}: {source}")]
    Instance {
        id: String,
        #[source]
        source: Box<Error>,
    },
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_instance(self, id: &str) -> Self {
        Error::Instance {
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}
