use std::path::PathBuf;

use crate::model::NeuronId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: malformed record ({field}): {reason}")]
    MalformedRecord {
        path: String,
        line: usize,
        field: String,
        reason: String,
    },
    #[error("prompt on line {line} references unknown relation `{relation_id}`")]
    DanglingPromptRelation { relation_id: String, line: usize },
    #[error("duplicate relation id `{0}`")]
    DuplicateRelationId(String),
    #[error("relation `{relation_id}` has {found} prompts, expected {expected}")]
    PromptCountViolation {
        relation_id: String,
        found: usize,
        expected: usize,
    },
    #[error("no control prompts outside category {0}")]
    NoControlAvailable(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("override targets {neuron} outside a model with {n_layers} layers of width {d_ff}")]
    OverrideOutOfBounds {
        neuron: NeuronId,
        n_layers: usize,
        d_ff: usize,
    },
    #[error("invalid override: {0}")]
    InvalidOverride(String),
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("sequence has no [MASK] position")]
    NoMaskPosition,
    #[error("answer `{0}` is not a single in-vocabulary token")]
    AnswerNotInVocab(String),
    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("synthetic corpus needs {required} distinct tokens but the vocabulary budget is {available}")]
    VocabTooSmall { required: usize, available: usize },
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("invalid attribution config: {0}")]
    InvalidAttributionConfig(String),
    #[error("invalid selection config: {0}")]
    InvalidSelectionConfig(String),
    #[error("need at least {needed} neuron sets, got {got}")]
    TooFewSets { needed: usize, got: usize },
    #[error("need at least {needed} relations, got {got}")]
    TooFewRelations { needed: usize, got: usize },

    #[error("prompt set is empty")]
    EmptyPromptSet,
    #[error("amplification factor must be >= 1, got {0}")]
    InvalidFactor(f64),

    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("input is empty")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("input is constant; rank correlation undefined")]
    ConstantInput,
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("non-finite value in input")]
    NonFiniteInput,

    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
