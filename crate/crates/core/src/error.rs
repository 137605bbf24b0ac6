use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid logits: {0}")]
    InvalidLogits(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("invalid token {token} (vocab size {vocab})")]
    InvalidToken { token: usize, vocab: usize },
    #[error("prefix of length {len} has no next-token distribution (max_len {max_len})")]
    PrefixExhausted { len: usize, max_len: usize },
    #[error("temperature {0} is below 1e-6; use greedy decoding instead")]
    TemperatureTooLow(f64),
    #[error("update produced a non-finite logit")]
    NumericOverflow,
    #[error("checkpoint corrupt at line {line}: {reason}")]
    CheckpointCorrupt { line: usize, reason: String },
    #[error("not a squeeze setting: {0}")]
    NotASqueezeSetting(String),
    #[error("enumeration space too large: {size} > {bound}")]
    SpaceTooLarge { size: u128, bound: u128 },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("task generation failed: {0}")]
    GenerationFailed(String),
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("no trainable groups after filtering")]
    NoTrainableGroups,
    #[error("group has only one reward class")]
    OneSidedGroup,
    #[error("invalid objective configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed rollout group: {0}")]
    MalformedGroup(String),
    #[error("no rollouts for prompt {0}")]
    NoRollouts(u32),
    #[error("demonstration set is empty")]
    NoDemos,
    #[error("k = {k} exceeds n = {n}")]
    KExceedsN { n: usize, k: usize },
    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),
    #[error("config error: {0}")]
    Config(String),
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
