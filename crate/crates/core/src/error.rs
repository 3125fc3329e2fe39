use thiserror::Error;

pub type Result<T, E = OmsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OmsError {
    #[error("theta[{index}] = {value} lies outside the parameter box [{lower}, {upper}]")]
    Domain {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("observation from source {source_index} lacks variable `{variable}` required by moment row {row}")]
    Schema {
        source_index: usize,
        variable: String,
        row: usize,
    },

    #[error("invalid observation: {0}")]
    Observation(String),

    #[error("target functional has a pole at theta = {theta:?}")]
    Pole { theta: Vec<f64> },

    #[error("history is empty")]
    EmptyHistory,

    #[error("moment row {row} was never observed; the parameter is under-identified")]
    UnderIdentified { row: usize },

    #[error("estimation needs at least {needed} records, history has {have}")]
    TooFewRecords { needed: usize, have: usize },

    #[error("objective is infinite over the whole simplex")]
    DegenerateObjective,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input at row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("episode with seed {seed} failed: {cause}")]
    Episode { seed: u64, cause: Box<OmsError> },

    #[error("i/o error: {0}")]
    Io(String),
}

impl OmsError {
    pub fn config(msg: impl Into<String>) -> Self {
        OmsError::Config(msg.into())
    }

    /// Attaches the episode seed, leaving already-wrapped errors alone.
    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            e @ OmsError::Episode { .. } => e,
            other => OmsError::Episode {
                seed,
                cause: Box::new(other),
            },
        }
    }
}

impl From<std::io::Error> for OmsError {
    fn from(e: std::io::Error) -> Self {
        OmsError::Io(e.to_string())
    }
}

impl From<csv::Error> for OmsError {
    fn from(e: csv::Error) -> Self {
        OmsError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for OmsError {
    fn from(e: serde_json::Error) -> Self {
        OmsError::Io(e.to_string())
    }
}
