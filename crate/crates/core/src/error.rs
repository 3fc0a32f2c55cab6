use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("degenerate row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    #[error("target index {index} out of range for {classes} classes (row {row})")]
    Index {
        row: usize,
        index: usize,
        classes: usize,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("token id {id} outside vocabulary of size {size}")]
    Vocab { id: u32, size: usize },

    #[error("LoRA rank {rank} exceeds min(d_in={d_in}, d_out={d_out})")]
    Rank {
        rank: usize,
        d_in: usize,
        d_out: usize,
    },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("schema mismatch for {what}: expected version {expected}, found {found}")]
    Schema {
        what: String,
        expected: u32,
        found: u32,
    },

    #[error("stage error: {0}")]
    Stage(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
