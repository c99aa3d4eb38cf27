use alloc::string::{String, ToString};

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed corpus: {0}")]
    MalformedCorpus(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("scatter matrix is not positive definite")]
    SingularScatter,
    #[error("degenerate model: {0}")]
    DegenerateModel(String),
    #[error("training diverged at step {step}: {loss} is not finite")]
    Divergence { step: u64, loss: &'static str },
}

impl Error {
    pub(crate) fn shape(
        context: impl ToString,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context: context.to_string(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
