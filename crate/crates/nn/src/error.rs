use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {stage} for batch index {batch_index}")]
    NonFinite { stage: &'static str, batch_index: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
}
