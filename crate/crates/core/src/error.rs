//! Errors for the model stack (LM, ViT, bridge, adapter, training, data).

use std::fmt;

use crate::tensor::TensorError;

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    Tensor(TensorError),
    /// A character outside the configured alphabet, named.
    OutOfAlphabet(char),
    /// Input longer than the model's maximum sequence length.
    SequenceTooLong { len: usize, max: usize },
    EmptyPrompt,
    /// generate() asked for zero new tokens.
    ZeroMaxNew,
    /// Image dims not divisible by the patch size.
    PatchSize { h: usize, w: usize, p: usize },
    /// Attention-map extraction needs a square patch grid.
    GridNotSquare { n: usize },
    LayerOutOfRange { layer: usize, layers: usize },
    /// A training sample supervises no positions.
    NoAnswerPositions,
    /// Training loss became non-finite at the given optimizer step.
    Diverged { step: u64 },
    /// Named configuration contract violation.
    Config { what: String },
    /// Malformed vocab file.
    VocabFile { line: usize, what: String },
    /// Malformed dataset record.
    DatasetRecord { line: usize, what: String },
    /// Non-finite value where finite input is required.
    NonFinite { what: String },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::OutOfAlphabet(c) => {
                write!(f, "character {c:?} is not in the vocabulary alphabet")
            }
            ModelError::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds max_seq_len {max}")
            }
            ModelError::EmptyPrompt => write!(f, "prompt must be nonempty"),
            ModelError::ZeroMaxNew => write!(f, "max_new must be positive"),
            ModelError::PatchSize { h, w, p } => {
                write!(f, "image {h}x{w} is not divisible by patch size {p}")
            }
            ModelError::GridNotSquare { n } => {
                write!(f, "patch count {n} is not a perfect square")
            }
            ModelError::LayerOutOfRange { layer, layers } => {
                write!(f, "layer {layer} out of range for {layers}-layer encoder")
            }
            ModelError::NoAnswerPositions => write!(f, "sample has no answer positions"),
            ModelError::Diverged { step } => {
                write!(f, "training loss became non-finite at step {step}")
            }
            ModelError::Config { what } => write!(f, "invalid configuration: {what}"),
            ModelError::VocabFile { line, what } => {
                write!(f, "bad vocab file at line {line}: {what}")
            }
            ModelError::DatasetRecord { line, what } => {
                write!(f, "bad dataset record at line {line}: {what}")
            }
            ModelError::NonFinite { what } => write!(f, "non-finite value in {what}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}
