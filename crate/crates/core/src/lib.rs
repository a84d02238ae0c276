//! Desk-scale prompt-aware multimodal transformer laboratory.
//!
//! The crate builds a small vision-language stack from scratch on a
//! reverse-mode autodiff tape: a ViT whose class slot accepts either a
//! learned embedding or a prompt-derived vector, a character-level decoder
//! LM, the text-to-image bridge between them, visual-token adapters with
//! compression, a two-stage training harness, and a synthetic
//! confusion-mode benchmark.

pub mod gradcheck;
pub mod math;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use tape::{Tape, TensorId};
pub use tensor::{Tensor, TensorError, TensorResult};
