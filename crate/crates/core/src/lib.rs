//! Point-and-copy over image patches.
//!
//! A small causal transformer reads an image as a row of patch vectors
//! followed by text. At every step it scores the vocabulary and the patches
//! of the current image in one softmax. Choosing a patch copies its vector
//! back into the input stream.

pub mod analysis;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod pointer;
pub mod train;

pub use error::{Error, Result};
pub use model::{Element, MixedSequence, Model, ModelConfig};
pub use pointer::{AugLogits, AugToken, Policy, ZLossConfig};
