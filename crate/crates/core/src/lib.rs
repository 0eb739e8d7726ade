//! Segmentation-guided melanoma classification.
//!
//! A U-Net produces a soft lesion mask, the mask is blended over the original
//! image ("the bridge"), and an EfficientNet-B0 classifies the blended image
//! as melanoma or benign. Everything runs on the small reverse-mode tensor
//! engine in [`tensor`].

pub mod bridge;
pub mod cli;
pub mod data;
pub mod effnet;
pub mod error;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
