//! Fine-grained mixed-precision (FGMP) quantization.
//!
//! Weights and activations are split into 16-element blocks along the
//! dot-product dimension. Each block is stored either as NVFP4 (E2M1 codes
//! with an E4M3 per-block scale) or as plain FP8 (E4M3 codes sharing one
//! per-tensor scale), and a single metadata bit per block records the choice.
//! Blocks whose low-precision error would most perturb the model loss, as
//! measured by Fisher-weighted squared error, are kept in FP8.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: bit-exact E2M1 / E4M3 codecs.
//! - [`blockquant`]: NVFP4 and FP8 block quantization.
//! - [`sensitivity`]: Fisher maps and block impact scores.
//! - [`assignment`]: percentile thresholds and per-block precision decisions,
//!   including the online (post-processing unit) path for activations.
//! - [`clipping`]: sensitivity-weighted NVFP4 scale search and the weight
//!   quantization pipeline.
//! - [`simkernel`]: value-level simulation of the mixed-precision dot-product
//!   datapath.
//! - [`costmodel`]: memory and energy accounting.
//! - [`format`]: the `.fgt` / `.fgq` binary file formats.
//!
//! ```
//! use fgmp::numerics::{decode_fp4, encode_fp4};
//!
//! // 2.5 sits halfway between 2 and 3; the even mantissa wins.
//! let code = encode_fp4(2.5).unwrap();
//! assert_eq!(decode_fp4(code), 2.0);
//! ```

pub mod assignment;
pub mod blockquant;
pub mod clipping;
pub mod costmodel;
mod error;
pub mod format;
pub mod numerics;
pub mod sensitivity;
pub mod simkernel;
mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Number of elements in one quantization block.
pub const BLOCK_SIZE: usize = 16;

/// One block of values along the dot-product dimension.
pub type Block = [f32; BLOCK_SIZE];
