//! NVFP4 and FP8 block quantization.
//!
//! An NVFP4 block holds sixteen E2M1 codes and one E4M3 scale; element `i`
//! reconstructs to `decode_fp4(codes[i]) * decode_fp8(scale)`. An FP8 block
//! holds sixteen E4M3 codes that share the owning tensor's `f32` scale.

use crate::numerics::{decode_fp4, decode_fp8, encode_fp4, encode_fp8, Fp4Code, Fp8Code};
use crate::numerics::{FP4_MAX, FP8_MAX};
use crate::{Block, Error, Result, Tensor, BLOCK_SIZE};

/// Per-block precision, stored as one metadata bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    /// Metadata bit 0.
    Nvfp4,
    /// Metadata bit 1.
    Fp8,
}

impl Precision {
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Precision::Fp8
        } else {
            Precision::Nvfp4
        }
    }

    pub fn bit(self) -> bool {
        self == Precision::Fp8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NvFp4Block {
    pub codes: [Fp4Code; BLOCK_SIZE],
    pub scale: Fp8Code,
}

impl NvFp4Block {
    pub fn dequantize(&self) -> Block {
        let s = decode_fp8(self.scale);
        self.codes.map(|c| decode_fp4(c) * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fp8Block {
    pub codes: [Fp8Code; BLOCK_SIZE],
}

impl Fp8Block {
    pub fn dequantize(&self, tensor_scale: f32) -> Block {
        self.codes.map(|c| decode_fp8(c) * tensor_scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantBlock {
    Nvfp4(NvFp4Block),
    Fp8(Fp8Block),
}

impl QuantBlock {
    pub fn precision(&self) -> Precision {
        match self {
            QuantBlock::Nvfp4(_) => Precision::Nvfp4,
            QuantBlock::Fp8(_) => Precision::Fp8,
        }
    }

    pub fn dequantize(&self, tensor_scale: f32) -> Block {
        match self {
            QuantBlock::Nvfp4(b) => b.dequantize(),
            QuantBlock::Fp8(b) => b.dequantize(tensor_scale),
        }
    }
}

/// A row-major sequence of tagged blocks.
///
/// The metadata bitmap is not stored separately: each block's tag is its
/// precision bit, so the two can never disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    fp8_scale: f32,
    blocks: Vec<QuantBlock>,
}

impl QuantizedTensor {
    pub fn new(rows: usize, cols: usize, fp8_scale: f32, blocks: Vec<QuantBlock>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "empty {rows}x{cols} quantized tensor"
            )));
        }
        if !cols.is_multiple_of(BLOCK_SIZE) {
            return Err(Error::Misaligned(cols));
        }
        if !(fp8_scale.is_finite() && fp8_scale > 0.0) {
            return Err(Error::InvalidScale(fp8_scale));
        }
        let expected = rows * cols / BLOCK_SIZE;
        if blocks.len() != expected {
            return Err(Error::Shape(format!(
                "{rows}x{cols} tensor needs {expected} blocks, got {}",
                blocks.len()
            )));
        }
        for b in &blocks {
            if let QuantBlock::Nvfp4(b) = b {
                check_scale(b.scale)?;
            }
        }
        Ok(Self {
            rows,
            cols,
            fp8_scale,
            blocks,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn blocks_per_row(&self) -> usize {
        self.cols / BLOCK_SIZE
    }

    pub fn fp8_scale(&self) -> f32 {
        self.fp8_scale
    }

    pub fn blocks(&self) -> &[QuantBlock] {
        &self.blocks
    }

    pub fn block(&self, row: usize, index: usize) -> &QuantBlock {
        &self.blocks[row * self.blocks_per_row() + index]
    }

    /// Metadata bits in block order (`true` = FP8).
    pub fn meta(&self) -> Vec<bool> {
        self.blocks.iter().map(|b| b.precision().bit()).collect()
    }

    /// `(nvfp4_blocks, fp8_blocks)`.
    pub fn format_counts(&self) -> (usize, usize) {
        let fp8 = self
            .blocks
            .iter()
            .filter(|b| b.precision() == Precision::Fp8)
            .count();
        (self.blocks.len() - fp8, fp8)
    }
}

fn check_scale(scale: Fp8Code) -> Result<f32> {
    let s = decode_fp8(scale);
    if s.is_nan() || s <= 0.0 {
        return Err(Error::InvalidScale(s));
    }
    Ok(s)
}

/// E4M3 scale mapping the block's largest magnitude onto the FP4 maximum.
///
/// An all-zero block gets scale 1.0. A nonzero block whose `amax / 6`
/// underflows E4M3 gets the smallest positive scale so that no block ever
/// carries a zero scale.
pub fn dynmax_scale(b: &[f32]) -> Fp8Code {
    let amax = b.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if amax == 0.0 || !amax.is_finite() {
        return Fp8Code::ONE;
    }
    let code = encode_fp8(amax as f64 / FP4_MAX as f64).expect("finite amax");
    if decode_fp8(code) == 0.0 {
        Fp8Code::MIN_POSITIVE
    } else {
        code
    }
}

pub fn quantize_nvfp4(b: &Block, scale: Fp8Code) -> Result<NvFp4Block> {
    let s = check_scale(scale)? as f64;
    let mut codes = [Fp4Code::POS_ZERO; BLOCK_SIZE];
    for (c, &v) in codes.iter_mut().zip(b) {
        *c = encode_fp4(v as f64 / s)?;
    }
    Ok(NvFp4Block { codes, scale })
}

/// Per-tensor FP8 scale, `amax / 448`, or 1.0 for an all-zero tensor.
pub fn fp8_tensor_scale(values: &[f32]) -> Result<f32> {
    let mut amax = 0.0f32;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite(v as f64));
        }
        amax = amax.max(v.abs());
    }
    let scale = amax / FP8_MAX;
    Ok(if scale > 0.0 { scale } else { 1.0 })
}

pub fn quantize_fp8_block(b: &Block, tensor_scale: f32) -> Result<Fp8Block> {
    if !(tensor_scale.is_finite() && tensor_scale > 0.0) {
        return Err(Error::InvalidScale(tensor_scale));
    }
    let s = tensor_scale as f64;
    let mut codes = [Fp8Code::POS_ZERO; BLOCK_SIZE];
    for (c, &v) in codes.iter_mut().zip(b) {
        *c = encode_fp8(v as f64 / s)?;
    }
    Ok(Fp8Block { codes })
}

/// Quantizes every element of `t` to E4M3 with one per-tensor scale.
pub fn quantize_fp8_tensor(t: &Tensor) -> Result<(Vec<Fp8Code>, f32)> {
    let scale = fp8_tensor_scale(t.data())?;
    let s = scale as f64;
    let codes = t
        .data()
        .iter()
        .map(|&v| encode_fp8(v as f64 / s))
        .collect::<Result<Vec<_>>>()?;
    Ok((codes, scale))
}

/// Quantization error `reconstructed - v`.
pub fn quant_error(v: f32, reconstructed: f32) -> f64 {
    reconstructed as f64 - v as f64
}

pub fn dequantize(qt: &QuantizedTensor) -> Tensor {
    let mut data = Vec::with_capacity(qt.rows * qt.cols);
    for b in &qt.blocks {
        data.extend_from_slice(&b.dequantize(qt.fp8_scale));
    }
    Tensor::new(qt.rows, qt.cols, data).expect("block count checked at construction")
}

/// Quantizes a whole tensor to NVFP4 with dynamic-max scales.
pub fn quantize_tensor_nvfp4(t: &Tensor) -> Result<QuantizedTensor> {
    let n = t.block_count()?;
    let blocks = (0..n)
        .map(|i| {
            let b = t.block(i);
            quantize_nvfp4(b, dynmax_scale(b)).map(QuantBlock::Nvfp4)
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedTensor::new(t.rows(), t.cols(), fp8_tensor_scale(t.data())?, blocks)
}

/// Quantizes a whole tensor to FP8 blocks with one per-tensor scale.
pub fn quantize_tensor_fp8(t: &Tensor) -> Result<QuantizedTensor> {
    let n = t.block_count()?;
    let scale = fp8_tensor_scale(t.data())?;
    let blocks = (0..n)
        .map(|i| quantize_fp8_block(t.block(i), scale).map(QuantBlock::Fp8))
        .collect::<Result<Vec<_>>>()?;
    QuantizedTensor::new(t.rows(), t.cols(), scale, blocks)
}
