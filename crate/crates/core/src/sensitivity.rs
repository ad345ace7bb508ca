//! Sensitivity data and block impact scores.
//!
//! A block's impact score measures how much worse it gets when stored as
//! NVFP4 instead of FP8. With `delta_i` the per-element increase in
//! quantization error, the three supported policies are
//!
//! | policy   | score                         | weight source                      |
//! |----------|-------------------------------|------------------------------------|
//! | `fisher` | `sum g2_i * delta_i^2`        | averaged squared gradients          |
//! | `qe`     | `sum delta_i^2`               | none                               |
//! | `oe`     | `sum avg(Q_i^2) * delta_i^2`  | channel magnitudes of the other operand |
//!
//! Sums run from element 0 to 15 and accumulate in `f64`, so scores are
//! reproducible bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockquant::{dynmax_scale, quantize_fp8_block, quantize_nvfp4, Fp8Block, NvFp4Block};
use crate::clipping::{sw_clip_scale, ClipMode};
use crate::{Block, Error, Result, Tensor, BLOCK_SIZE};

/// Per-block increase in error, `delta_low - delta_high`.
pub type ErrorDelta = [f64; BLOCK_SIZE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Fisher,
    Qe,
    Oe,
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Policy::Fisher => "fisher",
            Policy::Qe => "qe",
            Policy::Oe => "oe",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherKind {
    /// One entry per weight element, shaped like the tensor.
    PerElement { rows: usize, cols: usize },
    /// One entry per input channel (dot-product index).
    PerChannel,
}

/// Averaged squared gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMap {
    kind: FisherKind,
    values: Vec<f32>,
}

impl FisherMap {
    pub fn per_element(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(values.len()) {
            return Err(Error::Shape(format!(
                "per-element fisher for {rows}x{cols} has {} entries",
                values.len()
            )));
        }
        check_nonnegative(&values)?;
        Ok(Self {
            kind: FisherKind::PerElement { rows, cols },
            values,
        })
    }

    pub fn per_channel(values: Vec<f32>) -> Result<Self> {
        check_nonnegative(&values)?;
        Ok(Self {
            kind: FisherKind::PerChannel,
            values,
        })
    }

    pub fn kind(&self) -> FisherKind {
        self.kind
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    fn check_against(&self, t: &Tensor) -> Result<()> {
        match self.kind {
            FisherKind::PerElement { rows, cols } if rows == t.rows() && cols == t.cols() => Ok(()),
            FisherKind::PerChannel if self.values.len() == t.cols() => Ok(()),
            FisherKind::PerElement { rows, cols } => Err(Error::Shape(format!(
                "per-element fisher is {rows}x{cols}, tensor is {}x{}",
                t.rows(),
                t.cols()
            ))),
            FisherKind::PerChannel => Err(Error::Shape(format!(
                "per-channel fisher has {} channels, tensor has {} columns",
                self.values.len(),
                t.cols()
            ))),
        }
    }

    /// The 16 weights for block `index` (row-major block order) of a tensor
    /// with `cols` columns.
    fn block_weights(&self, cols: usize, index: usize) -> &[f32] {
        let per_row = cols / BLOCK_SIZE;
        let start = match self.kind {
            FisherKind::PerElement { .. } => index * BLOCK_SIZE,
            FisherKind::PerChannel => (index % per_row) * BLOCK_SIZE,
        };
        &self.values[start..start + BLOCK_SIZE]
    }
}

impl From<ChannelMagnitudeMap> for FisherMap {
    /// Reuses channel magnitudes as per-channel weights, which lets the
    /// online path run the output-error policy.
    fn from(m: ChannelMagnitudeMap) -> Self {
        FisherMap {
            kind: FisherKind::PerChannel,
            values: m.values,
        }
    }
}

/// Per-input-channel mean of squared values of the opposing operand.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMagnitudeMap {
    values: Vec<f32>,
}

impl ChannelMagnitudeMap {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        check_nonnegative(&values)?;
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

fn check_nonnegative(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite() || *v < 0.0) {
        Some(index) => Err(Error::NegativeWeight {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// Where a block came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct BlockOrigin {
    pub tensor: usize,
    pub row: usize,
    pub block: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpactScore {
    pub value: f64,
    pub policy: Policy,
    pub origin: BlockOrigin,
}

/// `(low - v) - (high - v)` per element.
pub fn error_delta(b: &Block, low: &Block, high: &Block) -> ErrorDelta {
    std::array::from_fn(|i| {
        let v = b[i] as f64;
        (low[i] as f64 - v) - (high[i] as f64 - v)
    })
}

fn weighted_sum(weights: &[f32], delta: &ErrorDelta) -> Result<f64> {
    if weights.len() != BLOCK_SIZE {
        return Err(Error::Shape(format!(
            "block weights have {} entries, expected {BLOCK_SIZE}",
            weights.len()
        )));
    }
    let mut acc = 0.0f64;
    for (i, (&w, &d)) in weights.iter().zip(delta).enumerate() {
        if w.is_nan() || w < 0.0 {
            return Err(Error::NegativeWeight { index: i, value: w });
        }
        acc += w as f64 * (d * d);
    }
    Ok(acc)
}

/// Fisher-weighted score, `sum g2_i * delta_i^2`.
pub fn impact_fisher(g2: &[f32], delta: &ErrorDelta) -> Result<f64> {
    weighted_sum(g2, delta)
}

/// Unweighted score, `sum delta_i^2`.
pub fn impact_qe(delta: &ErrorDelta) -> f64 {
    let mut acc = 0.0f64;
    for &d in delta {
        acc += d * d;
    }
    acc
}

/// Output-error score, `sum q2_i * delta_i^2`.
pub fn impact_oe(q2: &[f32], delta: &ErrorDelta) -> Result<f64> {
    weighted_sum(q2, delta)
}

/// Per-channel mean of squares over every row of every sample.
pub fn calibrate_channel_stats(samples: &[Tensor]) -> Result<ChannelMagnitudeMap> {
    let first = samples
        .first()
        .ok_or(Error::Empty("calibration sample set"))?;
    let cols = first.cols();
    let mut sums = vec![0.0f64; cols];
    let mut rows = 0usize;
    for s in samples {
        if s.cols() != cols {
            return Err(Error::Shape(format!(
                "calibration samples have {} and {} columns",
                cols,
                s.cols()
            )));
        }
        s.ensure_finite()?;
        for r in 0..s.rows() {
            for (acc, &v) in sums.iter_mut().zip(s.row(r)) {
                *acc += v as f64 * v as f64;
            }
        }
        rows += s.rows();
    }
    if rows == 0 {
        return Err(Error::Empty("calibration rows"));
    }
    ChannelMagnitudeMap::new(sums.into_iter().map(|s| (s / rows as f64) as f32).collect())
}

/// Which sensitivity weights a tensor's blocks are scored with.
#[derive(Debug, Clone, Copy)]
pub enum Sensitivity<'a> {
    Fisher(&'a FisherMap),
    QuantError,
    OutputError(&'a ChannelMagnitudeMap),
}

impl Sensitivity<'_> {
    pub fn policy(&self) -> Policy {
        match self {
            Sensitivity::Fisher(_) => Policy::Fisher,
            Sensitivity::QuantError => Policy::Qe,
            Sensitivity::OutputError(_) => Policy::Oe,
        }
    }

    pub fn check_against(&self, t: &Tensor) -> Result<()> {
        t.blocks_per_row()?;
        match self {
            Sensitivity::Fisher(f) => f.check_against(t),
            Sensitivity::QuantError => Ok(()),
            Sensitivity::OutputError(m) if m.values.len() == t.cols() => Ok(()),
            Sensitivity::OutputError(m) => Err(Error::Shape(format!(
                "channel magnitudes have {} channels, tensor has {} columns",
                m.values.len(),
                t.cols()
            ))),
        }
    }

    /// Weights for block `index`; all ones for the unweighted policy.
    pub fn block_weights(&self, cols: usize, index: usize) -> [f32; BLOCK_SIZE] {
        match self {
            Sensitivity::Fisher(f) => f.block_weights(cols, index).try_into().unwrap(),
            Sensitivity::QuantError => [1.0; BLOCK_SIZE],
            Sensitivity::OutputError(m) => {
                let start = (index % (cols / BLOCK_SIZE)) * BLOCK_SIZE;
                m.values[start..start + BLOCK_SIZE].try_into().unwrap()
            }
        }
    }
}

/// A block quantized both ways, plus its impact score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBlock {
    pub score: f64,
    pub low: NvFp4Block,
    pub high: Fp8Block,
}

/// Scores a single block: NVFP4 with the chosen clipping against FP8 with
/// the tensor scale.
pub fn score_block(
    values: &Block,
    weights: &[f32; BLOCK_SIZE],
    policy: Policy,
    clip: ClipMode,
    fp8_scale: f32,
) -> Result<ScoredBlock> {
    let scale = match clip {
        ClipMode::Dynmax => dynmax_scale(values),
        ClipMode::Sw => sw_clip_scale(values, weights)?,
    };
    let low = quantize_nvfp4(values, scale)?;
    let high = quantize_fp8_block(values, fp8_scale)?;
    let delta = error_delta(values, &low.dequantize(), &high.dequantize(fp8_scale));
    let score = match policy {
        Policy::Fisher => impact_fisher(weights, &delta)?,
        Policy::Qe => impact_qe(&delta),
        Policy::Oe => impact_oe(weights, &delta)?,
    };
    Ok(ScoredBlock { score, low, high })
}

/// Scores every block of `t` in row-major block order.
pub fn score_tensor(
    t: &Tensor,
    sensitivity: Sensitivity<'_>,
    clip: ClipMode,
    fp8_scale: f32,
) -> Result<Vec<ScoredBlock>> {
    sensitivity.check_against(t)?;
    let n = t.block_count()?;
    let policy = sensitivity.policy();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let w = sensitivity.block_weights(t.cols(), i);
            score_block(t.block(i), &w, policy, clip, fp8_scale)
        })
        .collect()
}

/// Scores paired with their block origins.
pub fn impact_scores(
    blocks: &[ScoredBlock],
    policy: Policy,
    tensor: usize,
    cols: usize,
) -> Vec<ImpactScore> {
    let per_row = cols / BLOCK_SIZE;
    blocks
        .iter()
        .enumerate()
        .map(|(i, b)| ImpactScore {
            value: b.score,
            policy,
            origin: BlockOrigin {
                tensor,
                row: i / per_row,
                block: i % per_row,
            },
        })
        .collect()
}
