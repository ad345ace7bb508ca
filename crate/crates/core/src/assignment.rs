//! Thresholds and per-block precision decisions.
//!
//! A threshold is the `R`-quantile (nearest rank) of a pool of impact
//! scores. With a local scope each tensor gets its own pool; with a global
//! scope one pool spans every tensor of a domain, so sensitive layers keep
//! more FP8 blocks than insensitive ones. Weights and activations are always
//! calibrated separately.
//!
//! A block is stored in FP8 iff its score is strictly greater than the
//! threshold, so at least a fraction `R` of the calibration pool stays NVFP4.

use serde::{Deserialize, Serialize};

use crate::blockquant::{
    dynmax_scale, quantize_fp8_block, quantize_nvfp4, Precision, QuantBlock, QuantizedTensor,
};
use crate::clipping::ClipMode;
use crate::sensitivity::{
    error_delta, impact_fisher, score_tensor, FisherKind, FisherMap, ScoredBlock, Sensitivity,
};
use crate::{Error, Result, Tensor, BLOCK_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Weights,
    Activations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub value: f64,
    pub scope: Scope,
    pub domain: Domain,
    /// Target NVFP4 fraction the threshold was calibrated for.
    pub ratio: f64,
}

impl Threshold {
    /// A threshold that keeps every block in NVFP4.
    pub fn all_low(domain: Domain) -> Self {
        Threshold {
            value: f64::INFINITY,
            scope: Scope::Global,
            domain,
            ratio: 1.0,
        }
    }
}

/// Result of a calibration: one threshold per pool.
#[derive(Debug, Clone, PartialEq)]
pub enum Thresholds {
    Global(Threshold),
    Local(Vec<Threshold>),
}

impl Thresholds {
    /// Threshold that applies to tensor `index` of the calibration set.
    pub fn for_tensor(&self, index: usize) -> &Threshold {
        match self {
            Thresholds::Global(t) => t,
            Thresholds::Local(ts) => &ts[index],
        }
    }
}

/// Per-block precision bits, aligned with a tensor's block order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionAssignment {
    pub bits: Vec<bool>,
    pub threshold: Threshold,
}

impl PrecisionAssignment {
    pub fn fp8_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn fp8_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.fp8_count() as f64 / self.bits.len() as f64
        }
    }

    pub fn precision(&self, index: usize) -> Precision {
        Precision::from_bit(self.bits[index])
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..=1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::Ratio(ratio))
    }
}

/// Nearest-rank quantile: the element at 1-based rank `ceil(R * n)` of the
/// ascending sort, with `R = 0` giving the minimum.
pub fn percentile_nearest_rank(scores: &[f64], ratio: f64) -> Result<f64> {
    check_ratio(ratio)?;
    if scores.is_empty() {
        return Err(Error::Empty("score pool"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(sorted[nearest_rank(ratio, n) - 1])
}

/// 1-based rank in `1..=n`. `R * n` products that land within rounding
/// noise of an integer (0.9 * 100 = 90.00000000000001) snap to it.
fn nearest_rank(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let snapped = x.round();
    let rank = if (x - snapped).abs() <= 1e-9 * x.max(1.0) {
        snapped
    } else {
        x.ceil()
    };
    (rank as usize).clamp(1, n)
}

/// Thresholds from precomputed score pools, one pool per tensor.
pub fn thresholds_from_pools(
    pools: &[&[f64]],
    ratio: f64,
    scope: Scope,
    domain: Domain,
) -> Result<Thresholds> {
    check_ratio(ratio)?;
    if pools.is_empty() {
        return Err(Error::Empty("calibration tensors"));
    }
    let make = |value| Threshold {
        value,
        scope,
        domain,
        ratio,
    };
    match scope {
        Scope::Global => {
            let all: Vec<f64> = pools.iter().flat_map(|p| p.iter().copied()).collect();
            Ok(Thresholds::Global(make(percentile_nearest_rank(
                &all, ratio,
            )?)))
        }
        Scope::Local => pools
            .iter()
            .map(|p| percentile_nearest_rank(p, ratio).map(make))
            .collect::<Result<Vec<_>>>()
            .map(Thresholds::Local),
    }
}

/// One tensor taking part in threshold calibration.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationInput<'a> {
    pub tensor: &'a Tensor,
    pub sensitivity: Sensitivity<'a>,
    /// FP8 per-tensor scale; defaults to `amax / 448` of the tensor.
    pub fp8_scale: Option<f32>,
}

/// Scores every block of every input and returns the calibrated thresholds
/// together with the per-tensor score pools.
pub fn calibrate_threshold(
    inputs: &[CalibrationInput<'_>],
    ratio: f64,
    scope: Scope,
    domain: Domain,
    clip: ClipMode,
) -> Result<(Thresholds, Vec<Vec<f64>>)> {
    check_ratio(ratio)?;
    let clip = match domain {
        Domain::Weights => clip,
        // activations are quantized online, where only dynmax is available
        Domain::Activations => ClipMode::Dynmax,
    };
    let pools = inputs
        .iter()
        .map(|inp| {
            inp.tensor.ensure_finite()?;
            let scale = match inp.fp8_scale {
                Some(s) => s,
                None => crate::blockquant::fp8_tensor_scale(inp.tensor.data())?,
            };
            let scored = score_tensor(inp.tensor, inp.sensitivity, clip, scale)?;
            Ok(scored.iter().map(|b| b.score).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = pools.iter().map(Vec::as_slice).collect();
    let t = thresholds_from_pools(&refs, ratio, scope, domain)?;
    Ok((t, pools))
}

/// FP8 iff `score > threshold`.
pub fn assign_precision(scores: &[f64], threshold: &Threshold) -> PrecisionAssignment {
    PrecisionAssignment {
        bits: scores.iter().map(|s| *s > threshold.value).collect(),
        threshold: *threshold,
    }
}

/// Assembles a quantized tensor from blocks scored both ways.
pub fn build_quantized(
    rows: usize,
    cols: usize,
    fp8_scale: f32,
    scored: &[ScoredBlock],
    assignment: &PrecisionAssignment,
) -> Result<QuantizedTensor> {
    if scored.len() != assignment.bits.len() {
        return Err(Error::Shape(format!(
            "{} scored blocks, {} precision bits",
            scored.len(),
            assignment.bits.len()
        )));
    }
    let blocks = scored
        .iter()
        .zip(&assignment.bits)
        .map(|(b, &fp8)| {
            if fp8 {
                QuantBlock::Fp8(b.high)
            } else {
                QuantBlock::Nvfp4(b.low)
            }
        })
        .collect();
    QuantizedTensor::new(rows, cols, fp8_scale, blocks)
}

/// Offline activation path: score the whole tensor, threshold it, assemble.
pub fn assign_offline(
    act: &Tensor,
    channel_weights: &FisherMap,
    threshold: &Threshold,
    fp8_scale: f32,
) -> Result<(QuantizedTensor, PrecisionAssignment)> {
    act.ensure_finite()?;
    let scored = score_tensor(
        act,
        Sensitivity::Fisher(channel_weights),
        ClipMode::Dynmax,
        fp8_scale,
    )?;
    let scores: Vec<f64> = scored.iter().map(|b| b.score).collect();
    let assignment = assign_precision(&scores, threshold);
    let qt = build_quantized(act.rows(), act.cols(), fp8_scale, &scored, &assignment)?;
    Ok((qt, assignment))
}

/// Streaming activation quantizer, one block at a time, as the
/// post-processing unit does it: dynmax NVFP4 and FP8 candidates, the error
/// delta, a per-channel weighted score, and a compare against the fixed
/// threshold. Only the chosen encoding is kept.
pub fn assign_online(
    act: &Tensor,
    channel_weights: &FisherMap,
    threshold: &Threshold,
    fp8_scale: f32,
) -> Result<(QuantizedTensor, PrecisionAssignment)> {
    if channel_weights.kind() != FisherKind::PerChannel {
        return Err(Error::MissingStats(
            "online quantization needs per-channel weights".into(),
        ));
    }
    let g2 = channel_weights.values();
    if g2.len() != act.cols() {
        return Err(Error::MissingStats(format!(
            "{} channel weights for {} channels",
            g2.len(),
            act.cols()
        )));
    }
    let per_row = act.blocks_per_row()?;
    let mut blocks = Vec::with_capacity(act.rows() * per_row);
    let mut bits = Vec::with_capacity(act.rows() * per_row);
    for row in 0..act.rows() {
        for j in 0..per_row {
            let values = act.block(row * per_row + j);
            let low = quantize_nvfp4(values, dynmax_scale(values))?;
            let high = quantize_fp8_block(values, fp8_scale)?;
            let delta = error_delta(values, &low.dequantize(), &high.dequantize(fp8_scale));
            let score = impact_fisher(&g2[j * BLOCK_SIZE..(j + 1) * BLOCK_SIZE], &delta)?;
            let fp8 = score > threshold.value;
            bits.push(fp8);
            blocks.push(if fp8 {
                QuantBlock::Fp8(high)
            } else {
                QuantBlock::Nvfp4(low)
            });
        }
    }
    let qt = QuantizedTensor::new(act.rows(), act.cols(), fp8_scale, blocks)?;
    Ok((
        qt,
        PrecisionAssignment {
            bits,
            threshold: *threshold,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn thr(value: f64) -> Threshold {
        Threshold {
            value,
            scope: Scope::Global,
            domain: Domain::Activations,
            ratio: 0.9,
        }
    }

    #[test]
    fn percentile_examples() {
        let s: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(percentile_nearest_rank(&s, 0.9).unwrap(), 90.0);
        assert_eq!(percentile_nearest_rank(&s, 1.0).unwrap(), 100.0);
        assert_eq!(percentile_nearest_rank(&s, 0.0).unwrap(), 1.0);
        assert_eq!(percentile_nearest_rank(&s, 0.905).unwrap(), 91.0);
        assert_eq!(percentile_nearest_rank(&[7.5], 0.3).unwrap(), 7.5);
        assert!(percentile_nearest_rank(&[], 0.5).is_err());
        assert!(percentile_nearest_rank(&[1.0], 1.5).is_err());
    }

    #[test]
    fn nearest_rank_snaps_products() {
        for n in 1..2000usize {
            for pct in [70usize, 80, 90] {
                let exact = (pct * n).div_ceil(100);
                assert_eq!(
                    nearest_rank(pct as f64 / 100.0, n),
                    exact.max(1),
                    "n={n} R={pct}"
                );
            }
        }
    }

    #[test]
    fn global_versus_local_pools() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let g = thresholds_from_pools(&[&a, &b], 0.5, Scope::Global, Domain::Weights).unwrap();
        assert_eq!(g.for_tensor(0).value, 2.0);
        assert_eq!(assign_precision(&a, g.for_tensor(0)).fp8_count(), 0);
        assert_eq!(assign_precision(&b, g.for_tensor(1)).fp8_count(), 2);

        let l = thresholds_from_pools(&[&a, &b], 0.5, Scope::Local, Domain::Weights).unwrap();
        assert_eq!(
            assign_precision(&a, l.for_tensor(0)).bits,
            vec![false, true]
        );
        assert_eq!(
            assign_precision(&b, l.for_tensor(1)).bits,
            vec![false, true]
        );

        let top = thresholds_from_pools(&[&a, &b], 1.0, Scope::Global, Domain::Weights).unwrap();
        assert_eq!(assign_precision(&b, top.for_tensor(0)).fp8_count(), 0);
    }

    #[test]
    fn assign_examples() {
        assert_eq!(
            assign_precision(&[1.0, 2.0, 3.0], &thr(2.0)).bits,
            vec![false, false, true]
        );
        assert_eq!(assign_precision(&[1.0, 2.0, 3.0], &thr(3.0)).fp8_count(), 0);
        assert_eq!(assign_precision(&[1.0, 2.0, 3.0], &thr(0.0)).fp8_count(), 3);
    }

    fn random_act(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| {
                let v: f32 = rng.gen_range(-1.0..1.0);
                if rng.gen_bool(0.02) {
                    v * 50.0
                } else {
                    v
                }
            })
            .collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    #[test]
    fn online_all_zero_is_low() {
        let act = Tensor::zeros(3, 32);
        let g2 = FisherMap::per_channel(vec![1.0; 32]).unwrap();
        let (qt, a) = assign_online(&act, &g2, &thr(1e-9), 1.0).unwrap();
        assert_eq!(a.fp8_count(), 0);
        assert_eq!(qt.format_counts(), (6, 0));
    }

    #[test]
    fn online_outlier_block_goes_high() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut act = random_act(&mut rng, 4, 32);
        for v in act.data_mut().iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        // channel 20 is sensitive; plant an outlier there in row 2
        let mut g2 = vec![0.01f32; 32];
        g2[20] = 100.0;
        act.data_mut()[2 * 32 + 20] = 37.0;
        let g2 = FisherMap::per_channel(g2).unwrap();
        let scale = act.amax() / 448.0;
        let scored = score_tensor(&act, Sensitivity::Fisher(&g2), ClipMode::Dynmax, scale).unwrap();
        let target = 2 * 2 + 1;
        let others = scored
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != target)
            .map(|(_, b)| b.score)
            .fold(0.0f64, f64::max);
        assert!(scored[target].score > others);
        let (_, a) = assign_online(&act, &g2, &thr(others), scale).unwrap();
        let fp8: Vec<usize> = a
            .bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(fp8, vec![target]);
    }

    #[test]
    fn online_rejects_missing_stats() {
        let act = Tensor::zeros(1, 32);
        let short = FisherMap::per_channel(vec![1.0; 16]).unwrap();
        assert!(matches!(
            assign_online(&act, &short, &thr(0.0), 1.0),
            Err(Error::MissingStats(_))
        ));
        let elem = FisherMap::per_element(1, 32, vec![1.0; 32]).unwrap();
        assert!(matches!(
            assign_online(&act, &elem, &thr(0.0), 1.0),
            Err(Error::MissingStats(_))
        ));
    }

    #[test]
    fn online_matches_offline() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let act = random_act(&mut rng, 5, 48);
            let g2 =
                FisherMap::per_channel((0..48).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap();
            let scale = act.amax() / 448.0;
            let t = thr(rng.gen_range(0.0..0.01));
            let on = assign_online(&act, &g2, &t, scale).unwrap();
            let off = assign_offline(&act, &g2, &t, scale).unwrap();
            assert_eq!(on, off);
        }
    }

    proptest! {
        #[test]
        fn coverage_bounds(scores in prop::collection::vec(0.0f64..10.0, 1..400), pct in 0usize..=100) {
            let r = pct as f64 / 100.0;
            let t = thresholds_from_pools(&[&scores], r, Scope::Global, Domain::Weights).unwrap();
            let a = assign_precision(&scores, t.for_tensor(0));
            let n = scores.len() as f64;
            let fp4 = 1.0 - a.fp8_fraction();
            let ties = scores.iter().filter(|s| **s == t.for_tensor(0).value).count() as f64;
            prop_assert!(fp4 + 1e-12 >= r);
            prop_assert!(fp4 <= r + ties / n + 1e-12);
        }

        #[test]
        fn single_layer_global_equals_local(scores in prop::collection::vec(0.0f64..10.0, 1..200), r in 0.0f64..=1.0) {
            let g = thresholds_from_pools(&[&scores], r, Scope::Global, Domain::Weights).unwrap();
            let l = thresholds_from_pools(&[&scores], r, Scope::Local, Domain::Weights).unwrap();
            prop_assert_eq!(g.for_tensor(0).value, l.for_tensor(0).value);
        }
    }
}
