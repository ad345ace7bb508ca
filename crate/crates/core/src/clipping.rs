//! Sensitivity-weighted clipping for NVFP4 weight blocks.
//!
//! The block scale is an E4M3 value, so the scale search is a finite scan:
//! every positive E4M3 value up to the dynamic-max scale is tried and the one
//! minimizing `sum g2_i * (reconstruct(v, s)_i - v_i)^2` wins. Shrinking the
//! scale clamps large elements but resolves small ones more finely, which pays
//! off when the large elements are insensitive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign_precision, build_quantized, Threshold};
use crate::blockquant::{dynmax_scale, fp8_tensor_scale, quantize_nvfp4, QuantizedTensor};
use crate::numerics::Fp8Code;
use crate::sensitivity::{score_tensor, FisherMap, Sensitivity};
use crate::{Block, Error, Result, Tensor, BLOCK_SIZE};

/// How NVFP4 block scales are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    /// `amax / 6`, rounded to E4M3.
    #[default]
    Dynmax,
    /// Sensitivity-weighted scale search.
    Sw,
}

impl std::fmt::Display for ClipMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClipMode::Dynmax => "dynmax",
            ClipMode::Sw => "sw",
        })
    }
}

/// Candidate scales for a block in ascending order: positive finite E4M3
/// codes from the smallest subnormal up to and including the dynmax code.
pub fn clip_candidates(b: &Block) -> impl Iterator<Item = Fp8Code> {
    let top = dynmax_scale(b).bits();
    (Fp8Code::MIN_POSITIVE.bits()..=top).map(Fp8Code::from_bits)
}

/// Weighted squared reconstruction error of `b` at scale `s`.
pub fn clip_objective(b: &Block, g2: &[f32; BLOCK_SIZE], scale: Fp8Code) -> Result<f64> {
    let recon = quantize_nvfp4(b, scale)?.dequantize();
    let mut acc = 0.0f64;
    for i in 0..BLOCK_SIZE {
        let e = recon[i] as f64 - b[i] as f64;
        acc += g2[i] as f64 * (e * e);
    }
    Ok(acc)
}

/// Scale minimizing the weighted error; ties go to the larger scale.
pub fn sw_clip_scale(b: &Block, g2: &[f32; BLOCK_SIZE]) -> Result<Fp8Code> {
    if let Some(i) = g2.iter().position(|g| g.is_nan() || *g < 0.0) {
        return Err(Error::NegativeWeight {
            index: i,
            value: g2[i],
        });
    }
    let dynmax = dynmax_scale(b);
    if g2.iter().all(|g| *g == 0.0) {
        return Ok(dynmax);
    }
    let mut best: Option<(f64, Fp8Code)> = None;
    for s in clip_candidates(b) {
        let obj = clip_objective(b, g2, s)?;
        match best {
            Some((b_obj, _)) if obj > b_obj => {}
            _ => best = Some((obj, s)),
        }
    }
    Ok(best.map(|(_, s)| s).unwrap_or(dynmax))
}

/// Quantizes a weight tensor: score each block (after clipping), compare
/// against the threshold, and keep the block in FP8 when its score exceeds it.
pub fn quantize_weights_fgmp(
    w: &Tensor,
    fisher: &FisherMap,
    threshold: &Threshold,
    clip: ClipMode,
) -> Result<QuantizedTensor> {
    quantize_tensor_fgmp(w, Sensitivity::Fisher(fisher), threshold, clip, None)
}

/// Policy-generic form of [`quantize_weights_fgmp`]. `fp8_scale` defaults to
/// the tensor's own `amax / 448`.
pub fn quantize_tensor_fgmp(
    t: &Tensor,
    sensitivity: Sensitivity<'_>,
    threshold: &Threshold,
    clip: ClipMode,
    fp8_scale: Option<f32>,
) -> Result<QuantizedTensor> {
    t.ensure_finite()?;
    let scale = match fp8_scale {
        Some(s) => s,
        None => fp8_tensor_scale(t.data())?,
    };
    let scored = score_tensor(t, sensitivity, clip, scale)?;
    let scores: Vec<f64> = scored.par_iter().map(|b| b.score).collect();
    let assignment = assign_precision(&scores, threshold);
    build_quantized(t.rows(), t.cols(), scale, &scored, &assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::{Domain, Scope};
    use crate::blockquant::{dequantize, quantize_fp8_block, quantize_tensor_fp8, QuantBlock};
    use crate::numerics::decode_fp8;
    use crate::sensitivity::{error_delta, impact_fisher};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Full scan with no shortcuts.
    fn scan(b: &Block, g2: &[f32; 16]) -> Fp8Code {
        let mut best = (f64::INFINITY, Fp8Code::ONE);
        for s in clip_candidates(b) {
            let o = clip_objective(b, g2, s).unwrap();
            if o <= best.0 {
                best = (o, s);
            }
        }
        best.1
    }

    fn thr(value: f64) -> Threshold {
        Threshold {
            value,
            scope: Scope::Local,
            domain: Domain::Weights,
            ratio: 0.5,
        }
    }

    #[test]
    fn candidates_end_at_dynmax() {
        let b = [12.0f32; 16];
        let c: Vec<_> = clip_candidates(&b).collect();
        assert_eq!(c.first().copied(), Some(Fp8Code::MIN_POSITIVE));
        assert_eq!(decode_fp8(*c.last().unwrap()), 2.0);
        assert!(c.windows(2).all(|w| decode_fp8(w[0]) < decode_fp8(w[1])));
        assert!(clip_candidates(&[448.0 * 6.0; 16]).count() == 126);
    }

    #[test]
    fn representable_block_keeps_dynmax() {
        let b: Block = [
            0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 0.0, -0.5, -1.0, -1.5, -2.0, -3.0, -4.0, -6.0, 6.0,
        ];
        let s = sw_clip_scale(&b, &[1.0; 16]).unwrap();
        assert_eq!(s, Fp8Code::ONE);
        assert_eq!(clip_objective(&b, &[1.0; 16], s).unwrap(), 0.0);
    }

    #[test]
    fn insensitive_outlier_is_clipped() {
        let mut b = [0.4f32; 16];
        b[0] = 6.0;
        let mut g2 = [1.0f32; 16];
        g2[0] = 0.0;
        let s = sw_clip_scale(&b, &g2).unwrap();
        assert_eq!(s, scan(&b, &g2));
        assert!(decode_fp8(s) < decode_fp8(dynmax_scale(&b)));
        // 0.4 = 4 * 0.1, and 0.1 rounds to an E4M3 scale close enough that
        // the fifteen sensitive values reconstruct better than on the unit grid
        let at_dynmax = clip_objective(&b, &g2, dynmax_scale(&b)).unwrap();
        let at_best = clip_objective(&b, &g2, s).unwrap();
        assert!(at_best < at_dynmax);
    }

    #[test]
    fn zero_sensitivity_returns_dynmax() {
        let b = [3.3f32; 16];
        assert_eq!(sw_clip_scale(&b, &[0.0; 16]).unwrap(), dynmax_scale(&b));
        let mut g2 = [1.0; 16];
        g2[4] = -2.0;
        assert!(sw_clip_scale(&b, &g2).is_err());
    }

    #[test]
    fn matches_full_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let range = 10f32.powf(rng.gen_range(-3.0..3.0));
            let b: Block = std::array::from_fn(|_| rng.gen_range(-range..range));
            let g2: [f32; 16] = std::array::from_fn(|_| {
                if rng.gen_bool(0.2) {
                    0.0
                } else {
                    rng.gen_range(0.0..2.0)
                }
            });
            let s = sw_clip_scale(&b, &g2).unwrap();
            assert_eq!(s, scan(&b, &g2));
            let dm = clip_objective(&b, &g2, dynmax_scale(&b)).unwrap();
            assert!(clip_objective(&b, &g2, s).unwrap() <= dm);
        }
    }

    #[test]
    fn threshold_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let w = Tensor::new(2, 32, data).unwrap();
        let f = FisherMap::per_element(2, 32, (0..64).map(|_| rng.gen_range(0.1..1.0)).collect())
            .unwrap();

        let all8 = quantize_weights_fgmp(&w, &f, &thr(0.0), ClipMode::Sw).unwrap();
        assert_eq!(all8.format_counts(), (0, 4));
        assert_eq!(
            dequantize(&all8),
            dequantize(&quantize_tensor_fp8(&w).unwrap())
        );

        let all4 = quantize_weights_fgmp(&w, &f, &thr(f64::INFINITY), ClipMode::Dynmax).unwrap();
        assert_eq!(all4.format_counts(), (4, 0));

        let bad = FisherMap::per_element(2, 16, vec![1.0; 32]).unwrap();
        assert!(quantize_weights_fgmp(&w, &bad, &thr(0.0), ClipMode::Sw).is_err());
    }

    #[test]
    fn mixed_case_matches_block_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut data: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        data[5] = 9.0;
        data[40] = -7.0;
        let w = Tensor::new(2, 32, data).unwrap();
        let g2v: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let f = FisherMap::per_element(2, 32, g2v.clone()).unwrap();

        // Hand-composed: clip, quantize both ways, Eq.-7 delta, Fisher score.
        let scale = w.amax() / 448.0;
        let mut scores = Vec::new();
        let mut expected = Vec::new();
        for i in 0..4 {
            let b = w.block(i);
            let g: [f32; 16] = g2v[i * 16..i * 16 + 16].try_into().unwrap();
            let low = quantize_nvfp4(b, sw_clip_scale(b, &g).unwrap()).unwrap();
            let high = quantize_fp8_block(b, scale).unwrap();
            let d = error_delta(b, &low.dequantize(), &high.dequantize(scale));
            scores.push(impact_fisher(&g, &d).unwrap());
            expected.push((low, high));
        }
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let t = thr(sorted[1]);
        let q = quantize_weights_fgmp(&w, &f, &t, ClipMode::Sw).unwrap();
        for (i, blk) in q.blocks().iter().enumerate() {
            let want = if scores[i] > t.value {
                QuantBlock::Fp8(expected[i].1)
            } else {
                QuantBlock::Nvfp4(expected[i].0)
            };
            assert_eq!(*blk, want);
        }
        assert_eq!(q.format_counts(), (2, 2));
    }
}
