//! Value-level simulation of the mixed-precision VMAC datapath.
//!
//! Each lane owns four dot-product units (FP4xFP4, FP8xFP8, FP4w x FP8a,
//! FP8w x FP4a); the metadata bits of the two operand blocks pick which one
//! fires. A unit dequantizes its operands, forms the 16 products in `f32`,
//! sums them in index order and adds the partial sum to the `f32`
//! accumulator.
//!
//! The schedule is weight-stationary: a tile of `lanes` weight blocks (one
//! per lane, same k-block) is held while the activation blocks of that
//! k-block stream past, one per cycle, broadcast to all lanes. k-blocks are
//! visited in ascending order, so every output accumulates its partial sums
//! in ascending k order.
//!
//! Layout: weights are `M x K` (out x in), activations are token-major
//! `N x K`, and the output is token-major `N x M`, ready to be blocked along
//! `M` as the next layer's input.

use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use crate::assignment::{assign_online, PrecisionAssignment, Threshold};
use crate::blockquant::{Precision, QuantBlock, QuantizedTensor};
use crate::sensitivity::FisherMap;
use crate::{Block, Error, Result, Tensor, BLOCK_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DotUnitKind {
    Fp4Fp4,
    Fp8Fp8,
    /// FP4 weights, FP8 activations.
    Fp4wFp8a,
    /// FP8 weights, FP4 activations.
    Fp8wFp4a,
}

impl DotUnitKind {
    pub const ALL: [DotUnitKind; 4] = [
        DotUnitKind::Fp4Fp4,
        DotUnitKind::Fp8Fp8,
        DotUnitKind::Fp4wFp8a,
        DotUnitKind::Fp8wFp4a,
    ];

    pub fn select(weight: Precision, activation: Precision) -> Self {
        match (weight, activation) {
            (Precision::Nvfp4, Precision::Nvfp4) => DotUnitKind::Fp4Fp4,
            (Precision::Fp8, Precision::Fp8) => DotUnitKind::Fp8Fp8,
            (Precision::Nvfp4, Precision::Fp8) => DotUnitKind::Fp4wFp8a,
            (Precision::Fp8, Precision::Nvfp4) => DotUnitKind::Fp8wFp4a,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_mixed(self) -> bool {
        matches!(self, DotUnitKind::Fp4wFp8a | DotUnitKind::Fp8wFp4a)
    }

    pub fn key(self) -> &'static str {
        match self {
            DotUnitKind::Fp4Fp4 => "fp4xfp4",
            DotUnitKind::Fp8Fp8 => "fp8xfp8",
            DotUnitKind::Fp4wFp8a => "fp4w_fp8a",
            DotUnitKind::Fp8wFp4a => "fp8w_fp4a",
        }
    }
}

/// A quantized block together with the scale FP8 blocks of its tensor share.
#[derive(Debug, Clone, Copy)]
pub struct TaggedBlock<'a> {
    pub block: &'a QuantBlock,
    pub fp8_scale: f32,
}

impl TaggedBlock<'_> {
    fn dequantize(&self) -> Block {
        self.block.dequantize(self.fp8_scale)
    }
}

/// `sum w_i * a_i`, ascending `i`, `f32` products and accumulation.
pub fn dot_partial(w: &[f32], a: &[f32]) -> Result<f32> {
    if w.len() != a.len() {
        return Err(Error::Shape(format!(
            "dot operands of length {} and {}",
            w.len(),
            a.len()
        )));
    }
    let mut acc = 0.0f32;
    for (x, y) in w.iter().zip(a) {
        acc += x * y;
    }
    Ok(acc)
}

/// One block dot product; returns the partial sum and the unit that ran.
pub fn block_dot(w: TaggedBlock<'_>, a: TaggedBlock<'_>) -> (f32, DotUnitKind) {
    let unit = DotUnitKind::select(w.block.precision(), a.block.precision());
    let partial = dot_partial(&w.dequantize(), &a.dequantize()).expect("blocks have equal length");
    (partial, unit)
}

/// Additive counters of a simulated run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TraceCounts {
    /// Block dot products per unit, indexed by [`DotUnitKind::index`].
    pub unit_ops: [u64; 4],
    /// Multiply-accumulates (`M * N * K` per GEMM).
    pub macs: u64,
    pub cycles: u64,
    pub ppu_invocations: u64,
}

impl TraceCounts {
    pub fn ops(&self, unit: DotUnitKind) -> u64 {
        self.unit_ops[unit.index()]
    }

    pub fn block_ops(&self) -> u64 {
        self.unit_ops.iter().sum()
    }

    /// Number of distinct units that fired at least once.
    pub fn active_units(&self) -> usize {
        self.unit_ops.iter().filter(|c| **c > 0).count()
    }

    /// Arithmetic operations, counting a multiply-accumulate as two.
    pub fn arithmetic_ops(&self) -> u64 {
        2 * self.macs
    }
}

impl Add for TraceCounts {
    type Output = TraceCounts;

    fn add(mut self, rhs: TraceCounts) -> TraceCounts {
        self += rhs;
        self
    }
}

impl AddAssign for TraceCounts {
    fn add_assign(&mut self, rhs: TraceCounts) {
        for (a, b) in self.unit_ops.iter_mut().zip(rhs.unit_ops) {
            *a += b;
        }
        self.macs += rhs.macs;
        self.cycles += rhs.cycles;
        self.ppu_invocations += rhs.ppu_invocations;
    }
}

impl std::iter::Sum for TraceCounts {
    fn sum<I: Iterator<Item = TraceCounts>>(iter: I) -> Self {
        iter.fold(TraceCounts::default(), Add::add)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CycleRecord {
    pub cycle: u64,
    pub lane: u32,
    pub weight: Precision,
    pub activation: Precision,
    pub unit: DotUnitKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmConfig {
    /// Parallel VMAC lanes, each holding one stationary weight block.
    pub lanes: usize,
    /// Keep a per-lane record of every cycle.
    pub record_cycles: bool,
}

impl Default for GemmConfig {
    fn default() -> Self {
        GemmConfig {
            lanes: 16,
            record_cycles: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GemmTrace {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub lanes: usize,
    pub counts: TraceCounts,
    /// Empty unless [`GemmConfig::record_cycles`] is set.
    pub records: Vec<CycleRecord>,
}

/// Mixed-precision GEMM. `w` is `M x K`, `x` is token-major `N x K`; the
/// result is token-major `N x M`.
pub fn gemm_fgmp(
    w: &QuantizedTensor,
    x: &QuantizedTensor,
    cfg: &GemmConfig,
) -> Result<(Tensor, GemmTrace)> {
    if w.cols() != x.cols() {
        return Err(Error::Shape(format!(
            "weights have inner dimension {}, activations {}",
            w.cols(),
            x.cols()
        )));
    }
    if cfg.lanes == 0 {
        return Err(Error::Shape("datapath needs at least one lane".into()));
    }
    let (m, k, n) = (w.rows(), w.cols(), x.rows());
    let kb_count = k / BLOCK_SIZE;

    let w_deq: Vec<Block> = w
        .blocks()
        .iter()
        .map(|b| b.dequantize(w.fp8_scale()))
        .collect();
    let x_deq: Vec<Block> = x
        .blocks()
        .iter()
        .map(|b| b.dequantize(x.fp8_scale()))
        .collect();

    let mut y = vec![0.0f32; n * m];
    let mut counts = TraceCounts {
        macs: (m * n * k) as u64,
        ..TraceCounts::default()
    };
    let mut records = Vec::new();
    let mut cycle = 0u64;

    for kb in 0..kb_count {
        for m0 in (0..m).step_by(cfg.lanes) {
            let tile = m0..(m0 + cfg.lanes).min(m);
            for tok in 0..n {
                let a_idx = tok * kb_count + kb;
                let a_prec = x.blocks()[a_idx].precision();
                for (lane, row) in tile.clone().enumerate() {
                    let w_idx = row * kb_count + kb;
                    let w_prec = w.blocks()[w_idx].precision();
                    let unit = DotUnitKind::select(w_prec, a_prec);
                    let partial = dot_partial(&w_deq[w_idx], &x_deq[a_idx])?;
                    y[tok * m + row] += partial;
                    counts.unit_ops[unit.index()] += 1;
                    if cfg.record_cycles {
                        records.push(CycleRecord {
                            cycle,
                            lane: lane as u32,
                            weight: w_prec,
                            activation: a_prec,
                            unit,
                        });
                    }
                }
                cycle += 1;
            }
        }
    }
    counts.cycles = cycle;

    let out = Tensor::new(n, m, y)?;
    Ok((
        out,
        GemmTrace {
            m,
            k,
            n,
            lanes: cfg.lanes,
            counts,
            records,
        },
    ))
}

/// Post-processing unit: quantizes an output tensor online against the
/// fixed activation threshold of the next layer. Adds one PPU invocation
/// per output block to `counts`.
pub fn ppu_pipeline(
    y: &Tensor,
    channel_weights: &FisherMap,
    threshold: &Threshold,
    fp8_scale: f32,
    counts: &mut TraceCounts,
) -> Result<(QuantizedTensor, PrecisionAssignment)> {
    let out = assign_online(y, channel_weights, threshold, fp8_scale)?;
    counts.ppu_invocations += out.1.bits.len() as u64;
    Ok(out)
}

impl fmt::Display for GemmTrace {
    /// `key=value` record, one field per line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# fgmp trace v1")?;
        writeln!(f, "m={}", self.m)?;
        writeln!(f, "k={}", self.k)?;
        writeln!(f, "n={}", self.n)?;
        writeln!(f, "lanes={}", self.lanes)?;
        write!(f, "{}", self.counts)
    }
}

impl fmt::Display for TraceCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for unit in DotUnitKind::ALL {
            writeln!(f, "{}={}", unit.key(), self.ops(unit))?;
        }
        writeln!(f, "macs={}", self.macs)?;
        writeln!(f, "cycles={}", self.cycles)?;
        writeln!(f, "ppu_invocations={}", self.ppu_invocations)
    }
}

impl FromStr for TraceCounts {
    type Err = Error;

    /// Parses the counter fields of a trace record; shape fields are
    /// accepted and ignored.
    fn from_str(s: &str) -> Result<Self> {
        let mut counts = TraceCounts::default();
        let mut seen = [false; 7];
        for line in s.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("trace line without '=': {line:?}")))?;
            let value: u64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("trace field {key} is not an integer")))?;
            let slot = match key.trim() {
                "fp4xfp4" => 0,
                "fp8xfp8" => 1,
                "fp4w_fp8a" => 2,
                "fp8w_fp4a" => 3,
                "macs" => 4,
                "cycles" => 5,
                "ppu_invocations" => 6,
                "m" | "k" | "n" | "lanes" => continue,
                other => return Err(Error::Format(format!("unknown trace field {other:?}"))),
            };
            if seen[slot] {
                return Err(Error::Format(format!("duplicate trace field {key:?}")));
            }
            seen[slot] = true;
            match slot {
                0..=3 => counts.unit_ops[slot] = value,
                4 => counts.macs = value,
                5 => counts.cycles = value,
                _ => counts.ppu_invocations = value,
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("trace is missing field #{missing}")));
        }
        Ok(counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::{Domain, Scope};
    use crate::blockquant::{dequantize, quantize_tensor_fp8, quantize_tensor_nvfp4};
    use crate::blockquant::{Fp8Block, NvFp4Block};
    use crate::numerics::{Fp4Code, Fp8Code};

    fn fp4_ones() -> QuantBlock {
        QuantBlock::Nvfp4(NvFp4Block {
            codes: [Fp4Code::from_bits(0x2).unwrap(); 16],
            scale: Fp8Code::ONE,
        })
    }

    fn fp8_ones() -> QuantBlock {
        QuantBlock::Fp8(Fp8Block {
            codes: [Fp8Code::ONE; 16],
        })
    }

    #[test]
    fn block_dot_examples() {
        let zero = QuantBlock::Fp8(Fp8Block {
            codes: [Fp8Code::POS_ZERO; 16],
        });
        let w = fp4_ones();
        let (v, unit) = block_dot(
            TaggedBlock {
                block: &w,
                fp8_scale: 1.0,
            },
            TaggedBlock {
                block: &zero,
                fp8_scale: 1.0,
            },
        );
        assert_eq!((v, unit), (0.0, DotUnitKind::Fp4wFp8a));
        let a = fp8_ones();
        let (v, unit) = block_dot(
            TaggedBlock {
                block: &w,
                fp8_scale: 1.0,
            },
            TaggedBlock {
                block: &a,
                fp8_scale: 1.0,
            },
        );
        assert_eq!((v, unit), (16.0, DotUnitKind::Fp4wFp8a));
        assert!(dot_partial(&[1.0; 16], &[1.0; 15]).is_err());
    }

    #[test]
    fn unit_selection() {
        use Precision::*;
        assert_eq!(DotUnitKind::select(Nvfp4, Nvfp4), DotUnitKind::Fp4Fp4);
        assert_eq!(DotUnitKind::select(Fp8, Nvfp4), DotUnitKind::Fp8wFp4a);
        assert!(DotUnitKind::select(Nvfp4, Fp8).is_mixed());
        assert!(!DotUnitKind::select(Fp8, Fp8).is_mixed());
    }

    #[test]
    fn identity_weights_select_rows() {
        // 16x16 identity: 1.0 and 0.0 are exact in FP8
        let mut eye = Tensor::zeros(16, 16);
        for i in 0..16 {
            eye.data_mut()[i * 16 + i] = 1.0;
        }
        let w = quantize_tensor_fp8(&eye).unwrap();
        assert_eq!(dequantize(&w), eye);
        let xs: Vec<f32> = (0..48)
            .map(|i| [0.5, -1.0, 3.0, 6.0, -4.0, 1.5][i % 6])
            .collect();
        let x = quantize_tensor_nvfp4(&Tensor::new(3, 16, xs).unwrap()).unwrap();
        let (y, trace) = gemm_fgmp(&w, &x, &GemmConfig::default()).unwrap();
        assert_eq!(y, dequantize(&x));
        assert_eq!(trace.counts.ops(DotUnitKind::Fp8wFp4a), 16 * 3);
    }

    #[test]
    fn cycle_accounting() {
        let w = quantize_tensor_nvfp4(&Tensor::zeros(20, 64)).unwrap();
        let x = quantize_tensor_fp8(&Tensor::zeros(3, 64)).unwrap();
        let cfg = GemmConfig {
            lanes: 8,
            record_cycles: true,
        };
        let (_, t) = gemm_fgmp(&w, &x, &cfg).unwrap();
        // 4 k-blocks x ceil(20/8)=3 tiles x 3 tokens
        assert_eq!(t.counts.cycles, 36);
        assert_eq!(t.counts.block_ops(), 20 * 3 * 4);
        assert_eq!(t.records.len(), 240);
        assert!(t
            .records
            .iter()
            .all(|r| r.lane < 8 && r.unit == DotUnitKind::Fp4wFp8a));
        assert_eq!(t.records.last().unwrap().cycle, 35);
    }

    #[test]
    fn shape_mismatch() {
        let w = quantize_tensor_fp8(&Tensor::zeros(2, 32)).unwrap();
        let x = quantize_tensor_fp8(&Tensor::zeros(2, 16)).unwrap();
        assert!(gemm_fgmp(&w, &x, &GemmConfig::default()).is_err());
    }

    #[test]
    fn ppu_counts_blocks() {
        let y = Tensor::zeros(4, 32);
        let g2 = FisherMap::per_channel(vec![1.0; 32]).unwrap();
        let mut c = TraceCounts::default();
        let t = Threshold::all_low(Domain::Activations);
        let (q, a) = ppu_pipeline(&y, &g2, &t, 1.0, &mut c).unwrap();
        assert_eq!(c.ppu_invocations, 8);
        assert_eq!(a.fp8_count(), 0);
        assert_eq!(q.format_counts(), (8, 0));
        assert!(dequantize(&q).data().iter().all(|v| *v == 0.0));
        let _ = Scope::Global;
    }

    #[test]
    fn trace_text_round_trip() {
        let t = GemmTrace {
            m: 4,
            k: 32,
            n: 2,
            lanes: 16,
            counts: TraceCounts {
                unit_ops: [1, 2, 3, 10],
                macs: 256,
                cycles: 4,
                ppu_invocations: 0,
            },
            records: vec![],
        };
        let text = t.to_string();
        assert_eq!(text.parse::<TraceCounts>().unwrap(), t.counts);
        assert!("fp4xfp4=1".parse::<TraceCounts>().is_err());
        assert!(format!("{text}bogus=1\n").parse::<TraceCounts>().is_err());
        assert!(format!("{text}macs=1\n").parse::<TraceCounts>().is_err());
    }
}
