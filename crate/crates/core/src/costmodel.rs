//! Memory footprint and energy accounting.
//!
//! Storage per 16-element block:
//!
//! | format          | payload | scale | metadata | total |
//! |-----------------|---------|-------|----------|-------|
//! | NVFP4 (FGMP)    | 64      | 8     | 1        | 73    |
//! | FP8 (FGMP)      | 128     | 0     | 1        | 129   |
//! | FP8 baseline    | 128     | 0     | 0        | 128   |
//!
//! Datapath energy is relative to one FP8xFP8 block dot product. The
//! measured single-format ratios are 0.67 (FP4xFP4), 0.84 (FP4 weights, FP8
//! activations) and 0.83 (FP8 weights, FP4 activations). Post-processing
//! (online activation quantization) energy is absolute: 25.7 pJ per block.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::blockquant::QuantizedTensor;
use crate::simkernel::{DotUnitKind, TraceCounts};
use crate::{Error, Result, BLOCK_SIZE};

pub const NVFP4_BLOCK_BITS: u64 = (BLOCK_SIZE as u64) * 4 + 8 + 1;
pub const FP8_BLOCK_BITS: u64 = (BLOCK_SIZE as u64) * 8 + 1;
pub const BASELINE_FP8_BLOCK_BITS: u64 = (BLOCK_SIZE as u64) * 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyCoefficients {
    pub e88: f64,
    pub e44: f64,
    /// FP4 weights x FP8 activations.
    pub e48: f64,
    /// FP8 weights x FP4 activations.
    pub e84: f64,
    /// Extra relative energy per block-op when more than one unit is in use.
    pub mux_tax: f64,
    pub ppu_pj_per_block: f64,
}

impl Default for EnergyCoefficients {
    fn default() -> Self {
        EnergyCoefficients {
            e88: 1.00,
            e44: 0.67,
            e48: 0.84,
            e84: 0.83,
            mux_tax: 0.0,
            ppu_pj_per_block: 25.7,
        }
    }
}

impl EnergyCoefficients {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            self.e88,
            self.e44,
            self.e48,
            self.e84,
            self.ppu_pj_per_block,
        ];
        if unit.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Format("energy coefficients must be positive".into()));
        }
        if !(self.mux_tax.is_finite() && self.mux_tax >= 0.0) {
            return Err(Error::Format("mux_tax must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn unit(&self, kind: DotUnitKind) -> f64 {
        match kind {
            DotUnitKind::Fp8Fp8 => self.e88,
            DotUnitKind::Fp4Fp4 => self.e44,
            DotUnitKind::Fp4wFp8a => self.e48,
            DotUnitKind::Fp8wFp4a => self.e84,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MemoryReport {
    pub nvfp4_blocks: u64,
    pub fp8_blocks: u64,
    pub total_bits: u64,
    pub baseline_bits: u64,
}

impl MemoryReport {
    pub fn from_counts(nvfp4_blocks: u64, fp8_blocks: u64) -> Self {
        MemoryReport {
            nvfp4_blocks,
            fp8_blocks,
            total_bits: nvfp4_blocks * NVFP4_BLOCK_BITS + fp8_blocks * FP8_BLOCK_BITS,
            baseline_bits: (nvfp4_blocks + fp8_blocks) * BASELINE_FP8_BLOCK_BITS,
        }
    }

    pub fn blocks(&self) -> u64 {
        self.nvfp4_blocks + self.fp8_blocks
    }

    /// Savings against plain FP8, in percent. Negative when every block is FP8.
    pub fn savings_pct(&self) -> f64 {
        if self.baseline_bits == 0 {
            return 0.0;
        }
        100.0 * (1.0 - self.total_bits as f64 / self.baseline_bits as f64)
    }

    pub fn avg_bits_per_element(&self) -> f64 {
        if self.blocks() == 0 {
            return 0.0;
        }
        self.total_bits as f64 / (self.blocks() * BLOCK_SIZE as u64) as f64
    }

    /// 16 divided by the average bit width.
    pub fn compression_rate(&self) -> f64 {
        let avg = self.avg_bits_per_element();
        if avg == 0.0 {
            0.0
        } else {
            16.0 / avg
        }
    }
}

impl std::ops::Add for MemoryReport {
    type Output = MemoryReport;

    fn add(self, rhs: MemoryReport) -> MemoryReport {
        MemoryReport::from_counts(
            self.nvfp4_blocks + rhs.nvfp4_blocks,
            self.fp8_blocks + rhs.fp8_blocks,
        )
    }
}

pub fn memory_bits(qt: &QuantizedTensor) -> MemoryReport {
    let (nv, f8) = qt.format_counts();
    MemoryReport::from_counts(nv as u64, f8 as u64)
}

/// Savings for a fraction `r` of NVFP4 blocks: `1 - (73 r + 129 (1 - r)) / 128`.
pub fn savings_for_ratio(r: f64) -> f64 {
    100.0
        * (1.0
            - (r * NVFP4_BLOCK_BITS as f64 + (1.0 - r) * FP8_BLOCK_BITS as f64)
                / BASELINE_FP8_BLOCK_BITS as f64)
}

/// Energy relative to an all-FP8xFP8 run of the same shape.
pub fn datapath_energy(counts: &TraceCounts, coeff: &EnergyCoefficients) -> f64 {
    let total = counts.block_ops();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let mut energy = 0.0f64;
    for kind in DotUnitKind::ALL {
        energy += (counts.ops(kind) as f64 / total) * coeff.unit(kind);
    }
    if counts.active_units() > 1 {
        energy += coeff.mux_tax;
    }
    energy / coeff.e88
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpuEnergy {
    pub total_pj: f64,
    /// Energy share per arithmetic op (a MAC counts as two), in fJ.
    pub fj_per_op: f64,
}

pub fn ppu_energy(counts: &TraceCounts, coeff: &EnergyCoefficients) -> PpuEnergy {
    let total_pj = counts.ppu_invocations as f64 * coeff.ppu_pj_per_block;
    let ops = counts.arithmetic_ops();
    PpuEnergy {
        total_pj,
        fj_per_op: if ops == 0 {
            0.0
        } else {
            total_pj * 1e3 / ops as f64
        },
    }
}

/// Combined memory and energy summary.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub memory: Option<MemoryReport>,
    pub counts: TraceCounts,
    pub relative_energy: f64,
    pub ppu: PpuEnergy,
}

impl CostReport {
    pub fn new(
        memory: Option<MemoryReport>,
        counts: TraceCounts,
        coeff: &EnergyCoefficients,
    ) -> Self {
        CostReport {
            memory,
            counts,
            relative_energy: datapath_energy(&counts, coeff),
            ppu: ppu_energy(&counts, coeff),
        }
    }

    /// Machine-readable `key=value` lines.
    pub fn records(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        if let Some(m) = &self.memory {
            push("memory.nvfp4_blocks", m.nvfp4_blocks.to_string());
            push("memory.fp8_blocks", m.fp8_blocks.to_string());
            push("memory.total_bits", m.total_bits.to_string());
            push("memory.baseline_bits", m.baseline_bits.to_string());
            push("memory.savings_pct", format!("{:.4}", m.savings_pct()));
            push(
                "memory.avg_bits_per_element",
                format!("{:.4}", m.avg_bits_per_element()),
            );
            push(
                "memory.compression_rate",
                format!("{:.4}", m.compression_rate()),
            );
        }
        for kind in DotUnitKind::ALL {
            push(
                &format!("ops.{}", kind.key()),
                self.counts.ops(kind).to_string(),
            );
        }
        push("ops.macs", self.counts.macs.to_string());
        push("ops.cycles", self.counts.cycles.to_string());
        push(
            "energy.relative_datapath",
            format!("{:.6}", self.relative_energy),
        );
        push(
            "energy.ppu_invocations",
            self.counts.ppu_invocations.to_string(),
        );
        push("energy.ppu_pj", format!("{:.4}", self.ppu.total_pj));
        push("energy.ppu_fj_per_op", format!("{:.6}", self.ppu.fj_per_op));
        out
    }
}

impl fmt::Display for CostReport {
    /// Human-readable table.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(m) = &self.memory {
            writeln!(f, "memory")?;
            writeln!(
                f,
                "  blocks (nvfp4 / fp8)     {:>12} / {}",
                m.nvfp4_blocks, m.fp8_blocks
            )?;
            writeln!(
                f,
                "  bits (fgmp / fp8)        {:>12} / {}",
                m.total_bits, m.baseline_bits
            )?;
            writeln!(f, "  savings vs fp8           {:>11.2}%", m.savings_pct())?;
            writeln!(
                f,
                "  avg bits / element       {:>12.4}",
                m.avg_bits_per_element()
            )?;
            writeln!(
                f,
                "  compression (16/avg)     {:>12.4}",
                m.compression_rate()
            )?;
        }
        writeln!(f, "datapath")?;
        let total = self.counts.block_ops().max(1) as f64;
        for kind in DotUnitKind::ALL {
            let c = self.counts.ops(kind);
            writeln!(
                f,
                "  {:<24} {:>12} ({:>6.2}%)",
                kind.key(),
                c,
                100.0 * c as f64 / total
            )?;
        }
        writeln!(
            f,
            "  relative energy          {:>12.4}",
            self.relative_energy
        )?;
        writeln!(f, "ppu")?;
        writeln!(
            f,
            "  invocations              {:>12}",
            self.counts.ppu_invocations
        )?;
        writeln!(f, "  energy (pJ)              {:>12.2}", self.ppu.total_pj)?;
        writeln!(f, "  energy per op (fJ)       {:>12.4}", self.ppu.fj_per_op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(ops: [u64; 4]) -> TraceCounts {
        TraceCounts {
            unit_ops: ops,
            ..TraceCounts::default()
        }
    }

    #[test]
    fn block_bit_costs() {
        assert_eq!(NVFP4_BLOCK_BITS, 73);
        assert_eq!(FP8_BLOCK_BITS, 129);
        assert_eq!(BASELINE_FP8_BLOCK_BITS, 128);
    }

    #[test]
    fn savings_examples() {
        let all8 = MemoryReport::from_counts(0, 100);
        assert!((all8.savings_pct() - (-100.0 / 128.0)).abs() < 1e-12);
        let r70 = MemoryReport::from_counts(70, 30);
        assert!((r70.savings_pct() - 29.84375).abs() < 1e-9);
        let r90 = MemoryReport::from_counts(90, 10);
        assert!((r90.savings_pct() - 38.59375).abs() < 1e-9);
        assert!((savings_for_ratio(0.7) - r70.savings_pct()).abs() < 1e-9);
        let all4 = MemoryReport::from_counts(10, 0);
        assert!((all4.compression_rate() - 16.0 / (73.0 / 16.0)).abs() < 1e-12);
        assert!((all4.compression_rate() - 3.507).abs() < 1e-3);
    }

    #[test]
    fn energy_examples() {
        let c = EnergyCoefficients::default();
        assert_eq!(datapath_energy(&counts([0, 10, 0, 0]), &c), 1.0);
        assert_eq!(datapath_energy(&counts([10, 0, 0, 0]), &c), 0.67);
        assert_eq!(datapath_energy(&counts([0, 0, 10, 0]), &c), 0.84);
        assert_eq!(datapath_energy(&counts([0, 0, 0, 10]), &c), 0.83);
        assert_eq!(datapath_energy(&counts([0; 4]), &c), 0.0);
    }

    #[test]
    fn mux_tax_only_on_mixed_runs() {
        let c = EnergyCoefficients {
            mux_tax: 0.02,
            ..EnergyCoefficients::default()
        };
        assert_eq!(datapath_energy(&counts([0, 10, 0, 0]), &c), 1.0);
        // mostly FP8 costs slightly more than pure FP8 once the mux is active
        assert!(datapath_energy(&counts([0, 99, 1, 0]), &c) > 1.0);
    }

    #[test]
    fn ppu_examples() {
        let c = EnergyCoefficients::default();
        let mut t = TraceCounts {
            macs: 16 * 4096,
            ppu_invocations: 1,
            ..TraceCounts::default()
        };
        let e = ppu_energy(&t, &c);
        assert_eq!(e.total_pj, 25.7);
        assert!((e.fj_per_op - 0.196).abs() < 5e-4);
        t.macs = 16 * 16;
        assert!((ppu_energy(&t, &c).fj_per_op - 50.195).abs() < 1e-2);
        assert_eq!(
            ppu_energy(&TraceCounts::default(), &c),
            PpuEnergy::default()
        );
    }

    #[test]
    fn coefficient_validation() {
        assert!(EnergyCoefficients::default().validate().is_ok());
        let bad = EnergyCoefficients {
            e44: 0.0,
            ..EnergyCoefficients::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn flipping_to_fp4_never_costs_more(ops in prop::array::uniform4(0u64..1000), which in 0usize..3) {
            let c = EnergyCoefficients::default();
            let before = counts(ops);
            // one FP8 operand becomes FP4: 88->48, 88->84, 48->44 or 84->44
            let (from, to) = match which {
                0 => (1, 2),
                1 => (2, 0),
                _ => (3, 0),
            };
            prop_assume!(ops[from] > 0);
            let mut after = ops;
            after[from] -= 1;
            after[to] += 1;
            prop_assert!(datapath_energy(&counts(after), &c) <= datapath_energy(&before, &c) + 1e-12);
        }

        #[test]
        fn savings_identity(nv in 0u64..10_000, f8 in 0u64..10_000) {
            prop_assume!(nv + f8 > 0);
            let m = MemoryReport::from_counts(nv, f8);
            let r = nv as f64 / (nv + f8) as f64;
            prop_assert!((m.savings_pct() - savings_for_ratio(r)).abs() < 1e-9);
            prop_assert!(m.compression_rate() >= 1.0);
        }
    }
}
