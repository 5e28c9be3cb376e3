//! Bit-serial compute accounting: one cycle per bit of the dynamic operand.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bfp::DataRole;
use crate::bwmap::BitWidthMap;
use crate::error::{Error, Result};
use crate::nnkernel::{entry_remap, full_batch_layout, EpochMetrics, Model, Stage, StagePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Arbitrary energy units per MAC-bit.
    pub energy_per_macbit: f64,
    /// Extra power of the sensitivity analytics, as a fraction.
    pub overhead_fraction: f64,
    pub baseline_bits: u8,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            energy_per_macbit: 1.0,
            overhead_fraction: 0.079,
            baseline_bits: 8,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.overhead_fraction >= 0.0) || !(self.energy_per_macbit > 0.0) || self.baseline_bits == 0 {
            return Err(Error::config("cost parameters must be positive (overhead ≥ 0)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MacBitTally {
    pub macbits: f64,
    /// MACs attributed to dynamic-operand blocks.
    pub macs: f64,
    /// MACs whose dynamic block has zero bits.
    pub skipped_macs: f64,
}

impl MacBitTally {
    pub fn add(&mut self, other: &MacBitTally) {
        self.macbits += other.macbits;
        self.macs += other.macs;
        self.skipped_macs += other.skipped_macs;
    }

    /// MAC-weighted average bit-width of the dynamic operands.
    pub fn average_bits(&self) -> f64 {
        if self.macs > 0.0 {
            self.macbits / self.macs
        } else {
            0.0
        }
    }
}

/// MAC-bits of running every stage of every MAC layer once per entry of
/// `batches` (mini-batch sizes) with the given maps.
pub fn macbit_count(
    model: &Model,
    policy: &StagePolicy,
    weight_map: &BitWidthMap,
    activation_map: &BitWidthMap,
    map_batch: usize,
    batches: &[usize],
) -> Result<MacBitTally> {
    let mut tally = MacBitTally::default();
    for &n in batches {
        for li in model.mac_layers() {
            for stage in Stage::ALL {
                let role = policy.stage(stage).dynamic_operand;
                let t = model.compute_amounts(li, role, n)?;
                let bits: Vec<u8> = match role {
                    DataRole::Weight => tensor_bits(weight_map, li)?.to_vec(),
                    DataRole::Activation => {
                        let layout = model.activation_layout(li, n)?;
                        let full = full_batch_layout(&layout, map_batch)?;
                        let exec = tensor_bits(activation_map, li)?;
                        if exec.len() != full.entries() {
                            return Err(Error::config(format!("activation map for layer {li} has the wrong size")));
                        }
                        entry_remap(&layout, &full).iter().map(|&i| exec[i]).collect()
                    }
                    DataRole::ActivationGradient => {
                        return Err(Error::config("activation gradients have no bit-width map"));
                    }
                };
                for (&t, &b) in t.iter().zip(&bits) {
                    tally.macs += t;
                    tally.macbits += t * b as f64;
                    if b == 0 {
                        tally.skipped_macs += t;
                    }
                }
            }
        }
    }
    Ok(tally)
}

fn tensor_bits(map: &BitWidthMap, layer: usize) -> Result<&[u8]> {
    map.tensor(layer)
        .map(|t| t.executable.as_slice())
        .ok_or_else(|| Error::config(format!("{} map lacks layer {layer}", map.category.as_str())))
}

/// Compute of one run: MAC-bits per epoch and epochs spent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunCost {
    pub macbits_per_epoch: f64,
    pub epochs: f64,
}

/// `(speedup, energy ratio)` of `dynamic` against `baseline`.
pub fn speedup_energy(baseline: Option<&RunCost>, dynamic: &RunCost, params: &CostParams) -> Result<(f64, f64)> {
    params.validate()?;
    let base = baseline.ok_or_else(|| Error::config("speedup needs a baseline run"))?;
    let b = base.macbits_per_epoch * base.epochs;
    let d = dynamic.macbits_per_epoch * dynamic.epochs;
    if !(b > 0.0) || !(d > 0.0) {
        return Err(Error::config("baseline and dynamic runs need positive MAC-bit totals"));
    }
    let speedup = b / d;
    Ok((speedup, (1.0 + params.overhead_fraction) / speedup))
}

/// Energy of `macbits` in the parameter's units, analytics overhead included.
pub fn energy(macbits: f64, params: &CostParams) -> f64 {
    macbits * params.energy_per_macbit * (1.0 + params.overhead_fraction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub macbits: f64,
    pub avg_bitwidth_weights: f64,
    pub avg_bitwidth_acts: f64,
    /// Against the baseline bit-width over the same MACs and epochs.
    pub speedup_vs_8bit: f64,
    pub energy_ratio: f64,
}

/// Summary over all epochs of a run; the baseline is the same schedule
/// with every dynamic operand at `params.baseline_bits`.
pub fn summarize(metrics: &[EpochMetrics], params: &CostParams) -> Result<RunSummary> {
    if metrics.is_empty() {
        return Err(Error::config("no epochs to summarize"));
    }
    let mut tally = MacBitTally::default();
    for m in metrics {
        tally.add(&MacBitTally {
            macbits: m.macbits,
            macs: m.macs,
            skipped_macs: m.skipped_macs,
        });
    }
    let n = metrics.len() as f64;
    let dynamic = RunCost {
        macbits_per_epoch: tally.macbits / n,
        epochs: n,
    };
    let baseline = RunCost {
        macbits_per_epoch: tally.macs * params.baseline_bits as f64 / n,
        epochs: n,
    };
    let (speedup, ratio) = if tally.macbits > 0.0 {
        speedup_energy(Some(&baseline), &dynamic, params)?
    } else {
        (f64::INFINITY, 0.0)
    };
    Ok(RunSummary {
        macbits: tally.macbits,
        avg_bitwidth_weights: metrics.iter().map(|m| m.avg_bw_w).sum::<f64>() / n,
        avg_bitwidth_acts: metrics.iter().map(|m| m.avg_bw_a).sum::<f64>() / n,
        speedup_vs_8bit: speedup,
        energy_ratio: ratio,
    })
}

pub fn write_summary<W: Write>(w: W, summary: &RunSummary) -> Result<()> {
    serde_json::to_writer_pretty(w, summary).map_err(|e| Error::internal(format!("summary.json: {e}")))
}
