//! Block-float-point (BFP) tensors.
//!
//! A tensor is tiled into 4×4 blocks over two designated axes. Every block
//! shares one 8-bit exponent and stores 16 signed mantissas of a common
//! bit-width `b ∈ [0, 8]`. Bit-widths are assigned per *map entry* (one 4×4
//! tile over the two designated axes); every position along the remaining
//! axes (spatial `H×W`, kernel `k×k`) is a separate block *instance* with its
//! own exponent that shares the entry's bit-width.
//!
//! Canonical axis order for all roles is `[outer, inner, rest...]`:
//!
//! | role                 | shape                    | row axis | col axis |
//! |----------------------|--------------------------|----------|----------|
//! | `Weight`             | `[C_out, C_in, kh, kw]`  | `C_in`   | `C_out`  |
//! | `Activation`         | `[N, C_in, H, W]`        | `C_in`   | `N`      |
//! | `ActivationGradient` | `[N, C_out, H, W]`       | `C_out`  | `N`      |
//!
//! so the row axis is always axis 1 and the column axis always axis 0.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLOCK_SIDE: usize = 4;
pub const BLOCK_LANES: usize = BLOCK_SIDE * BLOCK_SIDE;
pub const MAX_BITWIDTH: u8 = 8;
/// Bit-widths the execution path accepts from a bit-width map.
pub const EXECUTABLE_BITWIDTHS: [u8; 5] = [0, 2, 4, 6, 8];
/// Exponent assigned to an all-zero block.
pub const ZERO_EXPONENT: i8 = i8::MIN;

const DUMP_MAGIC: &[u8; 4] = b"BFP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataRole {
    Weight,
    Activation,
    ActivationGradient,
}

impl DataRole {
    pub fn code(self) -> u8 {
        match self {
            DataRole::Weight => 0,
            DataRole::Activation => 1,
            DataRole::ActivationGradient => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DataRole::Weight),
            1 => Some(DataRole::Activation),
            2 => Some(DataRole::ActivationGradient),
            _ => None,
        }
    }

    /// Names of the (row, column) axes the 4×4 tiling runs along.
    pub fn tiled_axes(self) -> (&'static str, &'static str) {
        match self {
            DataRole::Weight => ("C_in", "C_out"),
            DataRole::Activation => ("C_in", "Batch"),
            DataRole::ActivationGradient => ("C_out", "Batch"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DataRole::Weight => "weight",
            DataRole::Activation => "activation",
            DataRole::ActivationGradient => "activation_gradient",
        }
    }
}

/// Deterministic mapping between tensor elements and `(entry, instance, lane)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    shape: Vec<usize>,
    role: DataRole,
    rows: usize,
    cols: usize,
    row_blocks: usize,
    col_blocks: usize,
    instances: usize,
}

impl BlockLayout {
    pub fn new(shape: &[usize], role: DataRole) -> Result<Self> {
        if shape.len() < 2 {
            let (r, c) = role.tiled_axes();
            return Err(Error::config(format!(
                "{} tensor of shape {shape:?} lacks the {c} and {r} axes",
                role.as_str()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("zero-sized axis in shape {shape:?}")));
        }
        let rows = shape[1];
        let cols = shape[0];
        Ok(Self {
            shape: shape.to_vec(),
            role,
            rows,
            cols,
            row_blocks: rows.div_ceil(BLOCK_SIDE),
            col_blocks: cols.div_ceil(BLOCK_SIDE),
            instances: shape[2..].iter().product(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn role(&self) -> DataRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols * self.instances
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of bit-width map entries.
    pub fn entries(&self) -> usize {
        self.row_blocks * self.col_blocks
    }

    /// Block instances per map entry.
    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.row_blocks, self.col_blocks)
    }

    pub fn entry_coords(&self, entry: usize) -> (usize, usize) {
        (entry / self.col_blocks, entry % self.col_blocks)
    }

    /// Flat offset of `(entry, lane)` at instance 0, or `None` for a padded lane.
    #[inline]
    pub fn lane_base(&self, entry: usize, lane: usize) -> Option<usize> {
        let (rb, cb) = self.entry_coords(entry);
        let row = rb * BLOCK_SIDE + lane / BLOCK_SIDE;
        let col = cb * BLOCK_SIDE + lane % BLOCK_SIDE;
        (row < self.rows && col < self.cols)
            .then(|| (col * self.rows + row) * self.instances)
    }

    pub fn element_index(&self, entry: usize, instance: usize, lane: usize) -> Option<usize> {
        self.lane_base(entry, lane).map(|base| base + instance)
    }

    /// Inverse of [`element_index`](Self::element_index).
    pub fn locate(&self, index: usize) -> (usize, usize, usize) {
        let instance = index % self.instances;
        let rc = index / self.instances;
        let row = rc % self.rows;
        let col = rc / self.rows;
        let entry = (row / BLOCK_SIDE) * self.col_blocks + col / BLOCK_SIDE;
        let lane = (row % BLOCK_SIDE) * BLOCK_SIDE + col % BLOCK_SIDE;
        (entry, instance, lane)
    }

    /// Lane offsets of one entry; padded lanes are `None`.
    pub fn lane_bases(&self, entry: usize) -> [Option<usize>; BLOCK_LANES] {
        std::array::from_fn(|lane| self.lane_base(entry, lane))
    }

    pub fn valid_lanes(&self, entry: usize) -> usize {
        (0..BLOCK_LANES)
            .filter(|&l| self.lane_base(entry, l).is_some())
            .count()
    }

    /// Number of valid lanes along (row, col) for an entry.
    pub fn valid_extent(&self, entry: usize) -> (usize, usize) {
        let (rb, cb) = self.entry_coords(entry);
        (
            (self.rows - rb * BLOCK_SIDE).min(BLOCK_SIDE),
            (self.cols - cb * BLOCK_SIDE).min(BLOCK_SIDE),
        )
    }
}

/// `⌈log2 max|v|⌉` clamped to the 8-bit exponent range; all-zero → −128.
pub fn compute_block_exponent(values: &[f64]) -> Result<i8> {
    let mut max = 0.0f64;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::numeric(format!("non-finite value {v} in block")));
        }
        max = max.max(v.abs());
    }
    Ok(exponent_of_max(max))
}

#[inline]
pub(crate) fn exponent_of_max(max: f64) -> i8 {
    if max == 0.0 {
        return ZERO_EXPONENT;
    }
    if max < f64::MIN_POSITIVE {
        return i8::MIN;
    }
    let bits = max.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let e = biased - 1023 + i32::from(frac != 0);
    e.clamp(i8::MIN as i32, i8::MAX as i32) as i8
}

/// Quantization step `2^(e − b + 1)` for `b ≥ 1`.
#[inline]
pub fn step_size(exponent: i8, bitwidth: u8) -> f64 {
    pow2(exponent as i32 - bitwidth as i32 + 1)
}

#[inline]
pub(crate) fn pow2(k: i32) -> f64 {
    // exact for the exponent range reachable here (|k| ≤ 136)
    2f64.powi(k)
}

#[inline]
pub(crate) fn quantize_mantissa(v: f64, inv_step: f64, bitwidth: u8) -> i16 {
    let hi = (1i32 << (bitwidth - 1)) - 1;
    let lo = -(1i32 << (bitwidth - 1));
    let m = (v * inv_step).round_ties_even();
    (m.clamp(lo as f64, hi as f64)) as i16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BfpBlock {
    pub exponent: i8,
    pub bitwidth: u8,
    /// Signed mantissas; all zero when `bitwidth == 0`.
    pub mantissas: [i16; BLOCK_LANES],
}

impl BfpBlock {
    pub fn is_skippable(&self) -> bool {
        self.bitwidth == 0
    }

    pub fn dequantize(&self) -> [f64; BLOCK_LANES] {
        if self.bitwidth == 0 {
            return [0.0; BLOCK_LANES];
        }
        let q = step_size(self.exponent, self.bitwidth);
        self.mantissas.map(|m| m as f64 * q)
    }
}

/// Quantizes up to 16 values; missing trailing lanes are treated as padding.
pub fn quantize_block(values: &[f64], bitwidth: u8) -> Result<BfpBlock> {
    if bitwidth > MAX_BITWIDTH {
        return Err(Error::config(format!("bit-width {bitwidth} exceeds {MAX_BITWIDTH}")));
    }
    if values.len() > BLOCK_LANES {
        return Err(Error::config(format!("block holds {} values, max 16", values.len())));
    }
    let exponent = compute_block_exponent(values)?;
    let mut mantissas = [0i16; BLOCK_LANES];
    if bitwidth > 0 {
        let inv = 1.0 / step_size(exponent, bitwidth);
        for (m, &v) in mantissas.iter_mut().zip(values) {
            *m = quantize_mantissa(v, inv, bitwidth);
        }
    }
    Ok(BfpBlock {
        exponent,
        bitwidth,
        mantissas,
    })
}

/// Bit-width source for quantizing a whole tensor.
#[derive(Debug, Clone, Copy)]
pub enum Bitwidths<'a> {
    Uniform(u8),
    PerEntry(&'a [u8]),
}

impl Bitwidths<'_> {
    pub(crate) fn check(&self, layout: &BlockLayout) -> Result<()> {
        match *self {
            Bitwidths::Uniform(b) if b > MAX_BITWIDTH => {
                Err(Error::config(format!("bit-width {b} exceeds {MAX_BITWIDTH}")))
            }
            Bitwidths::Uniform(_) => Ok(()),
            Bitwidths::PerEntry(m) => {
                if m.len() != layout.entries() {
                    return Err(Error::config(format!(
                        "bit-width map has {} entries, layout {:?} needs {}",
                        m.len(),
                        layout.shape(),
                        layout.entries()
                    )));
                }
                match m.iter().find(|&&b| b > MAX_BITWIDTH) {
                    Some(b) => Err(Error::config(format!("bit-width {b} exceeds {MAX_BITWIDTH}"))),
                    None => Ok(()),
                }
            }
        }
    }

    #[inline]
    pub(crate) fn get(&self, entry: usize) -> u8 {
        match *self {
            Bitwidths::Uniform(b) => b,
            Bitwidths::PerEntry(m) => m[entry],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfpTensor {
    layout: BlockLayout,
    /// Entry-major, instance-minor.
    blocks: Vec<BfpBlock>,
}

impl BfpTensor {
    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn blocks(&self) -> &[BfpBlock] {
        &self.blocks
    }

    pub fn block(&self, entry: usize, instance: usize) -> &BfpBlock {
        &self.blocks[entry * self.layout.instances() + instance]
    }

    pub fn dequantize(&self) -> Vec<f64> {
        let layout = &self.layout;
        let mut out = vec![0.0; layout.len()];
        for entry in 0..layout.entries() {
            let bases = layout.lane_bases(entry);
            for inst in 0..layout.instances() {
                let values = self.block(entry, inst).dequantize();
                for (base, v) in bases.iter().zip(values) {
                    if let Some(base) = base {
                        out[base + inst] = v;
                    }
                }
            }
        }
        out
    }

    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let shape = self.layout.shape();
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&[self.layout.role().code(), shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.layout.entries() as u32).to_le_bytes())?;
        w.write_all(&(self.layout.instances() as u32).to_le_bytes())?;
        for b in &self.blocks {
            w.write_all(&[b.exponent as u8, b.bitwidth])?;
            for m in b.mantissas {
                w.write_all(&m.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        fn take<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Data(format!("truncated BFP dump: {e}")))?;
            Ok(buf)
        }
        if &take::<_, 4>(&mut r)? != DUMP_MAGIC {
            return Err(Error::Data("bad BFP dump magic".into()));
        }
        let [role, ndim] = take::<_, 2>(&mut r)?;
        let role = DataRole::from_code(role)
            .ok_or_else(|| Error::Data(format!("unknown role code {role}")))?;
        let shape = (0..ndim)
            .map(|_| take::<_, 4>(&mut r).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let layout = BlockLayout::new(&shape, role)?;
        let entries = u32::from_le_bytes(take(&mut r)?) as usize;
        let instances = u32::from_le_bytes(take(&mut r)?) as usize;
        if entries != layout.entries() || instances != layout.instances() {
            return Err(Error::Data(format!(
                "dump header claims {entries}×{instances} blocks, shape implies {}×{}",
                layout.entries(),
                layout.instances()
            )));
        }
        let mut blocks = Vec::with_capacity(entries * instances);
        for _ in 0..entries * instances {
            let [e, b] = take::<_, 2>(&mut r)?;
            if b > MAX_BITWIDTH {
                return Err(Error::Data(format!("block bit-width {b} exceeds 8")));
            }
            let mut mantissas = [0i16; BLOCK_LANES];
            for m in &mut mantissas {
                *m = i16::from_le_bytes(take(&mut r)?);
            }
            blocks.push(BfpBlock {
                exponent: e as i8,
                bitwidth: b,
                mantissas,
            });
        }
        Ok(Self { layout, blocks })
    }
}

pub fn partition_blocks(shape: &[usize], role: DataRole) -> Result<BlockLayout> {
    BlockLayout::new(shape, role)
}

pub fn quantize_tensor(values: &[f64], layout: &BlockLayout, bits: Bitwidths<'_>) -> Result<BfpTensor> {
    check_len(values, layout)?;
    bits.check(layout)?;
    let mut blocks = Vec::with_capacity(layout.entries() * layout.instances());
    let mut buf = [0.0f64; BLOCK_LANES];
    for entry in 0..layout.entries() {
        let bases = layout.lane_bases(entry);
        let b = bits.get(entry);
        for inst in 0..layout.instances() {
            for (slot, base) in buf.iter_mut().zip(&bases) {
                *slot = base.map_or(0.0, |base| values[base + inst]);
            }
            blocks.push(quantize_block(&buf, b)?);
        }
    }
    Ok(BfpTensor {
        layout: layout.clone(),
        blocks,
    })
}

pub fn dequantize(t: &BfpTensor) -> Vec<f64> {
    t.dequantize()
}

fn check_len(values: &[f64], layout: &BlockLayout) -> Result<()> {
    if values.len() != layout.len() {
        return Err(Error::config(format!(
            "{} values supplied for shape {:?}",
            values.len(),
            layout.shape()
        )));
    }
    Ok(())
}

/// Quantize-dequantize in one pass, writing reconstructed values into `out`
/// and the per-block exponents (entry-major) into `exponents`.
///
/// Equivalent to `dequantize(&quantize_tensor(..))` without materializing
/// the mantissas; this is the path the training engine uses.
pub fn fake_quantize(
    values: &[f64],
    layout: &BlockLayout,
    bits: Bitwidths<'_>,
    out: &mut [f64],
    exponents: &mut Vec<i8>,
) -> Result<()> {
    check_len(values, layout)?;
    bits.check(layout)?;
    if out.len() != values.len() {
        return Err(Error::internal("fake_quantize output length mismatch"));
    }
    let instances = layout.instances();
    exponents.clear();
    exponents.resize(layout.entries() * instances, ZERO_EXPONENT);
    for entry in 0..layout.entries() {
        let bases: Vec<usize> = layout.lane_bases(entry).into_iter().flatten().collect();
        let b = bits.get(entry);
        for inst in 0..instances {
            let mut max = 0.0f64;
            for &base in &bases {
                let v = values[base + inst];
                if !v.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite {} value {v} at element {}",
                        layout.role().as_str(),
                        base + inst
                    )));
                }
                max = max.max(v.abs());
            }
            let e = exponent_of_max(max);
            exponents[entry * instances + inst] = e;
            if b == 0 {
                for &base in &bases {
                    out[base + inst] = 0.0;
                }
                continue;
            }
            let q = step_size(e, b);
            let inv = 1.0 / q;
            for &base in &bases {
                out[base + inst] = quantize_mantissa(values[base + inst], inv, b) as f64 * q;
            }
        }
    }
    Ok(())
}

/// Block exponents only (entry-major, instance-minor).
pub fn block_exponents(values: &[f64], layout: &BlockLayout, exponents: &mut Vec<i8>) -> Result<()> {
    check_len(values, layout)?;
    let instances = layout.instances();
    exponents.clear();
    exponents.resize(layout.entries() * instances, ZERO_EXPONENT);
    for entry in 0..layout.entries() {
        let bases: Vec<usize> = layout.lane_bases(entry).into_iter().flatten().collect();
        for inst in 0..instances {
            let mut max = 0.0f64;
            for &base in &bases {
                let v = values[base + inst];
                if !v.is_finite() {
                    return Err(Error::numeric(format!("non-finite value {v} at element {}", base + inst)));
                }
                max = max.max(v.abs());
            }
            exponents[entry * instances + inst] = exponent_of_max(max);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_partition_8x8_kernel3() {
        let l = partition_blocks(&[8, 8, 3, 3], DataRole::Weight).unwrap();
        assert_eq!(l.entries(), 4);
        assert_eq!(l.instances(), 9);
    }

    #[test]
    fn activation_partitions() {
        let l = partition_blocks(&[4, 4], DataRole::Activation).unwrap();
        assert_eq!((l.entries(), l.instances()), (1, 1));

        let l = partition_blocks(&[6, 5], DataRole::Activation).unwrap();
        assert_eq!(l.entries(), 4);
        assert_eq!(l.grid(), (2, 2));
        // last row block holds channel 4 only, last column block batch 4..6
        assert_eq!(l.valid_extent(3), (1, 2));
        assert_eq!(l.valid_lanes(0), 16);
        assert_eq!(l.valid_lanes(3), 2);
    }

    #[test]
    fn missing_axis_is_config_error() {
        assert!(matches!(partition_blocks(&[16], DataRole::Weight), Err(Error::Config(_))));
        assert!(matches!(partition_blocks(&[4, 0], DataRole::Activation), Err(Error::Config(_))));
    }

    #[test]
    fn layout_locate_inverts_element_index() {
        let l = partition_blocks(&[6, 5, 2, 3], DataRole::ActivationGradient).unwrap();
        let mut seen = vec![false; l.len()];
        for entry in 0..l.entries() {
            for inst in 0..l.instances() {
                for lane in 0..BLOCK_LANES {
                    if let Some(i) = l.element_index(entry, inst, lane) {
                        assert!(!seen[i]);
                        seen[i] = true;
                        assert_eq!(l.locate(i), (entry, inst, lane));
                    }
                }
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn exponent_examples() {
        assert_eq!(compute_block_exponent(&[0.0; 16]).unwrap(), -128);
        assert_eq!(compute_block_exponent(&[1.0, -0.5]).unwrap(), 0);
        assert_eq!(compute_block_exponent(&[0.3, 0.1]).unwrap(), -1);
        assert_eq!(compute_block_exponent(&[-4.0]).unwrap(), 2);
        assert_eq!(compute_block_exponent(&[4.000001]).unwrap(), 3);
        assert_eq!(compute_block_exponent(&[1e300]).unwrap(), 127);
        assert!(matches!(compute_block_exponent(&[f64::NAN]), Err(Error::Numeric(_))));
        assert!(matches!(compute_block_exponent(&[1.0, f64::INFINITY]), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_bit_block_reconstructs_to_zero() {
        let b = quantize_block(&[0.7, -3.0, 2.5], 0).unwrap();
        assert!(b.is_skippable());
        assert_eq!(b.dequantize(), [0.0; 16]);
    }

    #[test]
    fn saturating_power_of_two_block() {
        let e = 3;
        let v = [8.0f64; 16];
        let b = quantize_block(&v, 8).unwrap();
        assert_eq!(b.exponent, e);
        let q = step_size(e, 8);
        assert_eq!(b.dequantize(), [127.0 * q; 16]);
    }

    #[test]
    fn ties_round_to_even() {
        // e = 0, b = 4 → q = 1/8; 0.1875 = 1.5 q → 2, 0.3125 = 2.5 q → 2
        let b = quantize_block(&[1.0, 0.1875, 0.3125, -0.0625], 4).unwrap();
        assert_eq!(&b.mantissas[..4], &[7, 2, 2, 0]);
    }

    #[test]
    fn uniform_8bit_relative_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..4 * 12 * 5 * 5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let l = partition_blocks(&[4, 12, 5, 5], DataRole::Activation).unwrap();
        let t = quantize_tensor(&vals, &l, Bitwidths::Uniform(8)).unwrap();
        let deq = t.dequantize();
        for (i, (&v, &d)) in vals.iter().zip(&deq).enumerate() {
            let (entry, inst, _) = l.locate(i);
            let scale = pow2(t.block(entry, inst).exponent as i32);
            // half a step from rounding plus one step of clamp at the top
            assert!((v - d).abs() <= scale * (pow2(-8) + pow2(-7)), "{v} {d}");
        }
    }

    #[test]
    fn zero_map_entry_zeroes_all_instances() {
        let vals: Vec<f64> = (0..8 * 8 * 9).map(|i| (i as f64 * 0.37).sin()).collect();
        let l = partition_blocks(&[8, 8, 3, 3], DataRole::Weight).unwrap();
        let t = quantize_tensor(&vals, &l, Bitwidths::PerEntry(&[8, 0, 8, 8])).unwrap();
        let deq = t.dequantize();
        for (i, &d) in deq.iter().enumerate() {
            let (entry, _, _) = l.locate(i);
            if entry == 1 {
                assert_eq!(d, 0.0);
            }
        }
        assert!(deq.iter().any(|&d| d != 0.0));
    }

    #[test]
    fn map_mismatch_is_config_error() {
        let l = partition_blocks(&[8, 8], DataRole::Weight).unwrap();
        let vals = vec![0.1; 64];
        let r = quantize_tensor(&vals, &l, Bitwidths::PerEntry(&[4, 4]));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn padding_lanes_are_zero_mantissa() {
        let l = partition_blocks(&[6, 5], DataRole::Activation).unwrap();
        let vals = vec![0.9; 30];
        let t = quantize_tensor(&vals, &l, Bitwidths::Uniform(8)).unwrap();
        let last = t.block(3, 0);
        let valid: Vec<usize> = (0..16).filter(|&ln| l.lane_base(3, ln).is_some()).collect();
        for lane in 0..16 {
            if !valid.contains(&lane) {
                assert_eq!(last.mantissas[lane], 0);
            }
        }
    }

    #[test]
    fn dump_round_trip_and_header() {
        let l = partition_blocks(&[6, 5, 2, 2], DataRole::Activation).unwrap();
        let vals: Vec<f64> = (0..l.len()).map(|i| (i as f64).cos()).collect();
        let t = quantize_tensor(&vals, &l, Bitwidths::PerEntry(&[8, 6, 4, 2])).unwrap();
        let mut bytes = Vec::new();
        t.write_dump(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"BFP1");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 4);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 6);
        let header = 4 + 2 + 4 * 4 + 8;
        assert_eq!(bytes.len(), header + 4 * 4 * (2 + 32));
        let back = BfpTensor::read_dump(&bytes[..]).unwrap();
        assert_eq!(back, t);
        assert!(BfpTensor::read_dump(&bytes[..bytes.len() - 1]).is_err());
    }

    fn block_mse(values: &[f64], b: u8) -> f64 {
        let blk = quantize_block(values, b).unwrap();
        let d = blk.dequantize();
        values.iter().zip(d).map(|(v, d)| (v - d).powi(2)).sum::<f64>() / 16.0
    }

    #[test]
    fn gaussian_mse_ratio_near_16() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut mse = [0.0f64; 3];
        for _ in 0..20_000 {
            let v: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
            for (k, b) in [2u8, 4, 6].into_iter().enumerate() {
                mse[k] += block_mse(&v, b);
            }
        }
        for k in 0..2 {
            let ratio = mse[k] / mse[k + 1];
            assert!((16.0 * 0.7..=16.0 * 1.3).contains(&ratio), "ratio {ratio}");
        }
    }

    proptest! {
        #[test]
        fn grid_points_are_fixed_points(
            e in -20i8..20,
            bsel in 0usize..4,
            ks in prop::collection::vec(-128i32..128, 16),
        ) {
            let b = [2u8, 4, 6, 8][bsel];
            let half = 1i32 << (b - 1);
            let q = step_size(e, b);
            let mut vals: Vec<f64> = ks.iter().map(|k| (k % half) as f64 * q).collect();
            // pin the range so the block exponent is e
            vals[0] = -(half as f64) * q;
            let blk = quantize_block(&vals, b).unwrap();
            prop_assert_eq!(blk.exponent, e);
            let d = blk.dequantize();
            for (v, d) in vals.iter().zip(d) {
                prop_assert_eq!(*v, d);
            }
        }

        #[test]
        fn mse_monotone_in_bitwidth(vals in prop::collection::vec(-10.0f64..10.0, 16)) {
            let mut prev = f64::INFINITY;
            for b in 1..=8u8 {
                let m = block_mse(&vals, b);
                prop_assert!(m <= prev + 1e-12, "b={} mse={} prev={}", b, m, prev);
                prev = m;
            }
        }

        #[test]
        fn power_of_two_scaling_equivariance(
            vals in prop::collection::vec(-10.0f64..10.0, 16),
            k in -10i32..10,
            b in 1u8..=8,
        ) {
            let s = pow2(k);
            let scaled: Vec<f64> = vals.iter().map(|v| v * s).collect();
            let a = quantize_block(&vals, b).unwrap();
            let c = quantize_block(&scaled, b).unwrap();
            if a.exponent != ZERO_EXPONENT {
                prop_assert_eq!(c.exponent as i32, a.exponent as i32 + k);
                prop_assert_eq!(a.mantissas, c.mantissas);
                for (x, y) in a.dequantize().iter().zip(c.dequantize()) {
                    prop_assert_eq!(x * s, y);
                }
            }
        }

        #[test]
        fn fake_quantize_matches_block_path(
            n in 1usize..7, c in 1usize..7, hw in 1usize..4, seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = partition_blocks(&[n, c, hw, hw], DataRole::Activation).unwrap();
            let vals: Vec<f64> = (0..l.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let bits: Vec<u8> = (0..l.entries()).map(|_| [0u8, 2, 4, 6, 8][rng.random_range(0..5)]).collect();
            let t = quantize_tensor(&vals, &l, Bitwidths::PerEntry(&bits)).unwrap();
            let mut out = vec![0.0; vals.len()];
            let mut exps = Vec::new();
            fake_quantize(&vals, &l, Bitwidths::PerEntry(&bits), &mut out, &mut exps).unwrap();
            prop_assert_eq!(out, t.dequantize());
            let want: Vec<i8> = t.blocks().iter().map(|b| b.exponent).collect();
            prop_assert_eq!(exps, want);
        }
    }
}
