//! Relative quantization sensitivity analytics.
//!
//! Per map entry `i`:
//!
//! * `S_i = (2^e)² / 16 · Σ_j g_j²`, summed over every block instance and
//!   every mini-batch of the epoch (`e` is the exponent that block was
//!   quantized with, `g` the loss gradient of the quantized tensor);
//! * `T_i` the number of MACs that read the entry's elements;
//! * `r_i = ½ log2(S_i / T_i)`, or `−∞` when `S_i = 0`.

use std::io::Write;

use crate::bfp::{BlockLayout, DataRole, BLOCK_LANES};
use crate::error::{Error, Result};
use crate::nnkernel::{LayerDescriptor, MacShape};

/// Number of values per block in the loss-noise estimator.
pub const BLOCK_VALUES: f64 = BLOCK_LANES as f64;

pub const SENSITIVITY_CSV_HEADER: &str = "epoch,category,layer,entry_id,S,T,r";

/// `(2^e)²/16 · Σ g²`, zero for the all-zero exponent. Padded lanes must be passed as zeros (or omitted).
pub fn block_sensitivity(exponent: i8, grads: &[f64]) -> Result<f64> {
    let mut sq = 0.0;
    for &g in grads {
        if !g.is_finite() {
            return Err(Error::numeric(format!("non-finite gradient {g}")));
        }
        sq += g * g;
    }
    Ok(range_sq(exponent) / BLOCK_VALUES * sq)
}

#[inline]
pub(crate) fn range_sq(exponent: i8) -> f64 {
    // an all-zero block has no range, so quantizing it adds no noise
    if exponent == crate::bfp::ZERO_EXPONENT {
        return 0.0;
    }
    crate::bfp::pow2(2 * exponent as i32)
}

/// `½ log2(S/T)`; `S = 0` yields the `−∞` sentinel.
pub fn relative_sensitivity(s: f64, t: f64) -> Result<f64> {
    if s == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if !(t > 0.0) {
        return Err(Error::config(format!("compute amount T = {t} must be positive")));
    }
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::numeric(format!("sensitivity S = {s} must be finite and non-negative")));
    }
    Ok(0.5 * (s / t).log2())
}

/// First-order mean square loss noise `2/(3·N·16) · Σ S_i 2^(−2 b_i)`.
pub fn delta_l2(s: &[f64], bitwidths: &[f64]) -> Result<f64> {
    if s.len() != bitwidths.len() {
        return Err(Error::config(format!(
            "{} sensitivities but {} bit-widths",
            s.len(),
            bitwidths.len()
        )));
    }
    if s.is_empty() {
        return Ok(0.0);
    }
    let n = s.len() as f64;
    let sum: f64 = s
        .iter()
        .zip(bitwidths)
        .map(|(&s, &b)| s * (-2.0 * b).exp2())
        .sum();
    Ok(2.0 / (3.0 * n * BLOCK_VALUES) * sum)
}

fn row_taps(len_in: usize, len_out: usize, kernel: usize, padding: usize, stride: usize) -> usize {
    // number of (output, kernel) pairs that land inside the input
    let mut hits = 0;
    for o in 0..len_out {
        for k in 0..kernel {
            let pos = (o * stride + k) as isize - padding as isize;
            if pos >= 0 && (pos as usize) < len_in {
                hits += 1;
            }
        }
    }
    hits
}

/// MACs per mini-batch that read each map entry of the layer's weight or
/// input-activation tensor.
pub fn block_compute_amount(
    layer: &LayerDescriptor,
    input_dims: &[usize],
    role: DataRole,
    batch: usize,
) -> Result<Vec<f64>> {
    let shape = layer.mac_shape(input_dims).ok_or_else(|| {
        Error::config(format!("layer {:?} performs no MACs", layer.kind_name()))
    })?;
    compute_amount_for(&shape, role, batch)
}

pub(crate) fn compute_amount_for(shape: &MacShape, role: DataRole, batch: usize) -> Result<Vec<f64>> {
    if batch == 0 || shape.is_degenerate() {
        return Err(Error::config(format!("zero-sized layer {shape:?} (batch {batch})")));
    }
    match role {
        DataRole::Weight => {
            let layout = BlockLayout::new(&shape.weight_dims(), role)?;
            let uses = match *shape {
                MacShape::Conv2d { .. } => {
                    let (ho, wo) = shape.output_hw();
                    ho * wo * batch
                }
                MacShape::Linear { .. } => batch,
            };
            Ok((0..layout.entries())
                .map(|e| (layout.valid_lanes(e) * layout.instances() * uses) as f64)
                .collect())
        }
        DataRole::Activation => {
            let layout = BlockLayout::new(&shape.input_dims(batch), role)?;
            let per_lane = match *shape {
                MacShape::Conv2d {
                    c_out,
                    kernel,
                    padding,
                    stride,
                    h_in,
                    w_in,
                    ..
                } => {
                    let (ho, wo) = shape.output_hw();
                    c_out
                        * row_taps(h_in, ho, kernel, padding, stride)
                        * row_taps(w_in, wo, kernel, padding, stride)
                }
                MacShape::Linear { out_features, .. } => out_features,
            };
            Ok((0..layout.entries())
                .map(|e| (layout.valid_lanes(e) * per_lane) as f64)
                .collect())
        }
        DataRole::ActivationGradient => Err(Error::config(
            "activation gradients are a static operand and carry no bit-width map",
        )),
    }
}

/// Accumulated `S` and `T` of one dynamically quantized tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSensitivity {
    pub layer: usize,
    pub s: Vec<f64>,
    pub t: Vec<f64>,
}

impl TensorSensitivity {
    pub fn zeros(layer: usize, entries: usize) -> Self {
        Self {
            layer,
            s: vec![0.0; entries],
            t: vec![0.0; entries],
        }
    }

    pub fn relative(&self) -> Result<Vec<f64>> {
        self.s
            .iter()
            .zip(&self.t)
            .map(|(&s, &t)| relative_sensitivity(s, t))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityRecord {
    pub layer: usize,
    pub entry: usize,
    pub s: f64,
    pub t: f64,
}

impl SensitivityRecord {
    pub fn r(&self) -> Result<f64> {
        relative_sensitivity(self.s, self.t)
    }
}

/// One epoch's sensitivity totals for one data category.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSensitivitySet {
    pub category: DataRole,
    pub epoch: usize,
    pub minibatches: usize,
    pub tensors: Vec<TensorSensitivity>,
}

impl EpochSensitivitySet {
    /// A set keyed by `(layer, entry count)` with all totals at zero.
    pub fn new(category: DataRole, epoch: usize, keys: &[(usize, usize)]) -> Self {
        Self {
            category,
            epoch,
            minibatches: 0,
            tensors: keys
                .iter()
                .map(|&(layer, n)| TensorSensitivity::zeros(layer, n))
                .collect(),
        }
    }

    pub fn entries(&self) -> usize {
        self.tensors.iter().map(|t| t.s.len()).sum()
    }

    fn tensor_mut(&mut self, layer: usize) -> Result<&mut TensorSensitivity> {
        self.tensors
            .iter_mut()
            .find(|t| t.layer == layer)
            .ok_or_else(|| Error::internal(format!("no sensitivity tensor for layer {layer}")))
    }

    pub fn accumulate(&mut self, records: &[SensitivityRecord]) -> Result<()> {
        for rec in records {
            let t = self.tensor_mut(rec.layer)?;
            if rec.entry >= t.s.len() {
                return Err(Error::internal(format!(
                    "entry {} out of range for layer {} ({} entries)",
                    rec.entry,
                    rec.layer,
                    t.s.len()
                )));
            }
            t.s[rec.entry] += rec.s;
            t.t[rec.entry] += rec.t;
        }
        self.minibatches += 1;
        Ok(())
    }

    /// Adds one tensor's per-entry contributions without counting a mini-batch.
    pub fn accumulate_tensor(&mut self, layer: usize, s: &[f64], t: &[f64]) -> Result<()> {
        let dst = self.tensor_mut(layer)?;
        if dst.s.len() != s.len() || dst.t.len() != t.len() {
            return Err(Error::internal(format!(
                "layer {layer}: {} entries accumulated into {}",
                s.len(),
                dst.s.len()
            )));
        }
        for (d, v) in dst.s.iter_mut().zip(s) {
            *d += v;
        }
        for (d, v) in dst.t.iter_mut().zip(t) {
            *d += v;
        }
        Ok(())
    }

    /// Associative merge of a partial set with the same key schema.
    pub fn merge(&mut self, other: &EpochSensitivitySet) -> Result<()> {
        if other.category != self.category || other.tensors.len() != self.tensors.len() {
            return Err(Error::internal("merging sensitivity sets with different schemas"));
        }
        for t in &other.tensors {
            self.accumulate_tensor(t.layer, &t.s, &t.t)?;
        }
        self.minibatches += other.minibatches;
        Ok(())
    }

    /// All `r`, concatenated in tensor order.
    pub fn relative(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.entries());
        for t in &self.tensors {
            out.extend(t.relative()?);
        }
        Ok(out)
    }

    pub fn compute_amounts(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.t.iter().copied()).collect()
    }

    pub fn records(&self) -> impl Iterator<Item = SensitivityRecord> + '_ {
        self.tensors.iter().flat_map(|t| {
            t.s.iter().zip(&t.t).enumerate().map(move |(entry, (&s, &tt))| SensitivityRecord {
                layer: t.layer,
                entry,
                s,
                t: tt,
            })
        })
    }

    pub fn reset(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.minibatches = 0;
        for t in &mut self.tensors {
            t.s.iter_mut().for_each(|v| *v = 0.0);
            t.t.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn write_csv_rows<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("sensitivity.csv", e);
        for rec in self.records() {
            let r = if rec.t > 0.0 || rec.s == 0.0 {
                rec.r()?
            } else {
                f64::NAN
            };
            writeln!(
                w,
                "{},{},{},{},{:e},{:e},{}",
                self.epoch,
                self.category.as_str(),
                rec.layer,
                rec.entry,
                rec.s,
                rec.t,
                fmt_r(r)
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

pub(crate) fn fmt_r(r: f64) -> String {
    if r == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{r:.6}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkernel::LayerDescriptor;
    use approx_eq::assert_close;
    use proptest::prelude::*;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
            }};
        }
        pub(crate) use assert_close;
    }

    #[test]
    fn block_sensitivity_examples() {
        assert_eq!(block_sensitivity(0, &[0.0; 16]).unwrap(), 0.0);
        assert_eq!(block_sensitivity(0, &[1.0; 16]).unwrap(), 1.0);
        let mut g = [0.0; 16];
        g[5] = 0.5;
        assert_eq!(block_sensitivity(2, &g).unwrap(), 0.25);
        assert!(matches!(block_sensitivity(0, &[f64::NAN]), Err(Error::Numeric(_))));
    }

    #[test]
    fn relative_sensitivity_examples() {
        assert_eq!(relative_sensitivity(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(relative_sensitivity(4.0, 1.0).unwrap(), 1.0);
        assert_eq!(relative_sensitivity(0.0, 7.0).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(relative_sensitivity(1.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(relative_sensitivity(1.0, -2.0), Err(Error::Config(_))));
    }

    #[test]
    fn delta_l2_examples() {
        assert_eq!(delta_l2(&[0.0, 0.0], &[2.0, 4.0]).unwrap(), 0.0);
        assert_close!(delta_l2(&[1.0], &[2.0]).unwrap(), 1.0 / 384.0, 1e-15);
        let s = [0.3, 2.0, 7.5];
        let b = [1.0, 3.0, 6.0];
        let b1: Vec<f64> = b.iter().map(|x| x + 1.0).collect();
        let ratio = delta_l2(&s, &b).unwrap() / delta_l2(&s, &b1).unwrap();
        assert_close!(ratio, 4.0, 1e-12);
        assert!(matches!(delta_l2(&s, &b[..2]), Err(Error::Config(_))));
        // b = 0 contributes S·1
        assert_close!(delta_l2(&[3.0], &[0.0]).unwrap(), 2.0 * 3.0 / 48.0, 1e-15);
    }

    #[test]
    fn linear_weight_compute_amount() {
        let lin = LayerDescriptor::linear(8, 4);
        let t = block_compute_amount(&lin, &[8, 8], DataRole::Weight, 8).unwrap();
        assert_eq!(t, vec![128.0, 128.0]);
    }

    /// Brute-force count of the MACs of a stride-1/2 conv layer that read
    /// each weight element and each (non-padding) input element.
    fn conv_mac_counts(
        c_in: usize,
        c_out: usize,
        k: usize,
        pad: usize,
        stride: usize,
        h: usize,
        w: usize,
        batch: usize,
    ) -> (Vec<usize>, Vec<usize>) {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut wcount = vec![0usize; c_out * c_in * k * k];
        let mut acount = vec![0usize; batch * c_in * h * w];
        for n in 0..batch {
            for co in 0..c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    wcount[((co * c_in + ci) * k + ky) * k + kx] += 1;
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acount[((n * c_in + ci) * h + iy as usize) * w + ix as usize] += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (wcount, acount)
    }

    fn fold(counts: &[usize], layout: &BlockLayout) -> Vec<f64> {
        let mut out = vec![0.0; layout.entries()];
        for (i, &c) in counts.iter().enumerate() {
            out[layout.locate(i).0] += c as f64;
        }
        out
    }

    #[test]
    fn conv3x3_same_weight_entry_is_18432() {
        let conv = LayerDescriptor::conv2d(4, 4, 3, 1, 1);
        let t = block_compute_amount(&conv, &[2, 4, 8, 8], DataRole::Weight, 2).unwrap();
        assert_eq!(t, vec![18432.0]);
        let (wc, _) = conv_mac_counts(4, 4, 3, 1, 1, 8, 8, 2);
        assert_eq!(wc.iter().sum::<usize>(), 18432);
    }

    #[test]
    fn conv_compute_amounts_match_brute_force() {
        for &(c_in, c_out, k, pad, stride, h, w, batch) in &[
            (5usize, 6usize, 3usize, 1usize, 1usize, 5usize, 4usize, 3usize),
            (1, 4, 3, 1, 1, 6, 6, 5),
            (3, 2, 3, 0, 2, 7, 7, 2),
        ] {
            let conv = LayerDescriptor::conv2d(c_in, c_out, k, pad, stride);
            let (wc, ac) = conv_mac_counts(c_in, c_out, k, pad, stride, h, w, batch);
            let dims = [batch, c_in, h, w];
            let wl = BlockLayout::new(&[c_out, c_in, k, k], DataRole::Weight).unwrap();
            let al = BlockLayout::new(&dims, DataRole::Activation).unwrap();
            assert_eq!(
                block_compute_amount(&conv, &dims, DataRole::Weight, batch).unwrap(),
                fold(&wc, &wl)
            );
            assert_eq!(
                block_compute_amount(&conv, &dims, DataRole::Activation, batch).unwrap(),
                fold(&ac, &al)
            );
        }
    }

    #[test]
    fn non_mac_or_empty_layer_errors() {
        let relu = LayerDescriptor::relu();
        assert!(matches!(
            block_compute_amount(&relu, &[2, 4], DataRole::Weight, 2),
            Err(Error::Config(_))
        ));
        let lin = LayerDescriptor::linear(4, 4);
        assert!(matches!(
            block_compute_amount(&lin, &[0, 4], DataRole::Weight, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn accumulate_examples() {
        let mut set = EpochSensitivitySet::new(DataRole::Weight, 1, &[(0, 2)]);
        set.accumulate(&[SensitivityRecord { layer: 0, entry: 1, s: 3.0, t: 2.0 }]).unwrap();
        assert_eq!(set.tensors[0].s, vec![0.0, 3.0]);
        assert_eq!(set.tensors[0].t, vec![0.0, 2.0]);

        // S and T both sum, so a repeated mini-batch doubles S and T and
        // leaves r unchanged; doubling S alone at fixed T shifts r by ½.
        let mut one = EpochSensitivitySet::new(DataRole::Weight, 1, &[(0, 1)]);
        let rec = [SensitivityRecord { layer: 0, entry: 0, s: 5.0, t: 1.0 }];
        one.accumulate(&rec).unwrap();
        let r1 = one.relative().unwrap()[0];
        one.accumulate(&rec).unwrap();
        assert_eq!(one.tensors[0].s, vec![10.0]);
        assert_eq!(one.minibatches, 2);
        assert_close!(one.relative().unwrap()[0], r1, 1e-12);
        let r_fixed_t = relative_sensitivity(one.tensors[0].s[0], 1.0).unwrap();
        assert_close!(r_fixed_t - r1, 0.5, 1e-12);

        let empty = EpochSensitivitySet::new(DataRole::Activation, 1, &[(0, 3), (2, 2)]);
        assert!(empty.relative().unwrap().iter().all(|&r| r == f64::NEG_INFINITY));

        let err = set.accumulate(&[SensitivityRecord { layer: 9, entry: 0, s: 1.0, t: 1.0 }]);
        assert!(matches!(err, Err(Error::Internal(_))));
        let err = set.accumulate(&[SensitivityRecord { layer: 0, entry: 5, s: 1.0, t: 1.0 }]);
        assert!(matches!(err, Err(Error::Internal(_))));
    }

    #[test]
    fn csv_rows_have_schema() {
        let mut set = EpochSensitivitySet::new(DataRole::Activation, 3, &[(1, 2)]);
        set.accumulate_tensor(1, &[4.0, 0.0], &[1.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        set.write_csv_rows(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "3,activation,1,0,4e0,1e0,1.000000");
        assert!(lines[1].ends_with(",-inf"));
        assert_eq!(SENSITIVITY_CSV_HEADER.split(',').count(), 7);
    }

    proptest! {
        #[test]
        fn scaling_s_shifts_r(
            s in prop::collection::vec(1e-6f64..1e6, 2..20),
            t in prop::collection::vec(1.0f64..1e4, 20),
            c in 1e-3f64..1e3,
        ) {
            let r: Vec<f64> = s.iter().zip(&t).map(|(&s, &t)| relative_sensitivity(s, t).unwrap()).collect();
            let rc: Vec<f64> = s.iter().zip(&t).map(|(&s, &t)| relative_sensitivity(c * s, t).unwrap()).collect();
            let shift = 0.5 * c.log2();
            for (a, b) in r.iter().zip(&rc) {
                prop_assert!((b - a - shift).abs() < 1e-9);
            }
            let mut ia: Vec<usize> = (0..r.len()).collect();
            let mut ib = ia.clone();
            ia.sort_by(|&i, &j| r[i].total_cmp(&r[j]).then(i.cmp(&j)));
            ib.sort_by(|&i, &j| rc[i].total_cmp(&rc[j]).then(i.cmp(&j)));
            prop_assert_eq!(ia, ib);
        }

        #[test]
        fn delta_l2_non_increasing_per_entry(
            s in prop::collection::vec(0.0f64..100.0, 1..10),
            idx in 0usize..10,
            b in prop::collection::vec(0.0f64..8.0, 10),
            bump in 0.0f64..3.0,
        ) {
            let b = &b[..s.len()];
            let i = idx % s.len();
            let mut b2 = b.to_vec();
            b2[i] += bump;
            prop_assert!(delta_l2(&s, &b2).unwrap() <= delta_l2(&s, b).unwrap() + 1e-15);
        }

        #[test]
        fn accumulation_order_independent(
            batches in prop::collection::vec(prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 3), 1..8),
            perm_seed in 0u64..100,
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut a = EpochSensitivitySet::new(DataRole::Weight, 1, &[(0, 3)]);
            let mut b = a.clone();
            let recs: Vec<Vec<SensitivityRecord>> = batches.iter().map(|bt| {
                bt.iter().enumerate().map(|(e, &(s, t))| SensitivityRecord { layer: 0, entry: e, s, t }).collect()
            }).collect();
            for r in &recs { a.accumulate(r).unwrap(); }
            let mut order: Vec<usize> = (0..recs.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            for &i in &order { b.accumulate(&recs[i]).unwrap(); }
            for (x, y) in a.tensors[0].s.iter().zip(&b.tensors[0].s) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}
