//! Adaptive bit-width map generation.
//!
//! Once per epoch and data category the relative sensitivities `r` are turned
//! into bit-widths `b_i = clip(r_i − λ, 0, β)`. The global coefficient `λ` is
//! estimated on the first generation and afterwards re-tuned by a few rounds
//! of bracketed linear interpolation so that the average bit-width tracks the
//! target `α`. The real-valued result is smoothed with an exponential moving
//! average and rounded to `{0, 2, 4, 6, 8}` for execution.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bfp::{DataRole, EXECUTABLE_BITWIDTHS};
use crate::error::{Error, Result};
use crate::sens::EpochSensitivitySet;

pub const DEFAULT_BETA: f64 = 8.0;
pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_ITERATIONS: usize = 3;
/// Bit-width of every block before the first map generation.
pub const INITIAL_BITWIDTH: f64 = 4.0;

pub const BITMAP_CSV_HEADER: &str = "epoch,category,layer,entry_id,smoothed_b,executable_b,lambda";

/// How the average bit-width is formed inside λ estimation and tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Plain mean over map entries.
    #[default]
    Unweighted,
    /// Mean weighted by each entry's MAC count `T_i`.
    Compute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantCoeffState {
    pub category: DataRole,
    /// `None` until the first map generation.
    pub lambda: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
}

impl QuantCoeffState {
    pub fn new(category: DataRole, alpha: f64, beta: f64, iterations: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= beta) {
            return Err(Error::config(format!("target α = {alpha} must lie in (0, β = {beta}]")));
        }
        if iterations == 0 {
            return Err(Error::config("interpolation iterations L must be ≥ 1"));
        }
        Ok(Self {
            category,
            lambda: None,
            alpha,
            beta,
            iterations,
        })
    }
}

#[inline]
fn clip_bits(r: f64, lambda: f64, beta: f64) -> f64 {
    if r == f64::NEG_INFINITY {
        0.0
    } else {
        (r - lambda).min(beta).max(0.0)
    }
}

pub fn bitwidths_from_lambda(r: &[f64], lambda: f64, beta: f64) -> Vec<f64> {
    r.iter().map(|&r| clip_bits(r, lambda, beta)).collect()
}

/// Finite `r` with their averaging weights.
fn finite_view(r: &[f64], weights: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
    let ws = check_view(r, weights)?;
    let (rs, ws): (Vec<f64>, Vec<f64>) = r.iter().zip(ws).filter(|(r, _)| r.is_finite()).unzip();
    if rs.is_empty() {
        return Err(Error::config("no finite relative sensitivity to estimate λ from"));
    }
    Ok((rs, ws))
}

/// Averaging weights for every entry after checking `r` and `weights`.
fn check_view(r: &[f64], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if let Some(w) = weights {
        if w.len() != r.len() {
            return Err(Error::config(format!("{} weights for {} entries", w.len(), r.len())));
        }
        if w.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::config("averaging weights must be positive"));
        }
    }
    if let Some(i) = r.iter().position(|&ri| ri.is_nan() || ri == f64::INFINITY) {
        return Err(Error::numeric(format!("relative sensitivity {} at entry {i}", r[i])));
    }
    Ok(weights.map_or_else(|| vec![1.0; r.len()], <[f64]>::to_vec))
}

fn weighted_mean_bits(r: &[f64], w: &[f64], lambda: f64, beta: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&r, &w) in r.iter().zip(w) {
        num += w * clip_bits(r, lambda, beta);
        den += w;
    }
    num / den
}

/// Mean of `clip(r − λ, 0, β)` over all entries; `−∞` entries count as 0.
pub fn mean_bitwidth(r: &[f64], lambda: f64, beta: f64, weights: Option<&[f64]>) -> Result<f64> {
    let ws = check_view(r, weights)?;
    if r.is_empty() {
        return Err(Error::config("mean bit-width of an empty map"));
    }
    Ok(weighted_mean_bits(r, &ws, lambda, beta))
}

/// Unconstrained estimate `λ̂ = mean(r) − α` over finite entries.
pub fn initial_lambda(r: &[f64], alpha: f64) -> Result<f64> {
    initial_lambda_weighted(r, alpha, None)
}

pub fn initial_lambda_weighted(r: &[f64], alpha: f64, weights: Option<&[f64]>) -> Result<f64> {
    let (rs, ws) = finite_view(r, weights)?;
    let total: f64 = ws.iter().sum();
    let mean = rs.iter().zip(&ws).map(|(r, w)| r * w).sum::<f64>() / total;
    Ok(mean - alpha)
}

#[derive(Debug, Clone, Copy)]
pub struct TuneOptions<'a> {
    pub iterations: usize,
    pub beta: f64,
    pub weights: Option<&'a [f64]>,
}

impl Default for TuneOptions<'_> {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            beta: DEFAULT_BETA,
            weights: None,
        }
    }
}

/// Bracketed linear-interpolation tuning of λ, starting from `lambda_in`.
///
/// The bracket starts at `[min(r) − α, max(r) − α]`, whose mean bit-widths
/// lie above and below `α`. Each round interpolates from the current λ
/// toward the bracket end on the other side of `α` and moves that side of
/// the bracket to the current λ. `−∞` entries take no part in the bracket
/// but count as 0 bits in every mean.
pub fn tune_lambda(lambda_in: f64, r: &[f64], alpha: f64, opts: TuneOptions<'_>) -> Result<f64> {
    let beta = opts.beta;
    if !(alpha > 0.0 && alpha <= beta) {
        return Err(Error::config(format!("target α = {alpha} must lie in (0, β = {beta}]")));
    }
    if !lambda_in.is_finite() {
        return Err(Error::numeric(format!("λ_in = {lambda_in}")));
    }
    let ws = check_view(r, opts.weights)?;
    let (rs, _) = finite_view(r, opts.weights)?;
    let mean = |lambda: f64| weighted_mean_bits(r, &ws, lambda, beta);
    let (rmin, rmax) = rs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)));

    let mut out = lambda_in;
    let mut lo = rmin - alpha;
    let mut hi = rmax - alpha;
    for _ in 0..opts.iterations {
        let b_lo = mean(lo);
        let b_hi = mean(hi);
        let b = mean(out);
        if b > alpha {
            let den = b - b_hi;
            if den == 0.0 {
                continue;
            }
            let t = (b - alpha) / den;
            let next = (1.0 - t) * out + t * hi;
            lo = out;
            out = next;
        } else {
            let den = b - b_lo;
            if den == 0.0 {
                continue;
            }
            let t = (b - alpha) / den;
            let next = (1.0 - t) * out + t * lo;
            hi = out;
            out = next;
        }
    }
    Ok(out)
}

/// `γ·b_last + (1 − γ)·b_new`, elementwise.
pub fn smooth_map(last: &[f64], new: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if last.len() != new.len() {
        return Err(Error::config(format!(
            "smoothing maps of {} and {} entries",
            last.len(),
            new.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("smoothing factor γ = {gamma} outside [0, 1]")));
    }
    Ok(last
        .iter()
        .zip(new)
        .map(|(&l, &n)| gamma * l + (1.0 - gamma) * n)
        .collect())
}

/// Nearest of `{0, 2, 4, 6, 8}`; odd integers round up.
pub fn round_bitwidth(b: f64) -> u8 {
    let b = b.clamp(0.0, 8.0);
    let level = (b / 2.0 + 0.5).floor() as usize;
    EXECUTABLE_BITWIDTHS[level.min(EXECUTABLE_BITWIDTHS.len() - 1)]
}

pub fn round_map(smoothed: &[f64], beta: f64) -> Vec<u8> {
    smoothed
        .iter()
        .map(|&b| {
            if !(0.0..=beta).contains(&b) {
                log::warn!("smoothed bit-width {b} outside [0, {beta}], clamping");
            }
            round_bitwidth(b.clamp(0.0, beta))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapTensor {
    pub layer: usize,
    pub smoothed: Vec<f64>,
    pub executable: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitWidthMap {
    pub category: DataRole,
    /// Epoch whose sensitivities produced the map (0 for the initial map).
    pub epoch: usize,
    pub tensors: Vec<MapTensor>,
}

impl BitWidthMap {
    /// Map with every entry at `bits`, keyed by `(layer, entry count)`.
    pub fn uniform(category: DataRole, keys: &[(usize, usize)], bits: f64) -> Self {
        let exec = round_bitwidth(bits);
        Self {
            category,
            epoch: 0,
            tensors: keys
                .iter()
                .map(|&(layer, n)| MapTensor {
                    layer,
                    smoothed: vec![bits; n],
                    executable: vec![exec; n],
                })
                .collect(),
        }
    }

    pub fn initial(category: DataRole, keys: &[(usize, usize)]) -> Self {
        Self::uniform(category, keys, INITIAL_BITWIDTH)
    }

    pub fn keys(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(|t| (t.layer, t.smoothed.len())).collect()
    }

    pub fn entries(&self) -> usize {
        self.tensors.iter().map(|t| t.smoothed.len()).sum()
    }

    pub fn tensor(&self, layer: usize) -> Option<&MapTensor> {
        self.tensors.iter().find(|t| t.layer == layer)
    }

    pub fn smoothed_flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.smoothed.iter().copied()).collect()
    }

    pub fn executable_flat(&self) -> Vec<u8> {
        self.tensors.iter().flat_map(|t| t.executable.iter().copied()).collect()
    }

    fn with_flat(&self, epoch: usize, smoothed: Vec<f64>, executable: Vec<u8>) -> Self {
        let mut tensors = Vec::with_capacity(self.tensors.len());
        let mut at = 0;
        for t in &self.tensors {
            let n = t.smoothed.len();
            tensors.push(MapTensor {
                layer: t.layer,
                smoothed: smoothed[at..at + n].to_vec(),
                executable: executable[at..at + n].to_vec(),
            });
            at += n;
        }
        Self {
            category: self.category,
            epoch,
            tensors,
        }
    }

    /// Average executable bit-width, unweighted or weighted by `weights`.
    pub fn average_executable(&self, weights: Option<&[f64]>) -> f64 {
        let exec = self.executable_flat();
        match weights {
            None => exec.iter().map(|&b| b as f64).sum::<f64>() / exec.len().max(1) as f64,
            Some(w) => {
                let den: f64 = w.iter().sum();
                exec.iter().zip(w).map(|(&b, &w)| b as f64 * w).sum::<f64>() / den
            }
        }
    }

    /// L1 distance between the executable maps of two generations.
    pub fn executable_l1(&self, other: &BitWidthMap) -> Result<f64> {
        if self.keys() != other.keys() {
            return Err(Error::config("comparing bit-width maps with different keys"));
        }
        Ok(self
            .executable_flat()
            .iter()
            .zip(other.executable_flat())
            .map(|(&a, b)| (a as f64 - b as f64).abs())
            .sum())
    }

    pub fn write_csv_rows<W: Write>(&self, mut w: W, lambda: Option<f64>) -> Result<()> {
        let lambda = lambda.map_or_else(|| "".to_string(), |l| format!("{l:.6}"));
        for t in &self.tensors {
            for (entry, (&s, &e)) in t.smoothed.iter().zip(&t.executable).enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{:.6},{},{}",
                    self.epoch,
                    self.category.as_str(),
                    t.layer,
                    entry,
                    s,
                    e,
                    lambda
                )
                .map_err(|e| Error::io("bitmap.csv", e))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub gamma: f64,
    pub weighting: Weighting,
    /// When false the map uses the unconstrained estimate λ̂ every epoch.
    pub tuning: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            weighting: Weighting::Unweighted,
            tuning: true,
        }
    }
}

fn choose_lambda(
    state: &QuantCoeffState,
    r: &[f64],
    weights: Option<&[f64]>,
    cfg: &GeneratorConfig,
) -> Result<f64> {
    let estimate = initial_lambda_weighted(r, state.alpha, weights)?;
    if !cfg.tuning {
        return Ok(estimate);
    }
    let start = state.lambda.unwrap_or(estimate);
    tune_lambda(
        start,
        r,
        state.alpha,
        TuneOptions {
            iterations: state.iterations,
            beta: state.beta,
            weights,
        },
    )
}

fn check_keys(sens: &EpochSensitivitySet, prev: &BitWidthMap) -> Result<()> {
    let sens_keys: Vec<(usize, usize)> = sens.tensors.iter().map(|t| (t.layer, t.s.len())).collect();
    if sens_keys != prev.keys() {
        return Err(Error::config(format!(
            "sensitivity keys {sens_keys:?} do not match map keys {:?}",
            prev.keys()
        )));
    }
    if sens.category != prev.category {
        return Err(Error::config("sensitivity and map categories differ"));
    }
    Ok(())
}

/// One epoch-end map update for a single category.
pub fn generate(
    state: &QuantCoeffState,
    sens: &EpochSensitivitySet,
    prev: &BitWidthMap,
    cfg: &GeneratorConfig,
) -> Result<(BitWidthMap, QuantCoeffState)> {
    if state.category != sens.category {
        return Err(Error::config("coefficient state and sensitivity categories differ"));
    }
    check_keys(sens, prev)?;
    let r = sens.relative()?;
    let t = sens.compute_amounts();
    let weights = (cfg.weighting == Weighting::Compute).then_some(t.as_slice());
    let lambda = choose_lambda(state, &r, weights, cfg)?;
    let raw = bitwidths_from_lambda(&r, lambda, state.beta);
    let smoothed = smooth_map(&prev.smoothed_flat(), &raw, cfg.gamma)?;
    let exec = round_map(&smoothed, state.beta);
    let next_state = QuantCoeffState {
        lambda: Some(lambda),
        ..*state
    };
    Ok((prev.with_flat(sens.epoch, smoothed, exec), next_state))
}

/// Map update with one λ shared by several categories.
pub fn generate_shared(
    state: &QuantCoeffState,
    sens: &[&EpochSensitivitySet],
    prev: &[&BitWidthMap],
    cfg: &GeneratorConfig,
) -> Result<(Vec<BitWidthMap>, QuantCoeffState)> {
    if sens.len() != prev.len() || sens.is_empty() {
        return Err(Error::config("shared generation needs one map per sensitivity set"));
    }
    let mut r = Vec::new();
    let mut t = Vec::new();
    for (s, p) in sens.iter().zip(prev) {
        check_keys(s, p)?;
        r.extend(s.relative()?);
        t.extend(s.compute_amounts());
    }
    let weights = (cfg.weighting == Weighting::Compute).then_some(t.as_slice());
    let lambda = choose_lambda(state, &r, weights, cfg)?;
    let raw = bitwidths_from_lambda(&r, lambda, state.beta);
    let mut maps = Vec::with_capacity(prev.len());
    let mut at = 0;
    for (s, p) in sens.iter().zip(prev) {
        let n = p.entries();
        let smoothed = smooth_map(&p.smoothed_flat(), &raw[at..at + n], cfg.gamma)?;
        let exec = round_map(&smoothed, state.beta);
        maps.push(p.with_flat(s.epoch, smoothed, exec));
        at += n;
    }
    Ok((
        maps,
        QuantCoeffState {
            lambda: Some(lambda),
            ..*state
        },
    ))
}
