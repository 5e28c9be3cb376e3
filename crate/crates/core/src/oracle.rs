//! Reference solvers for the bit-width allocation problem
//!
//! ```text
//! minimize   Σ S_i · 2^(−2 b_i)
//! subject to Σ T_i · b_i ≤ α · Σ T_i,   b_i ∈ allowed ∩ [0, β]
//! ```
//!
//! plus the continuous λ search and an empirical loss-perturbation probe.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bfp::{self, BlockLayout, DataRole, EXECUTABLE_BITWIDTHS};
use crate::bwmap::round_bitwidth;
use crate::error::{Error, Result};
use crate::nnkernel::Model;

/// Largest `N` solved by enumeration.
pub const EXHAUSTIVE_MAX_N: usize = 14;
/// Largest integer budget the knapsack DP accepts.
pub const DP_MAX_CAPACITY: u64 = 50_000_000;
/// Relative tolerance under which two objectives count as tied.
const TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllowedBits {
    /// Every integer in `[0, β]`.
    #[default]
    Integers,
    /// The executable set {0, 2, 4, 6, 8} capped at β.
    Even,
}

impl AllowedBits {
    pub fn values(self, beta: u8) -> Vec<u8> {
        match self {
            AllowedBits::Integers => (0..=beta).collect(),
            AllowedBits::Even => EXECUTABLE_BITWIDTHS.iter().copied().filter(|&b| b <= beta).collect(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AllowedBits::Integers => "integers",
            AllowedBits::Even => "even",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationInstance {
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    pub alpha: f64,
    pub beta: u8,
    pub allowed: AllowedBits,
}

impl AllocationInstance {
    pub fn validate(&self) -> Result<()> {
        if self.s.is_empty() || self.s.len() != self.t.len() {
            return Err(Error::config(format!(
                "instance needs |S| = |T| ≥ 1, got {} and {}",
                self.s.len(),
                self.t.len()
            )));
        }
        if self.s.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("S must be finite and non-negative"));
        }
        if self.t.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::config("T must be finite and positive"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config(format!("infeasible budget α = {}", self.alpha)));
        }
        if self.beta > bfp::MAX_BITWIDTH {
            return Err(Error::config(format!("β = {} exceeds {}", self.beta, bfp::MAX_BITWIDTH)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn budget(&self) -> f64 {
        self.alpha * self.t.iter().sum::<f64>()
    }

    pub fn objective(&self, b: &[u8]) -> f64 {
        self.s.iter().zip(b).map(|(&s, &b)| s * (-2.0 * b as f64).exp2()).sum()
    }

    pub fn cost(&self, b: &[u8]) -> f64 {
        self.t.iter().zip(b).map(|(&t, &b)| t * b as f64).sum()
    }

    pub fn feasible(&self, b: &[u8]) -> bool {
        let allowed = self.allowed.values(self.beta);
        b.len() == self.len()
            && b.iter().all(|v| allowed.contains(v))
            && self.cost(b) <= self.budget() * (1.0 + 1e-12) + 1e-12
    }
}

fn strictly_better(candidate: f64, best: f64) -> bool {
    if best.is_infinite() {
        return candidate < best;
    }
    candidate < best - TIE_RTOL * best.abs().max(f64::MIN_POSITIVE)
}

/// Exact optimum; ties resolved toward the lexicographically smallest `b`.
pub fn exact_micp(inst: &AllocationInstance) -> Result<Vec<u8>> {
    inst.validate()?;
    match integer_costs(&inst.t) {
        Some((t, _)) => {
            let cap = budget_units(inst, &t);
            if cap <= DP_MAX_CAPACITY {
                return Ok(knapsack_dp(inst, &t, cap));
            }
            exhaustive_or_fail(inst)
        }
        None => exhaustive_or_fail(inst),
    }
}

fn exhaustive_or_fail(inst: &AllocationInstance) -> Result<Vec<u8>> {
    if inst.len() > EXHAUSTIVE_MAX_N {
        return Err(Error::config(format!(
            "N = {} with non-integral T exceeds the exhaustive limit {EXHAUSTIVE_MAX_N}",
            inst.len()
        )));
    }
    Ok(exhaustive(inst))
}

/// Scales `T` to co-prime integers when every ratio is exact at six decimal
/// places; returns the integers and the scale applied.
pub fn integer_costs(t: &[f64]) -> Option<(Vec<u64>, f64)> {
    for digits in 0..=6 {
        let scale = 10f64.powi(digits);
        let scaled: Vec<f64> = t.iter().map(|&v| v * scale).collect();
        if scaled.iter().all(|&v| (v - v.round()).abs() <= 1e-9 * v.max(1.0) && v.round() < 2f64.powi(52)) {
            let ints: Vec<u64> = scaled.iter().map(|v| v.round() as u64).collect();
            let g = ints.iter().fold(0, |g, &v| gcd(g, v));
            if g == 0 {
                return None;
            }
            return Some((ints.iter().map(|v| v / g).collect(), scale / g as f64));
        }
    }
    None
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn budget_units(inst: &AllocationInstance, t: &[u64]) -> u64 {
    let total: u64 = t.iter().sum();
    let max_useful = total * inst.beta as u64;
    let cap = (inst.alpha * total as f64 * (1.0 + 1e-12) + 1e-9).floor();
    (cap.max(0.0) as u64).min(max_useful)
}

/// Multiple-choice knapsack over integer costs. The suffix table lets the
/// forward reconstruction take the smallest optimal value per position.
fn knapsack_dp(inst: &AllocationInstance, t: &[u64], cap: u64) -> Vec<u8> {
    let n = inst.len();
    let allowed = inst.allowed.values(inst.beta);
    let cap = cap as usize;
    // suffix[i][c]: best objective of items i.. within capacity c
    let mut suffix = vec![vec![0.0f64; cap + 1]; n + 1];
    for i in (0..n).rev() {
        let (next, cur) = {
            let (a, b) = suffix.split_at_mut(i + 1);
            (&b[0], &mut a[i])
        };
        for c in 0..=cap {
            let mut best = f64::INFINITY;
            for &b in &allowed {
                let w = t[i] as usize * b as usize;
                if w > c {
                    break;
                }
                let v = inst.s[i] * (-2.0 * b as f64).exp2() + next[c - w];
                if v < best {
                    best = v;
                }
            }
            cur[c] = best;
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut c = cap;
    for i in 0..n {
        let target = suffix[i][c];
        let mut chosen = allowed[0];
        for &b in &allowed {
            let w = t[i] as usize * b as usize;
            if w > c {
                break;
            }
            let v = inst.s[i] * (-2.0 * b as f64).exp2() + suffix[i + 1][c - w];
            if !strictly_better(target, v) {
                chosen = b;
                break;
            }
        }
        out.push(chosen);
        c -= t[i] as usize * chosen as usize;
    }
    out
}

/// Depth-first enumeration in lexicographic order with budget and bound
/// pruning.
pub fn exhaustive(inst: &AllocationInstance) -> Vec<u8> {
    struct Search<'a> {
        inst: &'a AllocationInstance,
        allowed: Vec<u8>,
        budget: f64,
        best: f64,
        best_b: Vec<u8>,
        cur: Vec<u8>,
    }
    impl Search<'_> {
        fn bound(&self, i: usize, remaining: f64) -> f64 {
            let top = *self.allowed.last().unwrap();
            (i..self.inst.len())
                .map(|j| {
                    let fit = (remaining / self.inst.t[j] + 1e-9).floor();
                    let b = self.allowed.iter().rev().find(|&&b| b as f64 <= fit).copied().unwrap_or(0).min(top);
                    self.inst.s[j] * (-2.0 * b as f64).exp2()
                })
                .sum()
        }

        fn go(&mut self, i: usize, spent: f64, obj: f64) {
            if i == self.inst.len() {
                if strictly_better(obj, self.best) {
                    self.best = obj;
                    self.best_b.clone_from(&self.cur);
                }
                return;
            }
            let remaining = self.budget - spent;
            if !strictly_better(obj + self.bound(i, remaining), self.best) && self.best.is_finite() {
                return;
            }
            for k in 0..self.allowed.len() {
                let b = self.allowed[k];
                let cost = self.inst.t[i] * b as f64;
                if spent + cost > self.budget {
                    break;
                }
                self.cur[i] = b;
                self.go(i + 1, spent + cost, obj + self.inst.s[i] * (-2.0 * b as f64).exp2());
            }
        }
    }
    let budget = inst.budget() * (1.0 + 1e-12) + 1e-12;
    let mut search = Search {
        inst,
        allowed: inst.allowed.values(inst.beta),
        budget,
        best: f64::INFINITY,
        best_b: vec![0; inst.len()],
        cur: vec![0; inst.len()],
    };
    search.go(0, 0.0, 0.0);
    search.best_b
}

fn clipped_mean(r: &[f64], lambda: f64, beta: f64, weights: Option<&[f64]>) -> f64 {
    let clip = |r: f64| (r - lambda).clamp(0.0, beta);
    match weights {
        None => r.iter().map(|&r| clip(r)).sum::<f64>() / r.len() as f64,
        Some(w) => {
            r.iter().zip(w).map(|(&r, &w)| w * clip(r)).sum::<f64>() / w.iter().sum::<f64>()
        }
    }
}

/// λ with `|mean(clip(r − λ, 0, β)) − α| ≤ 1e-9`, optionally weighted.
/// Returns the smallest such λ found by bisection.
pub fn lambda_bisection(r: &[f64], weights: Option<&[f64]>, alpha: f64, beta: f64) -> Result<f64> {
    if r.is_empty() || r.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("λ bisection needs a non-empty list of finite r"));
    }
    if let Some(w) = weights {
        if w.len() != r.len() || w.iter().any(|&w| !(w >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("weights must be non-negative, one per r, with a positive sum"));
        }
    }
    if !(0.0..=beta).contains(&alpha) {
        return Err(Error::config(format!("α = {alpha} outside the achievable range [0, {beta}]")));
    }
    let min = r.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (min - beta - 1.0, max + 1.0);
    // invariant: mean(lo) > α ≥ mean(hi), or lo is the bracket end
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if clipped_mean(r, mid, beta, weights) <= alpha {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let residual = (clipped_mean(r, hi, beta, weights) - alpha).abs();
    if residual > 1e-9 {
        return Err(Error::numeric(format!("λ bisection stalled with residual {residual:e}")));
    }
    Ok(hi)
}

/// Relaxed solution rounded to the allowed set, then repaired by
/// decrementing the entry with the smallest loss increase per unit cost
/// until the budget holds. Budget left idle by rounding is handed back one
/// step at a time to the entry with the largest loss decrease per unit cost.
pub fn analytic_allocation(inst: &AllocationInstance) -> Result<Vec<u8>> {
    inst.validate()?;
    let beta = inst.beta as f64;
    let allowed = inst.allowed.values(inst.beta);
    let r: Vec<f64> = inst
        .s
        .iter()
        .zip(&inst.t)
        .map(|(&s, &t)| if s > 0.0 { 0.5 * (s / t).log2() } else { f64::NEG_INFINITY })
        .collect();
    let active: Vec<usize> = (0..r.len()).filter(|&i| r[i].is_finite()).collect();
    let mut b = vec![0u8; inst.len()];
    if !active.is_empty() {
        let ra: Vec<f64> = active.iter().map(|&i| r[i]).collect();
        let ta: Vec<f64> = active.iter().map(|&i| inst.t[i]).collect();
        // budget share of the entries that can use bits
        let share = (inst.budget() / ta.iter().sum::<f64>()).min(beta);
        let lambda = lambda_bisection(&ra, Some(&ta), share, beta)?;
        for (&i, &ri) in active.iter().zip(&ra) {
            let raw = (ri - lambda).clamp(0.0, beta);
            b[i] = match inst.allowed {
                AllowedBits::Integers => raw.round() as u8,
                AllowedBits::Even => round_bitwidth(raw).min(inst.beta),
            };
        }
    }
    let budget = inst.budget() * (1.0 + 1e-12) + 1e-12;
    while inst.cost(&b) > budget {
        let mut pick: Option<(usize, u8, f64)> = None;
        for i in 0..b.len() {
            if b[i] == 0 {
                continue;
            }
            let lower = *allowed.iter().rev().find(|&&v| v < b[i]).unwrap();
            let increase = inst.s[i] * ((-2.0 * lower as f64).exp2() - (-2.0 * b[i] as f64).exp2());
            let per_unit = increase / (inst.t[i] * (b[i] - lower) as f64);
            if pick.is_none_or(|(_, _, best)| per_unit < best) {
                pick = Some((i, lower, per_unit));
            }
        }
        let (i, lower, _) = pick.ok_or_else(|| Error::internal("budget repair ran out of bits"))?;
        b[i] = lower;
    }
    // spend what rounding left over, best loss decrease per unit cost first
    loop {
        let spent = inst.cost(&b);
        let mut pick: Option<(usize, u8, f64)> = None;
        for i in 0..b.len() {
            let Some(&upper) = allowed.iter().find(|&&v| v > b[i]) else {
                continue;
            };
            if spent + inst.t[i] * (upper - b[i]) as f64 > budget || inst.s[i] == 0.0 {
                continue;
            }
            let decrease = inst.s[i] * ((-2.0 * b[i] as f64).exp2() - (-2.0 * upper as f64).exp2());
            let per_unit = decrease / (inst.t[i] * (upper - b[i]) as f64);
            if pick.is_none_or(|(_, _, best)| per_unit > best) {
                pick = Some((i, upper, per_unit));
            }
        }
        match pick {
            Some((i, upper, _)) => b[i] = upper,
            None => break,
        }
    }
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub instance: usize,
    pub n: usize,
    pub exact_objective: f64,
    pub analytic_objective: f64,
    /// `analytic / exact` (1 when both are zero).
    pub gap: f64,
}

pub const GAP_CSV_HEADER: &str = "instance,n,exact_objective,analytic_objective,gap";

/// Random instance with log-uniform S over 24 octaves and integer T.
pub fn random_instance(rng: &mut impl Rng, max_n: usize, beta: u8, allowed: AllowedBits) -> AllocationInstance {
    let n = rng.random_range(1..=max_n);
    AllocationInstance {
        s: (0..n).map(|_| rng.random_range(-12.0..12.0f64).exp2()).collect(),
        t: (0..n).map(|_| rng.random_range(1..=16u32) as f64).collect(),
        alpha: rng.random_range(0.5..(beta as f64 - 0.5)),
        beta,
        allowed,
    }
}

pub fn gap_study(instances: usize, max_n: usize, beta: u8, allowed: AllowedBits, seed: u64) -> Result<Vec<GapRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .map(|k| {
            let inst = random_instance(&mut rng, max_n, beta, allowed);
            let exact = inst.objective(&exact_micp(&inst)?);
            let analytic = inst.objective(&analytic_allocation(&inst)?);
            Ok(GapRecord {
                instance: k,
                n: inst.len(),
                exact_objective: exact,
                analytic_objective: analytic,
                gap: if exact > 0.0 { analytic / exact } else { 1.0 },
            })
        })
        .collect()
}

pub fn write_gap_csv<W: Write>(mut w: W, records: &[GapRecord]) -> Result<()> {
    let io = |e| Error::io("gap.csv", e);
    writeln!(w, "{GAP_CSV_HEADER}").map_err(io)?;
    for r in records {
        writeln!(
            w,
            "{},{},{:e},{:e},{:.9}",
            r.instance, r.n, r.exact_objective, r.analytic_objective, r.gap
        )
        .map_err(io)?;
    }
    Ok(())
}

/// Instance file: `# alpha=…,beta=…,allowed=…`, then `S,T` rows.
pub fn write_instance_csv<W: Write>(mut w: W, inst: &AllocationInstance) -> Result<()> {
    let io = |e| Error::io("instance.csv", e);
    writeln!(w, "# alpha={},beta={},allowed={}", inst.alpha, inst.beta, inst.allowed.as_str()).map_err(io)?;
    writeln!(w, "S,T").map_err(io)?;
    for (s, t) in inst.s.iter().zip(&inst.t) {
        writeln!(w, "{s:e},{t}").map_err(io)?;
    }
    Ok(())
}

pub fn read_instance_csv<R: BufRead>(r: R) -> Result<AllocationInstance> {
    let bad = |line: usize, msg: &str| Error::Data(format!("instance line {line}: {msg}"));
    let mut lines = r.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    let header = header.map_err(|e| Error::io("instance.csv", e))?;
    let fields = header.strip_prefix("# ").ok_or_else(|| bad(1, "missing `# alpha=…` header"))?;
    let (mut alpha, mut beta, mut allowed) = (None, None, AllowedBits::Integers);
    for kv in fields.split(',') {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(1, "malformed header field"))?;
        match k.trim() {
            "alpha" => alpha = v.trim().parse().ok(),
            "beta" => beta = v.trim().parse().ok(),
            "allowed" => {
                allowed = match v.trim() {
                    "integers" => AllowedBits::Integers,
                    "even" => AllowedBits::Even,
                    _ => return Err(bad(1, "allowed must be `integers` or `even`")),
                }
            }
            _ => return Err(bad(1, "unknown header field")),
        }
    }
    let (mut s, mut t) = (Vec::new(), Vec::new());
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io("instance.csv", e))?;
        if i == 1 && line.trim() == "S,T" || line.trim().is_empty() {
            continue;
        }
        let (a, b) = line.split_once(',').ok_or_else(|| bad(i + 1, "expected `S,T`"))?;
        s.push(a.trim().parse().map_err(|_| bad(i + 1, "bad S"))?);
        t.push(b.trim().parse().map_err(|_| bad(i + 1, "bad T"))?);
    }
    let inst = AllocationInstance {
        s,
        t,
        alpha: alpha.ok_or_else(|| bad(1, "missing alpha"))?,
        beta: beta.ok_or_else(|| bad(1, "missing beta"))?,
        allowed,
    };
    inst.validate()?;
    Ok(inst)
}

/// Mean over `batches` of `(L_q − L_fp)²`, where `L_q` quantizes only one
/// weight map entry of `layer` (all its instances) at `bits` and leaves
/// everything else in full precision.
pub fn loss_perturbation(model: &Model, batches: &[(Vec<f64>, Vec<u8>)], layer: usize, entry: usize, bits: u8) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::config("loss perturbation needs at least one batch"));
    }
    let layout = model.weight_layout(layer)?;
    if entry >= layout.entries() {
        return Err(Error::config(format!("entry {entry} out of range for layer {layer}")));
    }
    let perturbed = quantize_entry(model, &layout, layer, entry, bits)?;
    let mut total = 0.0;
    for (x, y) in batches {
        let d = perturbed.loss(x, y)? - model.loss(x, y)?;
        total += d * d;
    }
    Ok(total / batches.len() as f64)
}

fn quantize_entry(model: &Model, layout: &BlockLayout, layer: usize, entry: usize, bits: u8) -> Result<Model> {
    debug_assert_eq!(layout.role(), DataRole::Weight);
    let mut out = model.clone();
    let w = &mut out.layers[layer].params[0];
    let bases: Vec<usize> = layout.lane_bases(entry).into_iter().flatten().collect();
    for inst in 0..layout.instances() {
        let vals: Vec<f64> = bases.iter().map(|&b| w[b + inst]).collect();
        let block = bfp::quantize_block(&vals, bits)?;
        let deq = block.dequantize();
        for (k, &b) in bases.iter().enumerate() {
            w[b + inst] = deq[k];
        }
    }
    Ok(out)
}

/// Ranks starting at 1 with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::config("Spearman needs two equal-length series of ≥ 2 values"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::numeric("Spearman correlation of a constant series"));
    }
    Ok(cov / (va * vb).sqrt())
}
