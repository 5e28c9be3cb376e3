//! Self-checks of the quantizer, the allocation pipeline and λ control.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::bfp::{self, DataRole, BLOCK_LANES};
use crate::bwmap::{self, BitWidthMap, GeneratorConfig, QuantCoeffState, TuneOptions};
use crate::error::{Error, Result};
use crate::oracle::{self, AllowedBits, GapRecord};
use crate::sens::EpochSensitivitySet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Quant,
    Alloc,
    Control,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "quant" => Ok(Suite::Quant),
            "alloc" => Ok(Suite::Alloc),
            "control" => Ok(Suite::Control),
            _ => Err(Error::config(format!("unknown suite `{s}` (all, quant, alloc, control)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{mark}  {:<8} {:<40} {}", self.suite, self.name, self.detail)
    }
}

fn check(suite: &'static str, name: impl Into<String>, passed: bool, detail: String) -> Check {
    Check {
        suite,
        name: name.into(),
        passed,
        detail,
    }
}

/// Empirical quantization MSE of `blocks` i.i.d. standard Gaussian blocks.
pub fn gaussian_block_mse(blocks: usize, bits: u8, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut vals = [0.0; BLOCK_LANES];
    for _ in 0..blocks {
        for v in &mut vals {
            *v = StandardNormal.sample(&mut rng);
        }
        let q = bfp::quantize_block(&vals, bits)?.dequantize();
        sum += vals.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(sum / (blocks * BLOCK_LANES) as f64)
}

pub fn quant_suite(seed: u64) -> Result<Vec<Check>> {
    let blocks = 100_000;
    let mut out = Vec::new();
    for b in [2u8, 4] {
        let lo = gaussian_block_mse(blocks, b, seed)?;
        let hi = gaussian_block_mse(blocks, b + 2, seed)?;
        let ratio = lo / hi;
        out.push(check(
            "quant",
            format!("MSE({b})/MSE({}) near 16", b + 2),
            (16.0 * 0.7..=16.0 * 1.3).contains(&ratio),
            format!("ratio {ratio:.3} over {blocks} blocks"),
        ));
    }
    Ok(out)
}

/// Gap study of the analytic allocation against the exact optimum.
pub fn alloc_records(seed: u64) -> Result<Vec<GapRecord>> {
    oracle::gap_study(200, 12, 8, AllowedBits::Integers, seed)
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn alloc_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let records = alloc_records(seed)?;
    let within = records.iter().filter(|r| r.gap <= 1.10).count();
    let mut gaps: Vec<f64> = records.iter().map(|r| r.gap).collect();
    let med = median(&mut gaps);
    let worst = gaps.last().copied().unwrap_or(1.0);
    out.push(check(
        "alloc",
        "analytic ≤ 1.10× optimum on ≥95%",
        within * 100 >= 95 * records.len(),
        format!("{within}/{} within, median gap {med:.4}, worst {worst:.4}", records.len()),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut agree = 0;
    let trials = 20;
    for _ in 0..trials {
        let mut inst = oracle::random_instance(&mut rng, 8, 8, AllowedBits::Integers);
        while inst.len() < 8 {
            inst = oracle::random_instance(&mut rng, 8, 8, AllowedBits::Integers);
        }
        if oracle::exact_micp(&inst)? == oracle::exhaustive(&inst) {
            agree += 1;
        }
    }
    out.push(check(
        "alloc",
        "knapsack DP equals enumeration at N=8",
        agree == trials,
        format!("{agree}/{trials} identical"),
    ));
    Ok(out)
}

/// Kinds of synthetic `r` populations used by the control suite.
pub fn synthetic_r(rng: &mut ChaCha8Rng, kind: usize) -> Vec<f64> {
    let n = rng.random_range(16..=2048);
    let center = rng.random_range(-20.0..5.0);
    let spread = rng.random_range(0.3..4.0);
    let normal = Normal::new(center, spread).unwrap();
    match kind % 4 {
        0 => (0..n).map(|_| normal.sample(rng)).collect(),
        1 => (0..n).map(|_| center + rng.random_range(-2.0 * spread..2.0 * spread)).collect(),
        2 => {
            let gap = rng.random_range(2.0..8.0);
            (0..n)
                .map(|_| normal.sample(rng) + if rng.random_bool(0.3) { gap } else { 0.0 })
                .collect()
        }
        _ => (0..n)
            .map(|_| {
                let u: f64 = rng.random_range(-0.5..0.5);
                center - spread * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            })
            .collect(),
    }
}

/// `(tuned residual, bisection residual)` for one population.
pub fn control_trial(r: &[f64], alpha: f64, beta: f64) -> Result<(f64, f64)> {
    let start = bwmap::initial_lambda(r, alpha)?;
    let tuned = bwmap::tune_lambda(
        start,
        r,
        alpha,
        TuneOptions {
            iterations: 3,
            beta,
            weights: None,
        },
    )?;
    let exact = oracle::lambda_bisection(r, None, alpha, beta)?;
    Ok((
        (bwmap::mean_bitwidth(r, tuned, beta, None)? - alpha).abs(),
        (bwmap::mean_bitwidth(r, exact, beta, None)? - alpha).abs(),
    ))
}

/// Realized mean after `calls` map generations on a stationary stream.
pub fn stationary_stream(r: &[f64], alpha: f64, calls: usize) -> Result<Vec<f64>> {
    let keys = [(0usize, r.len())];
    let mut map = BitWidthMap::initial(DataRole::Weight, &keys);
    let mut state = QuantCoeffState::new(DataRole::Weight, alpha, bwmap::DEFAULT_BETA, 3)?;
    let mut sens = EpochSensitivitySet::new(DataRole::Weight, 1, &keys);
    let t = vec![1.0; r.len()];
    let s: Vec<f64> = r.iter().map(|&r| (2.0 * r).exp2()).collect();
    sens.accumulate_tensor(0, &s, &t)?;
    let mut realized = Vec::new();
    for _ in 0..calls {
        let (m, st) = bwmap::generate(&state, &sens, &map, &GeneratorConfig::default())?;
        let lambda = st.lambda.unwrap();
        realized.push(bwmap::mean_bitwidth(r, lambda, bwmap::DEFAULT_BETA, None)?);
        map = m;
        state = st;
    }
    Ok(realized)
}

pub fn control_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let lambda = bwmap::tune_lambda(0.0, &[0.0, 2.0, 4.0, 6.0], 3.0, TuneOptions::default())?;
    out.push(check(
        "control",
        "fixed point r=[0,2,4,6], α=3",
        lambda.abs() < 1e-12,
        format!("λ = {lambda}"),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    let mut bisect_worst: f64 = 0.0;
    let trials = 100;
    for k in 0..trials {
        let r = synthetic_r(&mut rng, k);
        let alpha = [2.0, 3.0, 4.0, 6.0][k % 4];
        let (tuned, exact) = control_trial(&r, alpha, 8.0)?;
        worst = worst.max(tuned);
        bisect_worst = bisect_worst.max(exact);
        if tuned <= 0.1 && exact <= 1e-9 {
            ok += 1;
        }
    }
    out.push(check(
        "control",
        "tuned λ within 0.1 bits (L=3)",
        ok == trials,
        format!("{ok}/{trials}, worst {worst:.4}, bisection worst {bisect_worst:.1e}"),
    ));

    let mut stable = 0;
    for k in 0..20 {
        let r = synthetic_r(&mut rng, k);
        let realized = stationary_stream(&r, 3.0, 3)?;
        if (realized[2] - 3.0).abs() <= 0.25 {
            stable += 1;
        }
    }
    out.push(check(
        "control",
        "stationary stream within ±0.25 after 3 calls",
        stable == 20,
        format!("{stable}/20 streams"),
    ));
    Ok(out)
}

pub fn cmd_validate(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    if matches!(suite, Suite::All | Suite::Quant) {
        checks.extend(quant_suite(seed)?);
    }
    if matches!(suite, Suite::All | Suite::Alloc) {
        checks.extend(alloc_suite(seed)?);
    }
    if matches!(suite, Suite::All | Suite::Control) {
        checks.extend(control_suite(seed)?);
    }
    Ok(checks)
}
