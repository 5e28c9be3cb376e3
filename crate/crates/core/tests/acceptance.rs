//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary: `cargo test --test acceptance -- [numbers]`
//! selects criteria by number. Set `BLOCKPREC_ACCEPTANCE_STRICT=1` to get a
//! non-zero exit when any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use blockprec::cli::validate::{self, control_trial, gaussian_block_mse, synthetic_r};
use blockprec::cli::{cmd_train, DatasetId, Mode, RunConfig, TrainOutcome};
use blockprec::costmodel::{speedup_energy, CostParams, RunCost};
use blockprec::nnkernel::{load_checkpoint, EpochMetrics, Model, QuantContext, QuantMode};
use blockprec::oracle::{self, spearman};
use blockprec::sens;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn mnist_config(out: &Path, name: &str, mode: QuantMode, alpha: f64, epochs: usize, subset: (usize, usize)) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.epochs = epochs;
    cfg.seed = 1;
    cfg.mode = Mode(mode);
    cfg.output_dir = out.join(name).to_string_lossy().into_owned();
    cfg.dataset.id = DatasetId::Mnist;
    cfg.dataset.path = mnist_dir().to_string_lossy().into_owned();
    cfg.dataset.train_subset = subset.0;
    cfg.dataset.val_subset = subset.1;
    cfg.quant.alpha_weights = alpha;
    cfg.quant.alpha_activations = alpha;
    cfg
}

fn final_acc(o: &TrainOutcome) -> f64 {
    o.metrics.last().and_then(|m| m.val_acc).unwrap_or(f64::NAN)
}

fn c1() -> Outcome {
    let start = Instant::now();
    let blocks = 100_000;
    let mut ratios = Vec::new();
    for b in [2u8, 4] {
        let lo = gaussian_block_mse(blocks, b, 1).unwrap();
        let hi = gaussian_block_mse(blocks, b + 2, 1).unwrap();
        ratios.push(lo / hi);
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = ratios.iter().all(|r| (11.2..=20.8).contains(r)) && secs < 10.0;
    outcome(
        ok,
        format!("MSE(2)/MSE(4) = {:.3}, MSE(4)/MSE(6) = {:.3}, {blocks} blocks in {secs:.1}s", ratios[0], ratios[1]),
    )
}

fn c2() -> Outcome {
    let start = Instant::now();
    let records = validate::alloc_records(1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let within = records.iter().filter(|r| r.gap <= 1.10).count();
    let mut gaps: Vec<f64> = records.iter().map(|r| r.gap).collect();
    let median = validate::median(&mut gaps);
    outcome(
        within * 100 >= 95 * records.len() && secs < 120.0,
        format!(
            "{within}/{} instances within 1.10x, median gap {median:.4}, worst {:.4}, {secs:.1}s",
            records.len(),
            gaps.last().unwrap()
        ),
    )
}

fn c3() -> Outcome {
    let fixed = blockprec::bwmap::tune_lambda(0.0, &[0.0, 2.0, 4.0, 6.0], 3.0, Default::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let r = synthetic_r(&mut rng, k);
        let alpha = [2.0, 3.0, 4.0, 6.0][k % 4];
        let (tuned, exact) = control_trial(&r, alpha, 8.0).unwrap();
        worst = worst.max(tuned);
        if tuned <= 0.1 && exact <= 1e-9 {
            ok += 1;
        }
    }
    outcome(
        ok == 100 && fixed == 0.0,
        format!("{ok}/100 within 0.1 bits (worst {worst:.4}); fixed point λ = {fixed}"),
    )
}

fn c4(out: &Path) -> Outcome {
    let subset = (2000, 1000);
    let tuned = cmd_train(&mnist_config(out, "c4_tuned", QuantMode::Dynamic, 3.0, 10, subset), false).unwrap();
    let mut cfg = mnist_config(out, "c4_raw", QuantMode::Dynamic, 3.0, 10, subset);
    cfg.quant.tuning = false;
    let raw = cmd_train(&cfg, false).unwrap();

    let late: Vec<&EpochMetrics> = tuned.metrics.iter().filter(|m| m.epoch > 3).collect();
    let worst = late
        .iter()
        .flat_map(|m| [m.avg_bw_w, m.avg_bw_a])
        .map(|b| (b - 3.0).abs())
        .fold(0.0, f64::max);
    let stable = worst <= 0.5;

    let n = raw.metrics.len();
    let third: Vec<&EpochMetrics> = raw.metrics.iter().skip(n - n / 3).collect();
    let mean = |f: fn(&EpochMetrics) -> f64| third.iter().map(|m| f(m)).sum::<f64>() / third.len() as f64;
    let (raw_w, raw_a) = (mean(|m| m.avg_bw_w), mean(|m| m.avg_bw_a));
    let drift_up = raw_w > 3.5 || raw_a > 3.5;
    outcome(
        stable && drift_up,
        format!(
            "tuned: max |avg − 3| after epoch 3 = {worst:.3} ({}); λ̂ only, final third: w {raw_w:.3}, a {raw_a:.3} ({})",
            if stable { "ok" } else { "out of band" },
            if drift_up { "exceeds 3.5" } else { "does not exceed 3.5" }
        ),
    )
}

fn mean_map_change(m: &[EpochMetrics]) -> f64 {
    let changes: Vec<f64> = m.iter().skip(1).map(|m| m.map_change_w + m.map_change_a).collect();
    changes.iter().sum::<f64>() / changes.len() as f64
}

fn c5(out: &Path) -> Outcome {
    let subset = (2000, 1000);
    let smooth = cmd_train(&mnist_config(out, "c5_g05", QuantMode::Dynamic, 3.0, 10, subset), false).unwrap();
    let mut cfg = mnist_config(out, "c5_g0", QuantMode::Dynamic, 3.0, 10, subset);
    cfg.quant.gamma = 0.0;
    let sharp = cmd_train(&cfg, false).unwrap();
    let (l_s, l_0) = (mean_map_change(&smooth.metrics), mean_map_change(&sharp.metrics));
    let (a_s, a_0) = (final_acc(&smooth), final_acc(&sharp));
    outcome(
        l_s < l_0 && a_s >= a_0 - 0.002,
        format!("mean L1 map change γ=0.5 {l_s:.1} vs γ=0 {l_0:.1}; final acc {a_s:.4} vs {a_0:.4}"),
    )
}

fn c6(out: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = {
        let mut c = mnist_config(out, "c6_toy", QuantMode::FullPrecision, 4.0, 2, (1000, 200));
        c.model = "conv:4,relu,maxpool,linear:10".into();
        c
    };
    let trained = cmd_train(&cfg, false).unwrap();
    let state = load_checkpoint(&trained.run_dir.join("checkpoint.bin")).unwrap();
    let model: &Model = &state.model;
    let (train, _) = blockprec::cli::data::load_dataset(&cfg.dataset, cfg.seed).unwrap();
    let batches: Vec<(Vec<f64>, Vec<u8>)> = (0..32)
        .map(|b| train.gather(&(b * 16..b * 16 + 16).collect::<Vec<_>>()))
        .collect();

    let ctx = QuantContext {
        collect_sensitivity: true,
        map_batch: 16,
        ..QuantContext::bypass()
    };
    let mut s_total: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (x, y) in &batches {
        let (_, cache) = model.forward(x, y, &ctx, true).unwrap();
        let g = model.backward(&cache, &ctx).unwrap();
        for ts in &g.weight_sens {
            let acc = s_total.entry(ts.layer).or_insert_with(|| vec![0.0; ts.s.len()]);
            for (a, b) in acc.iter_mut().zip(&ts.s) {
                *a += b;
            }
        }
    }
    // predicted noise of one entry at b bits is proportional to S · 2^(−2b)
    let bits = 2u8;
    let mut predicted = Vec::new();
    let mut measured = Vec::new();
    for (&layer, s) in &s_total {
        let n = s.len();
        for e in (0..n).step_by(n / 40 + 1) {
            predicted.push(sens::delta_l2(&[s[e]], &[bits as f64]).unwrap());
            measured.push(oracle::loss_perturbation(model, &batches, layer, e, bits).unwrap());
        }
    }
    let rho = spearman(&predicted, &measured).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        predicted.len() >= 30 && rho > 0.8 && secs < 300.0,
        format!("Spearman {rho:.3} over {} weight entries, {secs:.0}s", predicted.len()),
    )
}

struct EndToEnd {
    dyn4: TrainOutcome,
    s8: TrainOutcome,
    dyn2: TrainOutcome,
    s2: TrainOutcome,
    secs: f64,
}

fn end_to_end(out: &Path) -> EndToEnd {
    let start = Instant::now();
    let run = |name: &str, mode, alpha| cmd_train(&mnist_config(out, name, mode, alpha, 10, (0, 0)), false).unwrap();
    let dyn4 = run("c7_dyn4", QuantMode::Dynamic, 4.0);
    let s8 = run("c7_static8", QuantMode::StaticUniform(8), 4.0);
    let dyn2 = run("c7_dyn2", QuantMode::Dynamic, 2.0);
    let s2 = run("c7_static2", QuantMode::StaticUniform(2), 2.0);
    EndToEnd {
        dyn4,
        s8,
        dyn2,
        s2,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn c7(e: &EndToEnd) -> Outcome {
    let (d4, s8, d2, s2) = (final_acc(&e.dyn4), final_acc(&e.s8), final_acc(&e.dyn2), final_acc(&e.s2));
    outcome(
        d4 >= s8 - 0.01 && d2 > s2 + 0.01 && e.secs < 1800.0,
        format!(
            "dyn α=4 {d4:.4} vs static8 {s8:.4}; dyn α=2 {d2:.4} vs static2 {s2:.4}; {:.0}s",
            e.secs
        ),
    )
}

fn c8(e: &EndToEnd) -> Outcome {
    let s2 = e.s2.summary.speedup_vs_8bit;
    let d2 = e.dyn2.summary.speedup_vs_8bit;
    let last = e.dyn2.metrics.last().unwrap();
    let steady = 8.0 * last.macs / last.macbits;
    let p = CostParams::default();
    let base = RunCost {
        macbits_per_epoch: 8.0,
        epochs: 10.0,
    };
    let quarter = RunCost {
        macbits_per_epoch: 2.0,
        epochs: 10.0,
    };
    let (sp, energy) = speedup_energy(Some(&base), &quarter, &p).unwrap();
    let ok = s2 == 4.0 && (d2 - 4.0).abs() <= 0.1 && sp == 4.0 && (energy - 1.079 / 4.0).abs() < 1e-12;
    outcome(
        ok,
        format!(
            "static2 {s2}x; dyn α=2 whole run {d2:.3}x (final epoch {steady:.3}x); energy ratio at 4x {energy:.5}"
        ),
    )
}

fn c9(out: &Path) -> Outcome {
    let start = Instant::now();
    let a = cmd_train(&mnist_config(out, "c9_a", QuantMode::Dynamic, 3.0, 3, (1000, 500)), false).unwrap();
    let b = cmd_train(&mnist_config(out, "c9_b", QuantMode::Dynamic, 3.0, 3, (1000, 500)), false).unwrap();
    let read = |o: &TrainOutcome| std::fs::read(o.run_dir.join("metrics.csv")).unwrap();
    let same = read(&a) == read(&b);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        same && secs < 300.0,
        format!("metrics.csv {}, {secs:.0}s", if same { "bitwise identical" } else { "differs" }),
    )
}

fn c10() -> Outcome {
    let spec = "conv:4:3,bn,relu,maxpool,conv:6:3:2,avgpool,linear:5";
    let dims = [2usize, 8, 8];
    let model = Model::from_spec(spec, &dims, 5, 3).unwrap();
    let batch = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<f64> = (0..batch * 128).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    let y = [0u8, 3, 4];
    let ctx = QuantContext::bypass();
    let loss = |m: &Model, x: &[f64]| m.forward(x, &y, &ctx, true).unwrap().0.loss;
    let (_, cache) = model.forward(&x, &y, &ctx, true).unwrap();
    let g = model.backward(&cache, &ctx).unwrap();

    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-7);
    let mut worst: f64 = 0.0;
    let mut checked = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        for (pi, p) in layer.params.iter().enumerate() {
            for k in (0..p.len()).step_by(p.len() / 7 + 1) {
                let mut plus = model.clone();
                plus.layers[li].params[pi][k] += h;
                let mut minus = model.clone();
                minus.layers[li].params[pi][k] -= h;
                let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
                worst = worst.max(rel(fd, g.params[li][pi][k]));
            }
        }
        checked.push(layer.desc.kind_name());
    }
    let dx = g.input.as_ref().expect("input gradient");
    for k in (0..x.len()).step_by(17) {
        let mut xp = x.clone();
        xp[k] += h;
        let mut xm = x.clone();
        xm[k] -= h;
        let fd = (loss(&model, &xp) - loss(&model, &xm)) / (2.0 * h);
        worst = worst.max(rel(fd, dx[k]));
    }
    outcome(
        worst <= 1e-4,
        format!("worst relative error {worst:.2e} across {}", checked.join(", ")),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let names = [
        "quantizer noise scaling",
        "allocation optimality gap",
        "λ bisection consistency",
        "control stability",
        "smoothing effect",
        "sensitivity ordering",
        "end-to-end accuracy ordering",
        "cost accounting",
        "determinism",
        "gradient correctness",
    ];
    let mut e2e = None;
    let mut failed = 0;
    for n in 1..=10 {
        if !on(n) {
            continue;
        }
        let start = Instant::now();
        let o = match n {
            1 => c1(),
            2 => c2(),
            3 => c3(),
            4 => c4(out),
            5 => c5(out),
            6 => c6(out),
            7 | 8 => {
                let e = e2e.get_or_insert_with(|| end_to_end(out));
                if n == 7 {
                    c7(e)
                } else {
                    c8(e)
                }
            }
            9 => c9(out),
            _ => c10(),
        };
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} criterion {n:>2} {}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            names[n - 1],
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} failing");
    if failed > 0 && std::env::var_os("BLOCKPREC_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
