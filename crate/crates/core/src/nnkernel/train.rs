use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MacAudit, Model, QuantContext, QuantMode, StagePolicy};
use crate::bfp::{DataRole, MAX_BITWIDTH};
use crate::bwmap::{self, BitWidthMap, GeneratorConfig, QuantCoeffState, DEFAULT_BETA, DEFAULT_ITERATIONS};
use crate::error::{Error, Result};
use crate::sens::EpochSensitivitySet;

/// Bit-width reported for full-precision runs.
pub const FULL_PRECISION_BITS: f64 = 32.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major samples, each of `dims` elements.
    pub images: Vec<f64>,
    pub labels: Vec<u8>,
    pub dims: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<u8>, dims: Vec<usize>, classes: usize) -> Result<Self> {
        let per: usize = dims.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} values do not form {} samples of {dims:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!("label {l} outside 0..{classes}")));
        }
        Ok(Self {
            images,
            labels,
            dims,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<u8>) {
        let per = self.sample_len();
        let mut x = Vec::with_capacity(indices.len() * per);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(&self.images[i * per..(i + 1) * per]);
            y.push(self.labels[i]);
        }
        (x, y)
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            dims: self.dims.clone(),
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub initial: f64,
    /// Linear ramp from `initial / warmup_epochs` over the first epochs.
    pub warmup_epochs: usize,
    /// The rate is multiplied by `decay_factor` after each listed epoch.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            warmup_epochs: 0,
            decay_epochs: Vec::new(),
            decay_factor: 0.2,
        }
    }
}

impl LrSchedule {
    /// Learning rate for a 1-based epoch.
    pub fn lr(&self, epoch: usize) -> f64 {
        let mut lr = self.initial;
        if epoch <= self.warmup_epochs {
            lr *= epoch as f64 / self.warmup_epochs as f64;
        }
        let decays = self.decay_epochs.iter().filter(|&&d| epoch > d).count();
        lr * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonFinitePolicy {
    #[default]
    Abort,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: LrSchedule,
    pub mode: QuantMode,
    pub policy: StagePolicy,
    pub alpha_weights: f64,
    pub alpha_activations: f64,
    pub beta: f64,
    pub iterations: usize,
    pub generator: GeneratorConfig,
    pub non_finite: NonFinitePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 0.0,
            lr: LrSchedule::default(),
            mode: QuantMode::Dynamic,
            policy: StagePolicy::default(),
            alpha_weights: 4.0,
            alpha_activations: 4.0,
            beta: DEFAULT_BETA,
            iterations: DEFAULT_ITERATIONS,
            generator: GeneratorConfig::default(),
            non_finite: NonFinitePolicy::Abort,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.lr.initial > 0.0) || !(self.lr.decay_factor > 0.0) {
            return Err(Error::config("learning rate and decay factor must be positive"));
        }
        if let QuantMode::StaticUniform(b) = self.mode {
            if b > MAX_BITWIDTH {
                return Err(Error::config(format!("uniform bit-width {b} exceeds {MAX_BITWIDTH}")));
            }
        }
        if !(0.0..=1.0).contains(&self.generator.gamma) {
            return Err(Error::config(format!("γ = {} outside [0, 1]", self.generator.gamma)));
        }
        self.policy.validate()?;
        QuantCoeffState::new(DataRole::Weight, self.alpha_weights, self.beta, self.iterations)?;
        QuantCoeffState::new(DataRole::Activation, self.alpha_activations, self.beta, self.iterations)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Full-precision master weights.
    pub model: Model,
    /// Momentum buffers mirroring `Layer::params`.
    pub velocity: Vec<Vec<Vec<f64>>>,
    pub weight_map: BitWidthMap,
    pub activation_map: BitWidthMap,
    pub weight_coeff: QuantCoeffState,
    pub activation_coeff: QuantCoeffState,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    /// Mini-batch size the activation map is keyed for.
    pub batch_size: usize,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let velocity = model
            .layers
            .iter()
            .map(|l| l.params.iter().map(|p| vec![0.0; p.len()]).collect())
            .collect();
        let weight_map = BitWidthMap::initial(DataRole::Weight, &model.weight_keys()?);
        let activation_map = BitWidthMap::initial(DataRole::Activation, &model.activation_keys(cfg.batch_size)?);
        Ok(Self {
            velocity,
            weight_map,
            activation_map,
            weight_coeff: QuantCoeffState::new(DataRole::Weight, cfg.alpha_weights, cfg.beta, cfg.iterations)?,
            activation_coeff: QuantCoeffState::new(
                DataRole::Activation,
                cfg.alpha_activations,
                cfg.beta,
                cfg.iterations,
            )?,
            model,
            epoch: 0,
            step: 0,
            seed,
            batch_size: cfg.batch_size,
        })
    }

    fn context(&self, cfg: &TrainConfig, collect: bool) -> QuantContext<'_> {
        QuantContext {
            mode: cfg.mode,
            policy: cfg.policy,
            weight_map: Some(&self.weight_map),
            activation_map: Some(&self.activation_map),
            map_batch: self.batch_size,
            collect_sensitivity: collect,
            zero_nonfinite: cfg.non_finite == NonFinitePolicy::Zero,
        }
    }

    /// Average executable bit-width of a category's map as it applies to
    /// the current mode.
    pub fn average_bitwidth(&self, cfg: &TrainConfig, category: DataRole) -> f64 {
        match cfg.mode {
            QuantMode::FullPrecision => FULL_PRECISION_BITS,
            QuantMode::StaticUniform(b) => b as f64,
            QuantMode::Dynamic => match category {
                DataRole::Weight => self.weight_map.average_executable(None),
                _ => self.activation_map.average_executable(None),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    /// Unweighted mean executable bit-width of the maps used this epoch.
    pub avg_bw_w: f64,
    pub avg_bw_a: f64,
    /// λ after the epoch-end update.
    pub lambda_w: Option<f64>,
    pub lambda_a: Option<f64>,
    /// Dynamic-operand MAC-bits over all three stages.
    pub macbits: f64,
    /// MACs attributed to dynamic-operand blocks.
    pub macs: f64,
    pub skipped_macs: f64,
    /// L1 distance between consecutive executable maps.
    pub map_change_w: f64,
    pub map_change_a: f64,
    pub audit: MacAudit,
}

/// Momentum SGD on the master weights: `v ← μv + g + wd·w`, `w ← w − lr·v`.
pub fn sgd_step(
    model: &mut Model,
    velocity: &mut [Vec<Vec<f64>>],
    grads: &[Vec<Vec<f64>>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != model.layers.len() || velocity.len() != model.layers.len() {
        return Err(Error::internal("gradient structure does not match the model"));
    }
    for ((layer, vel), g) in model.layers.iter_mut().zip(velocity).zip(grads) {
        for ((p, v), g) in layer.params.iter_mut().zip(vel.iter_mut()).zip(g) {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(Error::internal("parameter and gradient lengths differ"));
            }
            for ((w, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = momentum * *v + g + weight_decay * *w;
                *w -= lr * *v;
            }
        }
    }
    Ok(())
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// One pass over `train` followed by the epoch-end map update. Returns the
/// metrics and the sensitivity sets the update consumed.
pub fn train_epoch(
    state: &mut TrainState,
    cfg: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
) -> Result<(EpochMetrics, Vec<EpochSensitivitySet>)> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if train.dims != state.model.input_dims {
        return Err(Error::Data(format!(
            "samples of {:?} fed to a model expecting {:?}",
            train.dims, state.model.input_dims
        )));
    }
    if cfg.batch_size != state.batch_size {
        return Err(Error::config("batch size differs from the one the maps were built for"));
    }
    let epoch = state.epoch + 1;
    let lr = cfg.lr.lr(epoch);
    let dynamic = cfg.mode == QuantMode::Dynamic;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut epoch_rng(state.seed, epoch));

    let mut w_sens = EpochSensitivitySet::new(DataRole::Weight, epoch, &state.weight_map.keys());
    let mut a_sens = EpochSensitivitySet::new(DataRole::Activation, epoch, &state.activation_map.keys());
    let avg_bw_w = state.average_bitwidth(cfg, DataRole::Weight);
    let avg_bw_a = state.average_bitwidth(cfg, DataRole::Activation);

    let mut audit = MacAudit::default();
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let (mut macbits, mut macs, mut skipped) = (0.0, 0.0, 0.0);
    for chunk in order.chunks(cfg.batch_size) {
        let (x, y) = train.gather(chunk);
        let grads = {
            let ctx = state.context(cfg, dynamic);
            let (out, cache) = state.model.forward(&x, &y, &ctx, true)?;
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.correct;
            let grads = state.model.backward(&cache, &ctx)?;
            state.model.update_running_stats(&cache);
            grads
        };
        if dynamic {
            for t in &grads.weight_sens {
                w_sens.accumulate_tensor(t.layer, &t.s, &t.t)?;
            }
            for t in &grads.activation_sens {
                a_sens.accumulate_tensor(t.layer, &t.s, &t.t)?;
            }
            w_sens.minibatches += 1;
            a_sens.minibatches += 1;
        }
        add_audit(&mut audit, &grads.audit);
        macbits += grads.macbits;
        macs += grads.macs;
        skipped += grads.skipped_macs;
        sgd_step(
            &mut state.model,
            &mut state.velocity,
            &grads.params,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;
        state.step += 1;
    }

    let (mut change_w, mut change_a) = (0.0, 0.0);
    let mut sets = Vec::new();
    if dynamic {
        let (wm, wc) = bwmap::generate(&state.weight_coeff, &w_sens, &state.weight_map, &cfg.generator)?;
        let (am, ac) = bwmap::generate(&state.activation_coeff, &a_sens, &state.activation_map, &cfg.generator)?;
        change_w = wm.executable_l1(&state.weight_map)?;
        change_a = am.executable_l1(&state.activation_map)?;
        debug!(
            "epoch {epoch}: λ_w {:?} → {:?}, λ_a {:?} → {:?}",
            state.weight_coeff.lambda, wc.lambda, state.activation_coeff.lambda, ac.lambda
        );
        state.weight_map = wm;
        state.activation_map = am;
        state.weight_coeff = wc;
        state.activation_coeff = ac;
        sets.push(w_sens);
        sets.push(a_sens);
    }
    state.epoch = epoch;

    let val_acc = val.map(|v| evaluate(state, cfg, v)).transpose()?;
    let metrics = EpochMetrics {
        epoch,
        lr,
        train_loss: loss_sum / train.len() as f64,
        train_acc: correct as f64 / train.len() as f64,
        val_acc,
        avg_bw_w,
        avg_bw_a,
        lambda_w: state.weight_coeff.lambda.filter(|_| dynamic),
        lambda_a: state.activation_coeff.lambda.filter(|_| dynamic),
        macbits,
        macs,
        skipped_macs: skipped,
        map_change_w: change_w,
        map_change_a: change_a,
        audit,
    };
    info!(
        "epoch {epoch}: loss {:.4} train acc {:.4} val acc {:?} bw {:.3}/{:.3}",
        metrics.train_loss, metrics.train_acc, metrics.val_acc, avg_bw_w, avg_bw_a
    );
    Ok((metrics, sets))
}

fn add_audit(total: &mut MacAudit, part: &MacAudit) {
    for (t, p) in total.macs.iter_mut().zip(part.macs) {
        *t += p;
    }
    total.violations += part.violations;
    total.bypassed += part.bypassed;
}

/// Top-1 accuracy of a forward-only pass with the current maps.
pub fn evaluate(state: &TrainState, cfg: &TrainConfig, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let ctx = state.context(cfg, false);
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(state.batch_size) {
        let (x, y) = data.gather(chunk);
        correct += state.model.forward(&x, &y, &ctx, false)?.0.correct;
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn clusters(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 4;
            images.extend(centers[c].iter().map(|v| v + rng.random_range(-0.3..0.3)));
            labels.push(c as u8);
        }
        Dataset::new(images, labels, vec![1, 4, 4], 4).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            lr: LrSchedule {
                initial: 0.05,
                ..LrSchedule::default()
            },
            ..TrainConfig::default()
        }
    }

    fn state(seed: u64) -> TrainState {
        let model = Model::from_spec("conv:4,relu,linear:4", &[1, 4, 4], 4, seed).unwrap();
        TrainState::new(model, &cfg(), seed).unwrap()
    }

    #[test]
    fn lr_schedule_decays_by_factor() {
        let s = LrSchedule {
            initial: 0.1,
            warmup_epochs: 2,
            decay_epochs: vec![5, 8],
            decay_factor: 0.2,
        };
        assert!((s.lr(1) - 0.05).abs() < 1e-15);
        assert_eq!(s.lr(2), 0.1);
        assert_eq!(s.lr(5), 0.1);
        assert!((s.lr(6) - 0.02).abs() < 1e-15);
        assert!((s.lr(9) - 0.004).abs() < 1e-15);
    }

    #[test]
    fn sgd_examples() {
        let mut st = state(1);
        let w0 = st.model.layers[0].params[0].clone();
        let zeros: Vec<Vec<Vec<f64>>> = st.velocity.clone();
        sgd_step(&mut st.model, &mut st.velocity, &zeros, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(st.model.layers[0].params[0], w0);

        let g: Vec<Vec<Vec<f64>>> = zeros
            .iter()
            .map(|l| l.iter().map(|p| vec![0.5; p.len()]).collect())
            .collect();
        let mut m = st.model.clone();
        let mut v = zeros.clone();
        sgd_step(&mut m, &mut v, &g, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(m.layers[0].params[0][0], w0[0] - 0.1 * 0.5);

        let mut m = st.model.clone();
        let mut v = zeros.clone();
        sgd_step(&mut m, &mut v, &g, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut m, &mut v, &g, 0.1, 0.9, 0.0).unwrap();
        let expect = w0[0] - 0.1 * 0.5 - 0.1 * 1.9 * 0.5;
        assert!((m.layers[0].params[0][0] - expect).abs() < 1e-15);
    }

    #[test]
    fn first_epoch_uses_uniform_four_bits() {
        let mut st = state(2);
        let data = clusters(40, 3);
        let (m, sets) = train_epoch(&mut st, &cfg(), &data, None).unwrap();
        assert_eq!(m.avg_bw_w, 4.0);
        assert_eq!(m.avg_bw_a, 4.0);
        assert_eq!(m.macbits, 4.0 * m.macs);
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].minibatches, 3);
        assert_eq!(m.audit.violations, 0);
        assert!(m.lambda_w.is_some());
    }

    #[test]
    fn identical_seeds_identical_metrics() {
        let data = clusters(48, 4);
        let run = || {
            let mut st = state(7);
            (0..3)
                .map(|_| train_epoch(&mut st, &cfg(), &data, Some(&data)).unwrap().0)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn learns_separable_clusters() {
        let data = clusters(128, 5);
        let mut st = state(3);
        let c = TrainConfig {
            mode: QuantMode::StaticUniform(8),
            ..cfg()
        };
        for _ in 0..8 {
            train_epoch(&mut st, &c, &data, None).unwrap();
        }
        assert_eq!(evaluate(&st, &c, &data).unwrap(), 1.0);
    }

    #[test]
    fn untrained_model_near_chance() {
        let data = clusters(400, 6);
        let accs: Vec<f64> = (0..5)
            .map(|s| evaluate(&state(100 + s), &TrainConfig { mode: QuantMode::FullPrecision, ..cfg() }, &data).unwrap())
            .collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(mean < 0.6, "mean untrained accuracy {mean}");
    }

    #[test]
    fn nonfinite_gradients_abort_or_zero() {
        let data = clusters(16, 8);
        let mut st = state(4);
        st.model.layers[2].params[0][0] = f64::MAX;
        st.model.layers[2].params[0][1] = -f64::MAX;
        let err = train_epoch(&mut st.clone(), &TrainConfig { mode: QuantMode::FullPrecision, ..cfg() }, &data, None);
        assert!(err.is_err());
    }
}
