use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, ConvGeom};
use super::{LayerDescriptor, LayerKind, MacAudit, MacShape, OperandMode, QuantMode, Stage, StagePolicy};
use crate::bfp::{self, BlockLayout, Bitwidths, DataRole};
use crate::bwmap::BitWidthMap;
use crate::error::{Error, Result};
use crate::sens::{self, TensorSensitivity};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub desc: LayerDescriptor,
    /// Per-sample input dims.
    pub in_dims: Vec<usize>,
    pub out_dims: Vec<usize>,
    /// Conv/Linear: `[weight, bias]`; BatchNorm: `[gamma, beta]`.
    pub params: Vec<Vec<f64>>,
    /// BatchNorm running `[mean, var]`.
    pub buffers: Vec<Vec<f64>>,
}

impl Layer {
    pub fn mac_shape(&self) -> Option<MacShape> {
        let mut dims = vec![1];
        dims.extend(&self.in_dims);
        self.desc.mac_shape(&dims)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub input_dims: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub logits: Vec<f64>,
    pub loss: f64,
    pub correct: usize,
    pub batch: usize,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Mac {
        input: Vec<f64>,
        wq: Option<(Bits, Vec<f64>)>,
        w_exps: Vec<i8>,
    },
    Relu {
        input: Vec<f64>,
    },
    MaxPool {
        arg: Vec<usize>,
    },
    AvgPool,
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
        train: bool,
    },
    Loss,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    layers: Vec<LayerCache>,
    dlogits: Vec<f64>,
    pub audit: MacAudit,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Mirrors `Layer::params`.
    pub params: Vec<Vec<Vec<f64>>>,
    pub input: Option<Vec<f64>>,
    /// Per MAC layer weight-entry contributions.
    pub weight_sens: Vec<TensorSensitivity>,
    /// Per MAC layer input-activation contributions, keyed by the full-batch map.
    pub activation_sens: Vec<TensorSensitivity>,
    pub audit: MacAudit,
    /// Dynamic-operand MAC-bits and attributed MACs of this mini-batch.
    pub macbits: f64,
    pub macs: f64,
    pub skipped_macs: f64,
}

/// Bit-width source resolved for one operand of one stage.
#[derive(Debug, Clone, PartialEq)]
enum Bits {
    Uniform(u8),
    PerEntry(Vec<u8>),
}

impl Bits {
    fn as_ref(&self) -> Bitwidths<'_> {
        match self {
            Bits::Uniform(b) => Bitwidths::Uniform(*b),
            Bits::PerEntry(m) => Bitwidths::PerEntry(m),
        }
    }

    fn entry(&self, e: usize) -> u8 {
        match self {
            Bits::Uniform(b) => *b,
            Bits::PerEntry(m) => m[e],
        }
    }
}

/// How each operand of each stage is quantized for one pass.
#[derive(Debug, Clone, Copy)]
pub struct QuantContext<'a> {
    pub mode: QuantMode,
    pub policy: StagePolicy,
    pub weight_map: Option<&'a BitWidthMap>,
    pub activation_map: Option<&'a BitWidthMap>,
    /// Batch size activation-map entries are keyed for.
    pub map_batch: usize,
    /// Collect per-entry sensitivities in `backward`.
    pub collect_sensitivity: bool,
    /// Replace non-finite gradients by zero instead of failing.
    pub zero_nonfinite: bool,
}

impl QuantContext<'_> {
    pub fn bypass() -> Self {
        Self {
            mode: QuantMode::FullPrecision,
            policy: StagePolicy::default(),
            weight_map: None,
            activation_map: None,
            map_batch: 0,
            collect_sensitivity: false,
            zero_nonfinite: false,
        }
    }

    pub fn static_uniform(bits: u8) -> Self {
        Self {
            mode: QuantMode::StaticUniform(bits),
            ..Self::bypass()
        }
    }

    fn operand(&self, stage: Stage, role: DataRole, layer: usize, layout: &BlockLayout) -> Result<(OperandMode, Option<Bits>)> {
        let dynamic = self.policy.is_dynamic(stage, role);
        match self.mode {
            QuantMode::FullPrecision => Ok((OperandMode::Bypass, None)),
            QuantMode::StaticUniform(b) => Ok(if dynamic {
                (OperandMode::Dynamic, Some(Bits::Uniform(b)))
            } else {
                (OperandMode::Static, Some(Bits::Uniform(bfp::MAX_BITWIDTH)))
            }),
            QuantMode::Dynamic if !dynamic => Ok((OperandMode::Static, Some(Bits::Uniform(bfp::MAX_BITWIDTH)))),
            QuantMode::Dynamic => {
                let map = match role {
                    DataRole::Weight => self.weight_map,
                    DataRole::Activation => self.activation_map,
                    DataRole::ActivationGradient => None,
                }
                .ok_or_else(|| Error::config(format!("no {} bit-width map supplied", role.as_str())))?;
                let t = map
                    .tensor(layer)
                    .ok_or_else(|| Error::config(format!("bit-width map lacks layer {layer}")))?;
                let bits = if role == DataRole::Activation {
                    let full = full_batch_layout(layout, self.map_batch)?;
                    let idx = entry_remap(layout, &full);
                    if t.executable.len() != full.entries() {
                        return Err(Error::config(format!(
                            "activation map for layer {layer} has {} entries, expected {}",
                            t.executable.len(),
                            full.entries()
                        )));
                    }
                    idx.iter().map(|&i| t.executable[i]).collect()
                } else {
                    t.executable.clone()
                };
                Ok((OperandMode::Dynamic, Some(Bits::PerEntry(bits))))
            }
        }
    }
}

/// Layout of the same tensor at the map's batch size.
pub(crate) fn full_batch_layout(layout: &BlockLayout, map_batch: usize) -> Result<BlockLayout> {
    let mut dims = layout.shape().to_vec();
    if map_batch < dims[0] {
        return Err(Error::config(format!(
            "batch of {} exceeds the activation map's batch size {map_batch}",
            dims[0]
        )));
    }
    dims[0] = map_batch;
    BlockLayout::new(&dims, layout.role())
}

/// For each entry of `part` (a smaller batch), its index in `full`.
pub(crate) fn entry_remap(part: &BlockLayout, full: &BlockLayout) -> Vec<usize> {
    let (_, pc) = part.grid();
    let (_, fc) = full.grid();
    (0..part.entries()).map(|e| (e / pc) * fc + e % pc).collect()
}

fn quantize(values: &[f64], layout: &BlockLayout, bits: &Option<Bits>) -> Result<(Vec<f64>, Vec<i8>)> {
    let mut exps = Vec::new();
    match bits {
        Some(b) => {
            let mut out = vec![0.0; values.len()];
            bfp::fake_quantize(values, layout, b.as_ref(), &mut out, &mut exps)?;
            Ok((out, exps))
        }
        None => Ok((values.to_vec(), exps)),
    }
}

fn sanitize(values: &mut [f64], what: &str, zero: bool) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        if !zero {
            return Err(Error::numeric(format!("non-finite {what} at element {i}: {}", values[i])));
        }
        values.iter_mut().filter(|v| !v.is_finite()).for_each(|v| *v = 0.0);
    }
    Ok(())
}

/// Per-entry `Σ_instances (2^e)²/16 · Σ_lanes g²`.
fn entry_sensitivity(grads: &[f64], layout: &BlockLayout, exps: &[i8]) -> Vec<f64> {
    let inst = layout.instances();
    (0..layout.entries())
        .map(|entry| {
            let bases: Vec<usize> = layout.lane_bases(entry).into_iter().flatten().collect();
            (0..inst)
                .map(|i| {
                    let sq: f64 = bases.iter().map(|&b| grads[b + i] * grads[b + i]).sum();
                    sens::range_sq(exps[entry * inst + i]) / sens::BLOCK_VALUES * sq
                })
                .sum()
        })
        .collect()
}

pub(crate) fn parse_model_spec(spec: &str, input_dims: &[usize], classes: usize) -> Result<Vec<LayerDescriptor>> {
    let mut descs = Vec::new();
    let mut dims = input_dims.to_vec();
    for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let parts: Vec<&str> = token.split(':').collect();
        let arg = |i: usize, default: usize| -> Result<usize> {
            parts.get(i).map_or(Ok(default), |s| {
                s.parse().map_err(|_| Error::config(format!("bad number in layer `{token}`")))
            })
        };
        let desc = match parts[0] {
            "conv" => {
                if dims.len() != 3 {
                    return Err(Error::config(format!("`{token}` needs a [C, H, W] input, got {dims:?}")));
                }
                let k = arg(2, 3)?;
                LayerDescriptor::conv2d(dims[0], arg(1, 0)?, k, k / 2, arg(3, 1)?)
            }
            "linear" => LayerDescriptor::linear(dims.iter().product(), arg(1, classes)?),
            "relu" => LayerDescriptor::relu(),
            "maxpool" => LayerDescriptor::max_pool(arg(1, 2)?),
            "avgpool" => LayerDescriptor::avg_pool(arg(1, 2)?),
            "bn" | "batchnorm" => LayerDescriptor::batch_norm(dims[0]),
            other => return Err(Error::config(format!("unknown layer kind `{other}`"))),
        };
        dims = output_dims(&desc, &dims)?;
        descs.push(desc);
    }
    descs.push(LayerDescriptor::softmax_xent());
    Ok(descs)
}

fn output_dims(desc: &LayerDescriptor, dims: &[usize]) -> Result<Vec<usize>> {
    let bad = |msg: String| Err(Error::config(msg));
    match desc.kind {
        LayerKind::Conv2d { c_in, .. } => {
            if dims.len() != 3 || dims[0] != c_in {
                return bad(format!("conv expects [{c_in}, H, W], got {dims:?}"));
            }
            let mut full = vec![1];
            full.extend(dims);
            let shape = desc.mac_shape(&full).unwrap();
            if shape.is_degenerate() {
                return bad(format!("degenerate conv {shape:?}"));
            }
            Ok(shape.output_dims(1)[1..].to_vec())
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            let n: usize = dims.iter().product();
            if n != in_features || in_features == 0 || out_features == 0 {
                return bad(format!("linear expects {in_features} inputs, got {dims:?}"));
            }
            Ok(vec![out_features])
        }
        LayerKind::ReLU | LayerKind::SoftmaxXEnt => Ok(dims.to_vec()),
        LayerKind::MaxPool { size } | LayerKind::AvgPool { size } => {
            if dims.len() != 3 || size == 0 || dims[1] < size || dims[2] < size {
                return bad(format!("pooling {size}×{size} over {dims:?}"));
            }
            Ok(vec![dims[0], dims[1] / size, dims[2] / size])
        }
        LayerKind::BatchNorm { channels } => {
            if dims.is_empty() || dims[0] != channels {
                return bad(format!("batchnorm over {channels} channels, got {dims:?}"));
            }
            Ok(dims.to_vec())
        }
    }
}

impl Model {
    pub fn new(descs: &[LayerDescriptor], input_dims: &[usize], seed: u64) -> Result<Self> {
        if descs.last().map(|d| d.kind) != Some(LayerKind::SoftmaxXEnt) {
            return Err(Error::config("model must end with a softmax cross-entropy head"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = input_dims.to_vec();
        let mut layers = Vec::with_capacity(descs.len());
        for (i, desc) in descs.iter().enumerate() {
            if desc.quantized && !desc.is_mac() {
                return Err(Error::config(format!("layer {i} ({}) cannot be quantized", desc.kind_name())));
            }
            if desc.kind == LayerKind::SoftmaxXEnt && i + 1 != descs.len() {
                return Err(Error::config("softmax cross-entropy must be the last layer"));
            }
            let out = output_dims(desc, &dims)?;
            let (params, buffers) = match desc.kind {
                LayerKind::Conv2d { c_in, c_out, kernel, .. } => {
                    let fan_in = c_in * kernel * kernel;
                    (vec![he_init(&mut rng, c_out * fan_in, fan_in), vec![0.0; c_out]], vec![])
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => (
                    vec![he_init(&mut rng, out_features * in_features, in_features), vec![0.0; out_features]],
                    vec![],
                ),
                LayerKind::BatchNorm { channels } => (
                    vec![vec![1.0; channels], vec![0.0; channels]],
                    vec![vec![0.0; channels], vec![1.0; channels]],
                ),
                _ => (vec![], vec![]),
            };
            layers.push(Layer {
                desc: *desc,
                in_dims: dims.clone(),
                out_dims: out.clone(),
                params,
                buffers,
            });
            dims = out;
        }
        if dims.len() != 1 || dims[0] < 2 {
            return Err(Error::config(format!("model output {dims:?} is not a class vector")));
        }
        Ok(Self {
            layers,
            input_dims: input_dims.to_vec(),
            classes: dims[0],
        })
    }

    /// Builds a model from a comma-separated layer list such as
    /// `conv:16,relu,maxpool,conv:32,relu,maxpool,linear:10`.
    pub fn from_spec(spec: &str, input_dims: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let descs = parse_model_spec(spec, input_dims, classes)?;
        let model = Self::new(&descs, input_dims, seed)?;
        if model.classes != classes {
            return Err(Error::config(format!(
                "model emits {} classes, dataset has {classes}",
                model.classes
            )));
        }
        Ok(model)
    }

    pub fn descriptors(&self) -> Vec<LayerDescriptor> {
        self.layers.iter().map(|l| l.desc).collect()
    }

    pub fn mac_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].desc.is_mac() && self.layers[i].desc.quantized)
            .collect()
    }

    fn batch_dims(dims: &[usize], batch: usize, flatten: bool) -> Vec<usize> {
        if flatten {
            vec![batch, dims.iter().product()]
        } else {
            let mut d = vec![batch];
            d.extend(dims);
            d
        }
    }

    fn is_linear(&self, layer: usize) -> bool {
        matches!(self.layers[layer].desc.kind, LayerKind::Linear { .. })
    }

    pub fn weight_layout(&self, layer: usize) -> Result<BlockLayout> {
        let shape = self.layers[layer]
            .mac_shape()
            .ok_or_else(|| Error::config(format!("layer {layer} has no weights to quantize")))?;
        BlockLayout::new(&shape.weight_dims(), DataRole::Weight)
    }

    pub fn activation_layout(&self, layer: usize, batch: usize) -> Result<BlockLayout> {
        let l = &self.layers[layer];
        BlockLayout::new(&Self::batch_dims(&l.in_dims, batch, self.is_linear(layer)), DataRole::Activation)
    }

    fn gradient_layout(&self, layer: usize, batch: usize) -> Result<BlockLayout> {
        let l = &self.layers[layer];
        BlockLayout::new(&Self::batch_dims(&l.out_dims, batch, false), DataRole::ActivationGradient)
    }

    pub fn weight_keys(&self) -> Result<Vec<(usize, usize)>> {
        self.mac_layers()
            .into_iter()
            .map(|i| Ok((i, self.weight_layout(i)?.entries())))
            .collect()
    }

    pub fn activation_keys(&self, batch: usize) -> Result<Vec<(usize, usize)>> {
        self.mac_layers()
            .into_iter()
            .map(|i| Ok((i, self.activation_layout(i, batch)?.entries())))
            .collect()
    }

    pub fn compute_amounts(&self, layer: usize, role: DataRole, batch: usize) -> Result<Vec<f64>> {
        let l = &self.layers[layer];
        let dims = Self::batch_dims(&l.in_dims, batch, false);
        sens::block_compute_amount(&l.desc, &dims, role, batch)
    }

    /// MACs per stage of one forward pass over a batch.
    pub fn macs_per_stage(&self, batch: usize) -> u64 {
        self.mac_layers()
            .iter()
            .map(|&i| self.layers[i].mac_shape().unwrap().macs(batch))
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(Vec::len).sum()
    }

    pub fn forward(&self, x: &[f64], labels: &[u8], ctx: &QuantContext<'_>, train: bool) -> Result<(BatchOutput, ForwardCache)> {
        let n = labels.len();
        let per: usize = self.input_dims.iter().product();
        if n == 0 || x.len() != n * per {
            return Err(Error::internal(format!(
                "batch of {} values for {n} samples of {:?}",
                x.len(),
                self.input_dims
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::Data(format!("label {bad} out of range for {} classes", self.classes)));
        }
        let mut audit = MacAudit::default();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let mut output = None;
        for (li, layer) in self.layers.iter().enumerate() {
            match layer.desc.kind {
                LayerKind::Conv2d { .. } | LayerKind::Linear { .. } => {
                    let shape = layer.mac_shape().unwrap();
                    let (y, cache) = self.mac_forward(li, &shape, cur, n, ctx, &mut audit)?;
                    caches.push(cache);
                    cur = y;
                }
                LayerKind::ReLU => {
                    let mut y = vec![0.0; cur.len()];
                    ops::relu_forward(&cur, &mut y);
                    caches.push(LayerCache::Relu { input: cur });
                    cur = y;
                }
                LayerKind::MaxPool { size } => {
                    let d = &layer.in_dims;
                    let out: usize = layer.out_dims.iter().product::<usize>() * n;
                    let mut y = vec![0.0; out];
                    let mut arg = vec![0; out];
                    ops::maxpool_forward(&cur, n * d[0], d[1], d[2], size, &mut y, &mut arg);
                    caches.push(LayerCache::MaxPool { arg });
                    cur = y;
                }
                LayerKind::AvgPool { size } => {
                    let d = &layer.in_dims;
                    let mut y = vec![0.0; layer.out_dims.iter().product::<usize>() * n];
                    ops::avgpool_forward(&cur, n * d[0], d[1], d[2], size, &mut y);
                    caches.push(LayerCache::AvgPool);
                    cur = y;
                }
                LayerKind::BatchNorm { channels } => {
                    let plane = layer.in_dims[1..].iter().product::<usize>();
                    let mut y = vec![0.0; cur.len()];
                    let (gamma, beta) = (&layer.params[0], &layer.params[1]);
                    if train {
                        let (xhat, inv_std, mean, var) =
                            ops::batchnorm_train(&cur, n, channels, plane, gamma, beta, &mut y);
                        caches.push(LayerCache::BatchNorm {
                            xhat,
                            inv_std,
                            batch_mean: mean,
                            batch_var: var,
                            train: true,
                        });
                    } else {
                        let (mean, var) = (&layer.buffers[0], &layer.buffers[1]);
                        ops::batchnorm_eval(&cur, n, channels, plane, gamma, beta, mean, var, &mut y);
                        let inv_std = var.iter().map(|v| 1.0 / (v + ops::BN_EPS).sqrt()).collect();
                        caches.push(LayerCache::BatchNorm {
                            xhat: vec![],
                            inv_std,
                            batch_mean: vec![],
                            batch_var: vec![],
                            train: false,
                        });
                    }
                    cur = y;
                }
                LayerKind::SoftmaxXEnt => {
                    let (loss, dlogits, correct) = ops::softmax_xent(&cur, labels, self.classes);
                    if !loss.is_finite() {
                        return Err(Error::numeric(format!("non-finite loss {loss}")));
                    }
                    caches.push(LayerCache::Loss);
                    output = Some((
                        BatchOutput {
                            logits: std::mem::take(&mut cur),
                            loss,
                            correct,
                            batch: n,
                        },
                        dlogits,
                    ));
                }
            }
        }
        let (out, dlogits) = output.ok_or_else(|| Error::internal("model has no loss head"))?;
        Ok((
            out,
            ForwardCache {
                batch: n,
                layers: caches,
                dlogits,
                audit,
            },
        ))
    }

    fn mac_forward(
        &self,
        li: usize,
        shape: &MacShape,
        input: Vec<f64>,
        n: usize,
        ctx: &QuantContext<'_>,
        audit: &mut MacAudit,
    ) -> Result<(Vec<f64>, LayerCache)> {
        let layer = &self.layers[li];
        let quantized = layer.desc.quantized;
        let a_layout = self.activation_layout(li, n)?;
        let w_layout = self.weight_layout(li)?;
        let (a_mode, a_bits) = if quantized {
            ctx.operand(Stage::Forward, DataRole::Activation, li, &a_layout)?
        } else {
            (OperandMode::Bypass, None)
        };
        let (w_mode, w_bits) = if quantized {
            ctx.operand(Stage::Forward, DataRole::Weight, li, &w_layout)?
        } else {
            (OperandMode::Bypass, None)
        };
        let (aq, _) = quantize(&input, &a_layout, &a_bits)?;
        let (wq, w_exps) = quantize(&layer.params[0], &w_layout, &w_bits)?;
        let bias = &layer.params[1];
        let mut y = vec![0.0; shape.output_dims(n).iter().product()];
        match *shape {
            MacShape::Conv2d { .. } => ops::conv_forward(&aq, n, &wq, bias, &conv_geom(shape), &mut y),
            MacShape::Linear {
                in_features,
                out_features,
            } => ops::linear_forward(&aq, n, &wq, bias, in_features, out_features, &mut y),
        }
        audit.record(Stage::Forward, a_mode, w_mode, shape.macs(n));
        Ok((
            y,
            LayerCache::Mac {
                input,
                wq: w_bits.map(|b| (b, wq)),
                w_exps,
            },
        ))
    }

    /// Backpropagates the cached loss gradient through all layers.
    pub fn backward(&self, cache: &ForwardCache, ctx: &QuantContext<'_>) -> Result<Gradients> {
        let n = cache.batch;
        let mut audit = cache.audit.clone();
        let mut grads: Vec<Vec<Vec<f64>>> = self
            .layers
            .iter()
            .map(|l| l.params.iter().map(|p| vec![0.0; p.len()]).collect())
            .collect();
        let mut weight_sens = Vec::new();
        let mut activation_sens = Vec::new();
        let (mut macbits, mut macs, mut skipped) = (0.0, 0.0, 0.0);
        let mut dy = cache.dlogits.clone();

        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let dx = match (&layer.desc.kind, &cache.layers[li]) {
                (LayerKind::SoftmaxXEnt, LayerCache::Loss) => dy,
                (LayerKind::ReLU, LayerCache::Relu { input }) => {
                    let mut dx = vec![0.0; dy.len()];
                    ops::relu_backward(input, &dy, &mut dx);
                    dx
                }
                (LayerKind::MaxPool { .. }, LayerCache::MaxPool { arg }) => {
                    let mut dx = vec![0.0; n * layer.in_dims.iter().product::<usize>()];
                    ops::maxpool_backward(&dy, arg, &mut dx);
                    dx
                }
                (LayerKind::AvgPool { size }, LayerCache::AvgPool) => {
                    let d = &layer.in_dims;
                    let mut dx = vec![0.0; n * d.iter().product::<usize>()];
                    ops::avgpool_backward(&dy, n * d[0], d[1], d[2], *size, &mut dx);
                    dx
                }
                (
                    LayerKind::BatchNorm { channels },
                    LayerCache::BatchNorm {
                        xhat, inv_std, train, ..
                    },
                ) => {
                    let plane = layer.in_dims[1..].iter().product::<usize>();
                    let gamma = &layer.params[0];
                    if *train {
                        let g = ops::batchnorm_backward(&dy, xhat, inv_std, gamma, n, *channels, plane);
                        grads[li][0] = g.dgamma;
                        grads[li][1] = g.dbeta;
                        g.dx
                    } else {
                        let mut dx = dy.clone();
                        for s in 0..n {
                            for ch in 0..*channels {
                                let off = (s * channels + ch) * plane;
                                for v in &mut dx[off..off + plane] {
                                    *v *= gamma[ch] * inv_std[ch];
                                }
                            }
                        }
                        dx
                    }
                }
                (LayerKind::Conv2d { .. } | LayerKind::Linear { .. }, LayerCache::Mac { input, wq, w_exps }) => {
                    let shape = layer.mac_shape().unwrap();
                    let out = self.mac_backward(li, &shape, input, wq, w_exps, dy, n, ctx, &mut audit)?;
                    grads[li][0] = out.dw;
                    grads[li][1] = out.db;
                    if let Some(s) = out.weight_sens {
                        weight_sens.push(s);
                    }
                    if let Some(s) = out.activation_sens {
                        activation_sens.push(s);
                    }
                    macbits += out.macbits;
                    macs += out.macs;
                    skipped += out.skipped;
                    out.dx
                }
                _ => return Err(Error::internal(format!("forward cache does not match layer {li}"))),
            };
            dy = dx;
        }
        weight_sens.reverse();
        activation_sens.reverse();
        Ok(Gradients {
            params: grads,
            input: (!dy.is_empty()).then_some(dy),
            weight_sens,
            activation_sens,
            audit,
            macbits,
            macs,
            skipped_macs: skipped,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn mac_backward(
        &self,
        li: usize,
        shape: &MacShape,
        input: &[f64],
        wq_fwd: &Option<(Bits, Vec<f64>)>,
        w_exps: &[i8],
        mut dy: Vec<f64>,
        n: usize,
        ctx: &QuantContext<'_>,
        audit: &mut MacAudit,
    ) -> Result<MacBackward> {
        let layer = &self.layers[li];
        let quantized = layer.desc.quantized;
        sanitize(&mut dy, "activation gradient", ctx.zero_nonfinite)?;
        let a_layout = self.activation_layout(li, n)?;
        let w_layout = self.weight_layout(li)?;
        let g_layout = self.gradient_layout(li, n)?;
        let resolve = |stage, role, layout: &BlockLayout| {
            if quantized {
                ctx.operand(stage, role, li, layout)
            } else {
                Ok((OperandMode::Bypass, None))
            }
        };

        // backward stage: dY ⊛ Wᵀ
        let (g_mode_b, g_bits_b) = resolve(Stage::Backward, DataRole::ActivationGradient, &g_layout)?;
        let (w_mode_b, w_bits_b) = resolve(Stage::Backward, DataRole::Weight, &w_layout)?;
        let (gq_b, _) = quantize(&dy, &g_layout, &g_bits_b)?;
        let w_owned;
        let wb: &[f64] = match (wq_fwd, &w_bits_b) {
            (Some((b, w)), Some(bb)) if b == bb => w,
            (_, None) => &layer.params[0],
            _ => {
                w_owned = quantize(&layer.params[0], &w_layout, &w_bits_b)?.0;
                &w_owned
            }
        };
        let mut dx = vec![0.0; input.len()];
        match *shape {
            MacShape::Conv2d { .. } => ops::conv_backward_data(&gq_b, n, wb, &conv_geom(shape), &mut dx),
            MacShape::Linear {
                in_features,
                out_features,
            } => ops::linear_backward_data(&gq_b, n, wb, in_features, out_features, &mut dx),
        }
        sanitize(&mut dx, "activation gradient", ctx.zero_nonfinite)?;
        audit.record(Stage::Backward, g_mode_b, w_mode_b, shape.macs(n));

        // weight-update stage: A ⊛ dY
        let (a_mode_u, a_bits_u) = resolve(Stage::WeightUpdate, DataRole::Activation, &a_layout)?;
        let (g_mode_u, g_bits_u) = resolve(Stage::WeightUpdate, DataRole::ActivationGradient, &g_layout)?;
        let gq_u = if g_bits_u == g_bits_b {
            gq_b
        } else {
            quantize(&dy, &g_layout, &g_bits_u)?.0
        };
        let (aq_u, a_exps) = quantize(input, &a_layout, &a_bits_u)?;
        let mut dw = vec![0.0; layer.params[0].len()];
        let mut db = vec![0.0; layer.params[1].len()];
        match *shape {
            MacShape::Conv2d { .. } => {
                ops::conv_backward_weight(&aq_u, &gq_u, n, &conv_geom(shape), &mut dw, &mut db);
                let (ho, wo) = shape.output_hw();
                ops::bias_grad_planes(&dy, n, shape.output_dims(1)[1], ho * wo, &mut db);
            }
            MacShape::Linear {
                in_features,
                out_features,
            } => {
                ops::linear_backward_weight(&aq_u, &gq_u, n, in_features, out_features, &mut dw, &mut db);
                db.iter_mut().for_each(|v| *v = 0.0);
                for row in dy.chunks(out_features) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
            }
        }
        sanitize(&mut dw, "weight gradient", ctx.zero_nonfinite)?;
        audit.record(Stage::WeightUpdate, a_mode_u, g_mode_u, shape.macs(n));

        // MAC-bit accounting on the dynamic operand of each stage
        let mut acct = StageCost::default();
        if quantized && ctx.mode != QuantMode::FullPrecision {
            let t_w = sens::compute_amount_for(shape, DataRole::Weight, n)?;
            let t_a = sens::compute_amount_for(shape, DataRole::Activation, n)?;
            for stage in Stage::ALL {
                let role = ctx.policy.stage(stage).dynamic_operand;
                let (t, bits) = match (role, stage) {
                    (DataRole::Weight, Stage::Forward) => (&t_w, self.bits_for(ctx, stage, role, li, &w_layout)?),
                    (DataRole::Weight, _) => (&t_w, w_bits_b.clone()),
                    (DataRole::Activation, Stage::WeightUpdate) => (&t_a, a_bits_u.clone()),
                    (DataRole::Activation, _) => (&t_a, self.bits_for(ctx, stage, role, li, &a_layout)?),
                    _ => continue,
                };
                if let Some(bits) = bits {
                    acct.add(t, &bits);
                }
            }
        }

        let (weight_sens, activation_sens) = if ctx.collect_sensitivity {
            let w_exps = if w_exps.is_empty() {
                let mut e = Vec::new();
                bfp::block_exponents(&layer.params[0], &w_layout, &mut e)?;
                e
            } else {
                w_exps.to_vec()
            };
            let ws = TensorSensitivity {
                layer: li,
                s: entry_sensitivity(&dw, &w_layout, &w_exps),
                t: sens::compute_amount_for(shape, DataRole::Weight, n)?,
            };
            let a_exps = if a_exps.is_empty() {
                let mut e = Vec::new();
                bfp::block_exponents(input, &a_layout, &mut e)?;
                e
            } else {
                a_exps
            };
            let s_part = entry_sensitivity(&dx, &a_layout, &a_exps);
            let t_part = sens::compute_amount_for(shape, DataRole::Activation, n)?;
            let full = full_batch_layout(&a_layout, ctx.map_batch.max(n))?;
            let mut s = vec![0.0; full.entries()];
            let mut t = vec![0.0; full.entries()];
            for (p, &f) in entry_remap(&a_layout, &full).iter().enumerate() {
                s[f] += s_part[p];
                t[f] += t_part[p];
            }
            let a_sens = TensorSensitivity { layer: li, s, t };
            (Some(ws), Some(a_sens))
        } else {
            (None, None)
        };

        Ok(MacBackward {
            dx,
            dw,
            db,
            weight_sens,
            activation_sens,
            macbits: acct.macbits,
            macs: acct.macs,
            skipped: acct.skipped,
        })
    }

    fn bits_for(&self, ctx: &QuantContext<'_>, stage: Stage, role: DataRole, li: usize, layout: &BlockLayout) -> Result<Option<Bits>> {
        Ok(ctx.operand(stage, role, li, layout)?.1)
    }

    /// Loss with quantization bypassed everywhere.
    pub fn loss(&self, x: &[f64], labels: &[u8]) -> Result<f64> {
        Ok(self.forward(x, labels, &QuantContext::bypass(), false)?.0.loss)
    }

    /// Adopts the batch statistics of a training-mode pass into the
    /// BatchNorm running estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers) {
            if let LayerCache::BatchNorm {
                batch_mean,
                batch_var,
                train: true,
                ..
            } = c
            {
                let count = cache.batch as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for ch in 0..batch_mean.len() {
                    layer.buffers[0][ch] = (1.0 - ops::BN_MOMENTUM) * layer.buffers[0][ch] + ops::BN_MOMENTUM * batch_mean[ch];
                    layer.buffers[1][ch] =
                        (1.0 - ops::BN_MOMENTUM) * layer.buffers[1][ch] + ops::BN_MOMENTUM * batch_var[ch] * unbias;
                }
            }
        }
    }
}

struct MacBackward {
    dx: Vec<f64>,
    dw: Vec<f64>,
    db: Vec<f64>,
    weight_sens: Option<TensorSensitivity>,
    activation_sens: Option<TensorSensitivity>,
    macbits: f64,
    macs: f64,
    skipped: f64,
}

#[derive(Default)]
struct StageCost {
    macbits: f64,
    macs: f64,
    skipped: f64,
}

impl StageCost {
    fn add(&mut self, t: &[f64], bits: &Bits) {
        for (e, &t) in t.iter().enumerate() {
            let b = bits.entry(e);
            self.macs += t;
            self.macbits += t * b as f64;
            if b == 0 {
                self.skipped += t;
            }
        }
    }
}

fn conv_geom(shape: &MacShape) -> ConvGeom {
    match *shape {
        MacShape::Conv2d {
            c_in,
            c_out,
            kernel,
            padding,
            stride,
            h_in,
            w_in,
        } => {
            let (ho, wo) = shape.output_hw();
            ConvGeom {
                c_in,
                c_out,
                k: kernel,
                pad: padding,
                stride,
                h: h_in,
                w: w_in,
                ho,
                wo,
            }
        }
        MacShape::Linear { .. } => unreachable!("linear layer has no conv geometry"),
    }
}

fn he_init(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn tiny(spec: &str, dims: &[usize], classes: usize) -> Model {
        Model::from_spec(spec, dims, classes, 5).unwrap()
    }

    #[test]
    fn parse_default_desk_model() {
        let m = tiny("conv:16,relu,maxpool,conv:32,relu,maxpool,linear:10", &[1, 28, 28], 10);
        assert_eq!(m.layers.len(), 8);
        assert_eq!(m.layers[6].in_dims, vec![32, 7, 7]);
        assert_eq!(m.mac_layers(), vec![0, 3, 6]);
        assert_eq!(m.weight_keys().unwrap(), vec![(0, 4), (3, 32), (6, 392 * 3)]);
        assert_eq!(m.activation_keys(128).unwrap(), vec![(0, 32), (3, 128), (6, 392 * 32)]);
        assert!(Model::from_spec("conv:8,frob", &[1, 8, 8], 10, 0).is_err());
        assert!(Model::from_spec("linear:3", &[4], 10, 0).is_err());
    }

    #[test]
    fn all_8bit_forward_close_to_full_precision() {
        let m = tiny("conv:8,relu,maxpool,linear:5", &[2, 8, 8], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_vec(&mut rng, 6 * 128, 1.0);
        let labels = [0, 1, 2, 3, 4, 0];
        let (fp, _) = m.forward(&x, &labels, &QuantContext::bypass(), true).unwrap();
        let (q, _) = m.forward(&x, &labels, &QuantContext::static_uniform(8), true).unwrap();
        let dev = fp.logits.iter().zip(&q.logits).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = fp.logits.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(dev < 0.05 * scale, "max deviation {dev} vs scale {scale}");
        assert!(dev > 0.0);
    }

    #[test]
    fn exact_grid_points_give_exact_logits() {
        // values below 2^e on the 8-bit grid survive quantization unchanged
        let descs = [LayerDescriptor::linear(4, 4), LayerDescriptor::softmax_xent()];
        let mut m = Model::new(&descs, &[4], 0).unwrap();
        m.layers[0].params[0] = vec![
            0.75, 0.0, 0.0, 0.0, //
            0.0, 0.5, 0.0, 0.0, //
            0.0, 0.0, -0.25, 0.0, //
            0.0, 0.0, 0.0, 0.75,
        ];
        let x = vec![0.5, -0.25, 0.625, 0.125, 0.75, 0.5, -0.5, 0.0];
        let labels = [0u8, 3];
        let (fp, _) = m.forward(&x, &labels, &QuantContext::bypass(), true).unwrap();
        let (q, _) = m.forward(&x, &labels, &QuantContext::static_uniform(8), true).unwrap();
        assert_eq!(fp.logits, q.logits);
    }

    #[test]
    fn zero_bit_weight_entry_is_absent() {
        let descs = [LayerDescriptor::linear(8, 4), LayerDescriptor::softmax_xent()];
        let m = Model::new(&descs, &[8], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_vec(&mut rng, 16, 1.0);
        let labels = [1u8, 2];
        let keys = m.weight_keys().unwrap();
        let mut wmap = BitWidthMap::uniform(DataRole::Weight, &keys, 8.0);
        wmap.tensors[0].executable = vec![8, 0];
        let amap = BitWidthMap::uniform(DataRole::Activation, &m.activation_keys(2).unwrap(), 8.0);
        let ctx = QuantContext {
            mode: QuantMode::Dynamic,
            weight_map: Some(&wmap),
            activation_map: Some(&amap),
            map_batch: 2,
            ..QuantContext::bypass()
        };
        let (q, _) = m.forward(&x, &labels, &ctx, true).unwrap();

        // reference: drop input channels 4..8 for every output
        let mut m2 = m.clone();
        for o in 0..4 {
            for i in 4..8 {
                m2.layers[0].params[0][o * 8 + i] = 0.0;
            }
        }
        let (r, _) = m2.forward(&x, &labels, &QuantContext::static_uniform(8), true).unwrap();
        assert_eq!(q.logits, r.logits);
    }

    #[test]
    fn zero_loss_gradient_gives_zero_sensitivity() {
        let m = tiny("conv:4,relu,linear:3", &[1, 4, 4], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_vec(&mut rng, 2 * 16, 1.0);
        let ctx = QuantContext {
            collect_sensitivity: true,
            map_batch: 2,
            ..QuantContext::static_uniform(8)
        };
        let (_, mut cache) = m.forward(&x, &[0, 1], &ctx, true).unwrap();
        cache.dlogits.iter_mut().for_each(|v| *v = 0.0);
        let g = m.backward(&cache, &ctx).unwrap();
        for p in g.params.iter().flatten() {
            assert!(p.iter().all(|&v| v == 0.0));
        }
        for s in g.weight_sens.iter().chain(&g.activation_sens) {
            assert!(s.s.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn audit_one_static_one_dynamic_per_mac() {
        let m = tiny("conv:4,relu,maxpool,linear:3", &[2, 6, 6], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_vec(&mut rng, 3 * 72, 1.0);
        let ctx = QuantContext {
            collect_sensitivity: true,
            map_batch: 3,
            ..QuantContext::static_uniform(4)
        };
        let (_, cache) = m.forward(&x, &[0, 1, 2], &ctx, true).unwrap();
        let g = m.backward(&cache, &ctx).unwrap();
        let per_stage = m.macs_per_stage(3);
        for stage in Stage::ALL {
            assert_eq!(g.audit.stage_macs(stage), per_stage, "{stage:?}");
        }
        assert_eq!(g.audit.violations, 0);
        assert_eq!(g.audit.bypassed, 0);
    }

    #[test]
    fn weight_gradient_direction_at_8_bits() {
        let m = tiny("conv:8,relu,maxpool,conv:8,relu,linear:4", &[1, 8, 8], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_vec(&mut rng, 8 * 64, 1.0);
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        let run = |ctx: &QuantContext<'_>| {
            let (_, c) = m.forward(&x, &labels, ctx, true).unwrap();
            m.backward(&c, ctx).unwrap()
        };
        let fp = run(&QuantContext::bypass());
        let q = run(&QuantContext::static_uniform(8));
        for &li in &m.mac_layers() {
            let (a, b) = (&fp.params[li][0], &q.params[li][0]);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(dot / (na * nb) > 0.99, "layer {li}: cos {}", dot / (na * nb));
        }
    }

    #[test]
    fn partial_batch_activation_sensitivity_keyed_to_full_map() {
        let m = tiny("linear:8,relu,linear:3", &[6], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_vec(&mut rng, 5 * 6, 1.0);
        let keys = m.activation_keys(8).unwrap();
        let wmap = BitWidthMap::uniform(DataRole::Weight, &m.weight_keys().unwrap(), 4.0);
        let amap = BitWidthMap::uniform(DataRole::Activation, &keys, 4.0);
        let ctx = QuantContext {
            mode: QuantMode::Dynamic,
            weight_map: Some(&wmap),
            activation_map: Some(&amap),
            map_batch: 8,
            collect_sensitivity: true,
            ..QuantContext::bypass()
        };
        let (_, c) = m.forward(&x, &[0, 1, 2, 0, 1], &ctx, true).unwrap();
        let g = m.backward(&c, &ctx).unwrap();
        for (s, &(layer, n)) in g.activation_sens.iter().zip(&keys) {
            assert_eq!(s.layer, layer);
            assert_eq!(s.s.len(), n);
        }
        // a 5-sample batch touches column blocks 0 and 1 only
        assert!(g.activation_sens[0].t.iter().any(|&t| t > 0.0));
    }
}
