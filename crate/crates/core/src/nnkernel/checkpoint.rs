//! Versioned binary checkpoint: `BPCK`, u32 version, u64 metadata length,
//! JSON metadata, then every parameter, buffer and momentum array as
//! little-endian f64 in layer order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Layer, LayerDescriptor, Model, TrainState};
use crate::bwmap::{BitWidthMap, QuantCoeffState};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BPCK";

#[derive(Serialize, Deserialize)]
struct LayerMeta {
    desc: LayerDescriptor,
    in_dims: Vec<usize>,
    out_dims: Vec<usize>,
    params: Vec<usize>,
    buffers: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    step: u64,
    seed: u64,
    batch_size: usize,
    input_dims: Vec<usize>,
    classes: usize,
    layers: Vec<LayerMeta>,
    weight_map: BitWidthMap,
    activation_map: BitWidthMap,
    weight_coeff: QuantCoeffState,
    activation_coeff: QuantCoeffState,
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let meta = Meta {
        epoch: state.epoch,
        step: state.step,
        seed: state.seed,
        batch_size: state.batch_size,
        input_dims: state.model.input_dims.clone(),
        classes: state.model.classes,
        layers: state
            .model
            .layers
            .iter()
            .map(|l| LayerMeta {
                desc: l.desc,
                in_dims: l.in_dims.clone(),
                out_dims: l.out_dims.clone(),
                params: l.params.iter().map(Vec::len).collect(),
                buffers: l.buffers.iter().map(Vec::len).collect(),
            })
            .collect(),
        weight_map: state.weight_map.clone(),
        activation_map: state.activation_map.clone(),
        weight_coeff: state.weight_coeff,
        activation_coeff: state.activation_coeff,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::internal(format!("checkpoint metadata: {e}")))?;
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (layer, vel) in state.model.layers.iter().zip(&state.velocity) {
        for arr in layer.params.iter().chain(&layer.buffers).chain(vel) {
            for v in arr {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

struct Cursor<R> {
    inner: R,
    offset: u64,
    path: PathBuf,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            path: self.path.clone(),
            offset: self.offset,
            message: format!("truncated while reading {what}"),
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes::<8>("array data")?))).collect()
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.offset,
            message: message.into(),
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        inner: BufReader::new(file),
        offset: 0,
        path: path.to_path_buf(),
    };
    if &c.bytes::<4>("magic")? != MAGIC {
        return Err(c.fail("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(c.bytes("version")?);
    if version != CHECKPOINT_VERSION {
        return Err(c.fail(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(c.bytes("metadata length")?);
    let mut json = vec![0u8; len as usize];
    c.inner
        .read_exact(&mut json)
        .map_err(|_| c.fail(format!("truncated metadata, expected {len} bytes")))?;
    c.offset += len;
    let meta: Meta = serde_json::from_slice(&json).map_err(|e| c.fail(format!("bad metadata: {e}")))?;

    let mut layers = Vec::with_capacity(meta.layers.len());
    let mut velocity = Vec::with_capacity(meta.layers.len());
    for lm in meta.layers {
        let params = lm.params.iter().map(|&n| c.f64s(n)).collect::<Result<Vec<_>>>()?;
        let buffers = lm.buffers.iter().map(|&n| c.f64s(n)).collect::<Result<Vec<_>>>()?;
        velocity.push(lm.params.iter().map(|&n| c.f64s(n)).collect::<Result<Vec<_>>>()?);
        layers.push(Layer {
            desc: lm.desc,
            in_dims: lm.in_dims,
            out_dims: lm.out_dims,
            params,
            buffers,
        });
    }
    let mut rest = [0u8; 1];
    if c.inner.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(c.fail("trailing bytes after checkpoint data"));
    }

    // re-derive shapes from the descriptors to reject inconsistent files
    let descs: Vec<LayerDescriptor> = layers.iter().map(|l| l.desc).collect();
    let fresh = Model::new(&descs, &meta.input_dims, 0)?;
    for (a, b) in fresh.layers.iter().zip(&layers) {
        let lens = |l: &Layer| (l.params.iter().map(Vec::len).collect::<Vec<_>>(), l.out_dims.clone());
        if lens(a) != lens(b) {
            return Err(c.fail("layer shapes inconsistent with descriptors"));
        }
    }
    Ok(TrainState {
        model: Model {
            layers,
            input_dims: meta.input_dims,
            classes: meta.classes,
        },
        velocity,
        weight_map: meta.weight_map,
        activation_map: meta.activation_map,
        weight_coeff: meta.weight_coeff,
        activation_coeff: meta.activation_coeff,
        epoch: meta.epoch,
        step: meta.step,
        seed: meta.seed,
        batch_size: meta.batch_size,
    })
}
