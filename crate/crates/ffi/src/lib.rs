//! C interface to the blockprec engine.
//!
//! Every function returns a [`BpStatus`]. On failure the message is kept
//! per thread and can be read with [`bp_last_error_message`]. Handles are
//! opaque; free them with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use blockprec::bfp::{self, BfpTensor, Bitwidths, BlockLayout, DataRole};
use blockprec::cli::data::load_dataset;
use blockprec::cli::RunConfig;
use blockprec::nnkernel::{self, Dataset, Model, TrainConfig, TrainState};
use blockprec::oracle::{self, AllocationInstance, AllowedBits};
use blockprec::{bwmap, sens, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BpStatus {
    Ok = 0,
    Config = 1,
    Data = 2,
    Numeric = 3,
    Validation = 4,
    Internal = 5,
    NullPointer = 6,
    Panic = 7,
}

impl From<&Error> for BpStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => BpStatus::Config,
            Error::Format { .. } | Error::Data(_) | Error::Io { .. } => BpStatus::Data,
            Error::Numeric(_) => BpStatus::Numeric,
            Error::Validation(_) => BpStatus::Validation,
            Error::Internal(_) => BpStatus::Internal,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Fail {
    Engine(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Engine(e)
    }
}

type FfiResult<T> = std::result::Result<T, Fail>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> BpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BpStatus::Ok,
        Ok(Err(Fail::Engine(e))) => {
            set_error(e.to_string());
            BpStatus::from(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            BpStatus::NullPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            BpStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, n: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, what: &'static str) -> FfiResult<&'a mut [T]> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn write<T>(p: *mut T, v: T, what: &'static str) -> FfiResult<()> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    p.write(v);
    Ok(())
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Engine(Error::config(format!("{what} is not valid UTF-8"))))
}

/// Copies the last error of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length plus one.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bp_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Quantized tensor handle.
pub struct BpTensor {
    inner: BfpTensor,
}

/// Quantizes `values` of shape `shape[0..ndim]` for data role `role`
/// (0 weight, 1 activation, 2 activation gradient). With `bits` null every
/// block uses `uniform_bits`; otherwise `bits` holds one width per map entry.
///
/// # Safety
/// Pointers must be valid for the lengths implied by `shape`, `ndim` and
/// `n_bits`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_tensor_quantize(
    values: *const f64,
    shape: *const usize,
    ndim: usize,
    role: u8,
    bits: *const u8,
    n_bits: usize,
    uniform_bits: u8,
    out: *mut *mut BpTensor,
) -> BpStatus {
    guard(|| {
        let shape = input(shape, ndim, "shape")?;
        let role = DataRole::from_code(role).ok_or_else(|| Error::config(format!("unknown data role {role}")))?;
        let layout = BlockLayout::new(shape, role)?;
        let values = input(values, layout.len(), "values")?;
        let map;
        let bw = if bits.is_null() {
            Bitwidths::Uniform(uniform_bits)
        } else {
            map = input(bits, n_bits, "bits")?;
            Bitwidths::PerEntry(map)
        };
        let t = bfp::quantize_tensor(values, &layout, bw)?;
        write(out, Box::into_raw(Box::new(BpTensor { inner: t })), "out")
    })
}

/// Element count of the tensor (0 for null).
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bp_tensor_len(t: *const BpTensor) -> usize {
    t.as_ref().map_or(0, |t| t.inner.layout().len())
}

/// Map entries (4×4 tiles) of the tensor (0 for null).
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bp_tensor_entries(t: *const BpTensor) -> usize {
    t.as_ref().map_or(0, |t| t.inner.layout().entries())
}

/// Writes the reconstructed values into `out[0..len]`; `len` must equal
/// [`bp_tensor_len`].
///
/// # Safety
/// `t` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn bp_tensor_dequantize(t: *const BpTensor, out: *mut f64, len: usize) -> BpStatus {
    guard(|| {
        let t = t.as_ref().ok_or(Fail::Null("tensor"))?;
        if len != t.inner.layout().len() {
            return Err(Error::config(format!("output holds {len} values, tensor has {}", t.inner.layout().len())).into());
        }
        output(out, len, "out")?.copy_from_slice(&bfp::dequantize(&t.inner));
        Ok(())
    })
}

/// Writes the binary block dump of the tensor to `path`.
///
/// # Safety
/// `t` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bp_tensor_dump(t: *const BpTensor, path: *const c_char) -> BpStatus {
    guard(|| {
        let t = t.as_ref().ok_or(Fail::Null("tensor"))?;
        let path = text(path, "path")?;
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        t.inner.write_dump(&mut w).map_err(|e| Error::io(path, e))?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))?;
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a handle from [`bp_tensor_quantize`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bp_tensor_free(t: *mut BpTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// `½ log2(S/T)`; `S = 0` writes `-INFINITY`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_relative_sensitivity(s: f64, t: f64, out: *mut f64) -> BpStatus {
    guard(|| write(out, sens::relative_sensitivity(s, t)?, "out"))
}

/// # Safety
/// `r` must hold `n` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_initial_lambda(r: *const f64, n: usize, alpha: f64, out: *mut f64) -> BpStatus {
    guard(|| write(out, bwmap::initial_lambda(input(r, n, "r")?, alpha)?, "out"))
}

/// # Safety
/// `r` must hold `n` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_tune_lambda(
    lambda_in: f64,
    r: *const f64,
    n: usize,
    alpha: f64,
    iterations: usize,
    beta: f64,
    out: *mut f64,
) -> BpStatus {
    guard(|| {
        let opts = bwmap::TuneOptions {
            iterations,
            beta,
            weights: None,
        };
        write(out, bwmap::tune_lambda(lambda_in, input(r, n, "r")?, alpha, opts)?, "out")
    })
}

/// # Safety
/// `r` must hold `n` values and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn bp_bitwidths_from_lambda(
    r: *const f64,
    n: usize,
    lambda: f64,
    beta: f64,
    out: *mut f64,
) -> BpStatus {
    guard(|| {
        let b = bwmap::bitwidths_from_lambda(input(r, n, "r")?, lambda, beta);
        output(out, n, "out")?.copy_from_slice(&b);
        Ok(())
    })
}

/// Rounds smoothed widths to {0,2,4,6,8}.
///
/// # Safety
/// `smoothed` must hold `n` values and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn bp_round_map(smoothed: *const f64, n: usize, beta: f64, out: *mut u8) -> BpStatus {
    guard(|| {
        let b = bwmap::round_map(input(smoothed, n, "smoothed")?, beta);
        output(out, n, "out")?.copy_from_slice(&b);
        Ok(())
    })
}

/// Exact integer allocation. `allowed` is 0 for every integer in [0, β],
/// 1 for {0,2,4,6,8}.
///
/// # Safety
/// `s` and `t` must hold `n` values and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn bp_exact_micp(
    s: *const f64,
    t: *const f64,
    n: usize,
    alpha: f64,
    beta: u8,
    allowed: u8,
    out: *mut u8,
) -> BpStatus {
    guard(|| {
        let allowed = match allowed {
            0 => AllowedBits::Integers,
            1 => AllowedBits::Even,
            a => return Err(Error::config(format!("unknown allowed set {a}")).into()),
        };
        let inst = AllocationInstance {
            s: input(s, n, "s")?.to_vec(),
            t: input(t, n, "t")?.to_vec(),
            alpha,
            beta,
            allowed,
        };
        let b = oracle::exact_micp(&inst)?;
        output(out, n, "out")?.copy_from_slice(&b);
        Ok(())
    })
}

/// `weights` may be null for the unweighted mean.
///
/// # Safety
/// `r` (and `weights` when non-null) must hold `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bp_lambda_bisection(
    r: *const f64,
    weights: *const f64,
    n: usize,
    alpha: f64,
    beta: f64,
    out: *mut f64,
) -> BpStatus {
    guard(|| {
        let w = if weights.is_null() {
            None
        } else {
            Some(input(weights, n, "weights")?)
        };
        write(out, oracle::lambda_bisection(input(r, n, "r")?, w, alpha, beta)?, "out")
    })
}

/// Per-epoch figures; absent values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BpEpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub avg_bw_w: f64,
    pub avg_bw_a: f64,
    pub lambda_w: f64,
    pub lambda_a: f64,
    pub macbits: f64,
}

/// Training session handle.
pub struct BpTrainer {
    state: TrainState,
    cfg: TrainConfig,
    train: Dataset,
    val: Dataset,
}

/// Builds a trainer from config text in the CLI's TOML format. Nothing is
/// written to disk.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bp_trainer_new_from_config(config: *const c_char, out: *mut *mut BpTrainer) -> BpStatus {
    guard(|| {
        let cfg = RunConfig::parse(text(config, "config")?)?;
        let tc = cfg.train_config()?;
        let (train, val) = load_dataset(&cfg.dataset, cfg.seed)?;
        let model = Model::from_spec(&cfg.model, &train.dims, train.classes, cfg.seed)?;
        let state = TrainState::new(model, &tc, cfg.seed)?;
        let t = BpTrainer {
            state,
            cfg: tc,
            train,
            val,
        };
        write(out, Box::into_raw(Box::new(t)), "out")
    })
}

/// Runs one epoch, then regenerates the bit-width maps.
///
/// # Safety
/// `t` must be a live handle and `out` writable (or null to discard).
#[no_mangle]
pub unsafe extern "C" fn bp_trainer_train_epoch(t: *mut BpTrainer, out: *mut BpEpochMetrics) -> BpStatus {
    guard(|| {
        let t = t.as_mut().ok_or(Fail::Null("trainer"))?;
        let (m, _) = nnkernel::train_epoch(&mut t.state, &t.cfg, &t.train, Some(&t.val))?;
        if !out.is_null() {
            out.write(BpEpochMetrics {
                epoch: m.epoch,
                train_loss: m.train_loss,
                val_acc: m.val_acc.unwrap_or(f64::NAN),
                avg_bw_w: m.avg_bw_w,
                avg_bw_a: m.avg_bw_a,
                lambda_w: m.lambda_w.unwrap_or(f64::NAN),
                lambda_a: m.lambda_a.unwrap_or(f64::NAN),
                macbits: m.macbits,
            });
        }
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a handle from [`bp_trainer_new_from_config`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bp_trainer_free(t: *mut BpTrainer) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}
