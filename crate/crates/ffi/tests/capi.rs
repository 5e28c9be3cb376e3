use std::ffi::{c_char, CString};
use std::ptr;

use blockprec_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { bp_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n >= 1);
    let bytes: Vec<u8> = buf.iter().take_while(|&&c| c != 0).map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn tensor_round_trip() {
    let shape = [8usize, 4];
    let values: Vec<f64> = (0..32).map(|i| (i as f64 - 16.0) / 20.0).collect();
    let mut t: *mut BpTensor = ptr::null_mut();
    let st = unsafe { bp_tensor_quantize(values.as_ptr(), shape.as_ptr(), 2, 0, ptr::null(), 0, 8, &mut t) };
    assert_eq!(st, BpStatus::Ok);
    assert_eq!(unsafe { bp_tensor_len(t) }, 32);
    assert_eq!(unsafe { bp_tensor_entries(t) }, 2);
    let mut back = vec![0.0; 32];
    assert_eq!(unsafe { bp_tensor_dequantize(t, back.as_mut_ptr(), 32) }, BpStatus::Ok);
    for (a, b) in values.iter().zip(&back) {
        assert!((a - b).abs() <= 1.0 / 128.0, "{a} {b}");
    }
    assert_eq!(unsafe { bp_tensor_dequantize(t, back.as_mut_ptr(), 31) }, BpStatus::Config);

    let dir = tempfile::tempdir().unwrap();
    let p = CString::new(dir.path().join("t.bfp").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { bp_tensor_dump(t, p.as_ptr()) }, BpStatus::Ok);
    assert!(dir.path().join("t.bfp").metadata().unwrap().len() > 0);
    unsafe { bp_tensor_free(t) };
    unsafe { bp_tensor_free(ptr::null_mut()) };
}

#[test]
fn per_entry_bits_and_errors() {
    let shape = [8usize, 4];
    let values = vec![0.3; 32];
    let bits = [0u8, 8];
    let mut t: *mut BpTensor = ptr::null_mut();
    let st = unsafe { bp_tensor_quantize(values.as_ptr(), shape.as_ptr(), 2, 0, bits.as_ptr(), 2, 0, &mut t) };
    assert_eq!(st, BpStatus::Ok);
    let mut back = vec![1.0; 32];
    unsafe { bp_tensor_dequantize(t, back.as_mut_ptr(), 32) };
    assert_eq!(back.iter().filter(|&&v| v == 0.0).count(), 16);
    unsafe { bp_tensor_free(t) };

    let st = unsafe { bp_tensor_quantize(values.as_ptr(), shape.as_ptr(), 2, 0, bits.as_ptr(), 1, 0, &mut t) };
    assert_eq!(st, BpStatus::Config);
    assert!(last_error().contains("entries"), "{}", last_error());
    let st = unsafe { bp_tensor_quantize(values.as_ptr(), shape.as_ptr(), 2, 9, ptr::null(), 0, 4, &mut t) };
    assert_eq!(st, BpStatus::Config);
    let st = unsafe { bp_tensor_quantize(ptr::null(), shape.as_ptr(), 2, 0, ptr::null(), 0, 4, &mut t) };
    assert_eq!(st, BpStatus::NullPointer);
    let bad = [f64::NAN; 32];
    let st = unsafe { bp_tensor_quantize(bad.as_ptr(), shape.as_ptr(), 2, 0, ptr::null(), 0, 4, &mut t) };
    assert_eq!(st, BpStatus::Numeric);
}

#[test]
fn pure_functions() {
    let mut v = 0.0;
    assert_eq!(unsafe { bp_relative_sensitivity(16.0, 1.0, &mut v) }, BpStatus::Ok);
    assert_eq!(v, 2.0);
    unsafe { bp_relative_sensitivity(0.0, 1.0, &mut v) };
    assert_eq!(v, f64::NEG_INFINITY);

    let r = [0.0, 2.0, 4.0, 6.0];
    unsafe { bp_initial_lambda(r.as_ptr(), 4, 3.0, &mut v) };
    assert_eq!(v, 0.0);
    unsafe { bp_tune_lambda(0.0, r.as_ptr(), 4, 3.0, 3, 8.0, &mut v) };
    assert_eq!(v, 0.0);
    assert_eq!(unsafe { bp_tune_lambda(0.0, r.as_ptr(), 4, 9.0, 3, 8.0, &mut v) }, BpStatus::Config);
    unsafe { bp_lambda_bisection(r.as_ptr(), ptr::null(), 4, 3.0, 8.0, &mut v) };
    assert!(v.abs() < 1e-9);

    let mut b = [0.0; 4];
    unsafe { bp_bitwidths_from_lambda(r.as_ptr(), 4, 1.0, 4.0, b.as_mut_ptr()) };
    assert_eq!(b, [0.0, 1.0, 3.0, 4.0]);
    let mut e = [0u8; 4];
    unsafe { bp_round_map([0.9, 3.0, 5.2, 8.0].as_ptr(), 4, 8.0, e.as_mut_ptr()) };
    assert_eq!(e, [0, 4, 6, 8]);

    let mut m = [0u8; 2];
    assert_eq!(
        unsafe { bp_exact_micp([1.0, 1.0].as_ptr(), [1.0, 1.0].as_ptr(), 2, 2.0, 8, 0, m.as_mut_ptr()) },
        BpStatus::Ok
    );
    assert_eq!(m, [2, 2]);
    assert_eq!(
        unsafe { bp_exact_micp([1.0].as_ptr(), [1.0].as_ptr(), 1, -1.0, 8, 0, m.as_mut_ptr()) },
        BpStatus::Config
    );
    assert_eq!(unsafe { bp_initial_lambda(r.as_ptr(), 4, 3.0, ptr::null_mut()) }, BpStatus::NullPointer);
}

#[test]
fn trainer_runs_epochs() {
    let cfg = CString::new(
        "model = \"conv:4,relu,maxpool,linear:10\"\nepochs = 2\n[dataset]\nid = \"synthetic\"\nsynthetic_train = 128\nsynthetic_val = 64\n[schedule]\nbatch_size = 32\n",
    )
    .unwrap();
    let mut t: *mut BpTrainer = ptr::null_mut();
    assert_eq!(unsafe { bp_trainer_new_from_config(cfg.as_ptr(), &mut t) }, BpStatus::Ok);
    let mut m = BpEpochMetrics::default();
    assert_eq!(unsafe { bp_trainer_train_epoch(t, &mut m) }, BpStatus::Ok);
    assert_eq!(m.epoch, 1);
    assert_eq!(m.avg_bw_w, 4.0);
    assert!(m.train_loss.is_finite() && m.macbits > 0.0);
    assert_eq!(unsafe { bp_trainer_train_epoch(t, &mut m) }, BpStatus::Ok);
    assert_eq!(m.epoch, 2);
    assert!(m.lambda_w.is_finite());
    unsafe { bp_trainer_free(t) };

    let bad = CString::new("mode = \"turbo\"").unwrap();
    assert_eq!(unsafe { bp_trainer_new_from_config(bad.as_ptr(), &mut t) }, BpStatus::Config);
    assert!(last_error().contains("turbo"));
    assert_eq!(unsafe { bp_trainer_train_epoch(ptr::null_mut(), &mut m) }, BpStatus::NullPointer);
}

#[test]
fn header_is_valid_c() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/blockprec.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["bp_tensor_quantize", "bp_trainer_train_epoch", "bp_last_error_message", "BP_STATUS_NULL_POINTER"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let status = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status();
    if let Ok(s) = status {
        assert!(s.success(), "header does not compile");
    }
}
