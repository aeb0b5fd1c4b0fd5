use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use coreface::eval::{self, Pair, PairList};
use coreface::losses;
use coreface::margin::{ema_update, MarginState};
use coreface::numerics::{EmbeddingBatch, Mat};
use coreface::pairing::{build_plan, Protocol, ScmMode};
use coreface_ffi::*;

fn last_error() -> String {
    let p = cf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn unit_rows(rows: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut v: Vec<f64> = (0..rows * dim)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    for r in v.chunks_mut(dim) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
    v
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(cf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn coreface_loss_matches_library() {
    let (n, d) = (6, 4);
    let e = unit_rows(2 * n, d, 3);
    let labels: Vec<u32> = vec![0, 0, 1, 1, 2, 3];
    let mut value = 0.0;
    let mut grad = vec![0.0; 2 * n * d];
    let code = unsafe {
        cf_coreface_loss(
            e.as_ptr(),
            n,
            d,
            labels.as_ptr(),
            CF_PROTOCOL_D_2N,
            CF_SCM_EXCLUDE,
            0.1,
            8.0,
            &mut value,
            grad.as_mut_ptr(),
        )
    };
    assert_eq!(code, CF_OK);

    let l: Vec<usize> = labels.iter().map(|&x| x as usize).collect();
    let batch = EmbeddingBatch::paired(Mat::from_vec(2 * n, d, e.clone()).unwrap(), &l).unwrap();
    let plan = build_plan(n, &l, Protocol::D_2N, ScmMode::Exclude).unwrap();
    let r = losses::coreface_loss(&batch, &plan, 0.1, 8.0).unwrap();
    assert_eq!(value.to_bits(), r.value.to_bits());
    assert_eq!(grad, r.grad_embeddings.as_slice());

    // gradient output is optional
    let mut v2 = 0.0;
    let code = unsafe {
        cf_coreface_loss(e.as_ptr(), n, d, labels.as_ptr(), CF_PROTOCOL_D_2N, CF_SCM_EXCLUDE, 0.1, 8.0, &mut v2, ptr::null_mut())
    };
    assert_eq!(code, CF_OK);
    assert_eq!(v2.to_bits(), value.to_bits());
}

#[test]
fn ntxent_worked_example() {
    // two images, views identical, images orthogonal
    let e = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
    let mut v = 0.0;
    let code = unsafe { cf_ntxent_loss(e.as_ptr(), 2, 2, 1.0, &mut v, ptr::null_mut()) };
    assert_eq!(code, CF_OK);
    let e1 = std::f64::consts::E;
    assert!((v + (e1 / (e1 + 2.0)).ln()).abs() < 1e-12);
}

#[test]
fn supcon_and_classification_run() {
    let (n, d, c) = (4, 3, 3);
    let e = unit_rows(2 * n, d, 9);
    let labels = [0u32, 0, 1, 2];
    let mut v = f64::NAN;
    assert_eq!(unsafe { cf_supcon_loss(e.as_ptr(), n, d, labels.as_ptr(), 0.1, &mut v, ptr::null_mut()) }, CF_OK);
    assert!(v.is_finite() && v > 0.0);

    let w = unit_rows(d, c, 4);
    let mut g = vec![0.0; 2 * n * d];
    let mut gw = vec![0.0; d * c];
    let rows_labels = [0u32, 0, 1, 2, 0, 0, 1, 2];
    for head in [CF_HEAD_SOFTMAX, CF_HEAD_COSFACE, CF_HEAD_ARCFACE] {
        let code = unsafe {
            cf_classification_loss(
                e.as_ptr(),
                2 * n,
                d,
                rows_labels.as_ptr(),
                w.as_ptr(),
                c,
                head,
                16.0,
                0.3,
                &mut v,
                g.as_mut_ptr(),
                gw.as_mut_ptr(),
            )
        };
        assert_eq!(code, CF_OK, "{}", last_error());
        assert!(v.is_finite());
    }
    assert!(gw.iter().any(|&x| x != 0.0));
    let code = unsafe {
        cf_classification_loss(e.as_ptr(), 2 * n, d, rows_labels.as_ptr(), w.as_ptr(), c, 7, 16.0, 0.3, &mut v, ptr::null_mut(), ptr::null_mut())
    };
    assert_eq!(code, CF_ERR_INVALID);
}

#[test]
fn margin_state_follows_ema() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { cf_margin_new(0.9, &mut h) }, CF_OK);
    let mut reference = MarginState::new(0.9);
    for k in 0..50 {
        let m = (k as f64 * 0.37).sin();
        assert_eq!(unsafe { cf_margin_update(h, m) }, CF_OK);
        reference = ema_update(reference, m).unwrap();
    }
    let (mut v, mut steps) = (0.0, 0u64);
    unsafe {
        assert_eq!(cf_margin_value(h, &mut v), CF_OK);
        assert_eq!(cf_margin_steps(h, &mut steps), CF_OK);
    }
    assert_eq!(v.to_bits(), reference.m_c.to_bits());
    assert_eq!(steps, 50);
    assert_eq!(unsafe { cf_margin_update(h, f64::NAN) }, CF_ERR_NUMERIC);
    unsafe { cf_margin_free(h) };
    unsafe { cf_margin_free(ptr::null_mut()) };

    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { cf_margin_new(1.5, &mut bad) }, CF_ERR_INVALID);
    assert!(bad.is_null());
}

#[test]
fn batch_margin_of_identical_views() {
    // views agree exactly; the two images are orthogonal, so margin is 1 - 0
    let e = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
    let labels = [0u32, 1];
    let mut m = 0.0;
    let code = unsafe { cf_batch_margin(e.as_ptr(), 2, 2, labels.as_ptr(), CF_PROTOCOL_S_N, CF_SCM_EXCLUDE, &mut m) };
    assert_eq!(code, CF_OK, "{}", last_error());
    assert!((m - 1.0).abs() < 1e-15);
}

#[test]
fn errors_are_reported() {
    let mut v = 0.0;
    let code = unsafe { cf_ntxent_loss(ptr::null(), 2, 2, 1.0, &mut v, ptr::null_mut()) };
    assert_eq!(code, CF_ERR_NULL);
    assert!(last_error().contains("embeddings"));

    let e = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
    let labels = [0u32, 0];
    let code = unsafe { cf_coreface_loss(e.as_ptr(), 2, 2, labels.as_ptr(), 9, CF_SCM_OFF, 0.0, 1.0, &mut v, ptr::null_mut()) };
    assert_eq!(code, CF_ERR_INVALID);

    // every candidate negative is masked out
    let code = unsafe {
        cf_coreface_loss(e.as_ptr(), 2, 2, labels.as_ptr(), CF_PROTOCOL_S_N, CF_SCM_EXCLUDE, 0.0, 1.0, &mut v, ptr::null_mut())
    };
    assert_eq!(code, CF_ERR_DEGENERATE);
}

#[test]
fn verification_and_tar() {
    let sims = [0.9, 0.8, 0.7, 0.2, 0.1, 0.3, 0.85, 0.15];
    let same = [1u8, 1, 1, 0, 0, 0, 1, 0];
    let fold = [0u32, 1, 0, 1, 0, 1, 1, 0];
    let mut acc = 0.0;
    assert_eq!(unsafe { cf_verification_accuracy(sims.as_ptr(), same.as_ptr(), fold.as_ptr(), 8, 2, &mut acc) }, CF_OK);
    let reference = eval::verification_accuracy(
        &sims,
        &PairList {
            pairs: (0..8).map(|i| Pair { a: 0, b: 0, same: same[i] == 1, fold: fold[i] as usize }).collect(),
            folds: 2,
        },
    )
    .unwrap();
    assert_eq!(acc, reference);
    assert_eq!(
        unsafe { cf_verification_accuracy(sims.as_ptr(), same.as_ptr(), fold.as_ptr(), 8, 1, &mut acc) },
        CF_ERR_INVALID
    );

    let pos = [0.9, 0.8, 0.5, 0.4];
    let neg: Vec<f64> = (0..10).map(|i| i as f64 / 20.0).collect();
    let (mut tar, mut thr) = (0.0, 0.0);
    assert_eq!(unsafe { cf_tar_at_far(pos.as_ptr(), 4, neg.as_ptr(), 10, 0.1, &mut tar, &mut thr) }, CF_OK);
    assert_eq!(thr, 0.4);
    assert_eq!(tar, 0.75);
    assert_eq!(unsafe { cf_tar_at_far(pos.as_ptr(), 4, neg.as_ptr(), 10, 0.05, &mut tar, ptr::null_mut()) }, CF_ERR_DEGENERATE);
}

#[test]
fn rank1_identification() {
    let gallery = [1.0, 0.0, 0.0, 1.0];
    let gl = [5u32, 7];
    let probe = [0.9, 0.1, 0.2, 0.8, 0.6, 0.4];
    let pl = [5u32, 7, 7];
    let mut r = 0.0;
    assert_eq!(unsafe { cf_rank1(gallery.as_ptr(), gl.as_ptr(), 2, probe.as_ptr(), pl.as_ptr(), 3, 2, &mut r) }, CF_OK);
    assert!((r - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(unsafe { cf_rank1(gallery.as_ptr(), gl.as_ptr(), 0, probe.as_ptr(), pl.as_ptr(), 3, 2, &mut r) }, CF_ERR_DEGENERATE);
}

#[test]
fn dataset_and_model_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CString::new(r#"{"num_identities": 12, "samples_per_identity": 10, "input_dim": 8, "latent_dim": 4, "nuisance_dim": 2, "eval_fraction": 0.25, "seed": 5}"#).unwrap();
    let (mut train, mut eval) = (ptr::null_mut(), ptr::null_mut());
    assert_eq!(unsafe { cf_dataset_generate(spec.as_ptr(), &mut train, &mut eval) }, CF_OK, "{}", last_error());

    let (mut n, mut d) = (0usize, 0usize);
    assert_eq!(unsafe { cf_dataset_shape(train, &mut n, &mut d) }, CF_OK);
    assert_eq!((n, d), (90, 8));

    let path = CString::new(dir.path().join("train.crds").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cf_dataset_save(train, path.as_ptr()) }, CF_OK);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { cf_dataset_load(path.as_ptr(), &mut loaded) }, CF_OK);
    let mut a = vec![0.0; n * d];
    let mut b = vec![0.0; n * d];
    let mut la = vec![0u32; n];
    let mut lb = vec![0u32; n];
    unsafe {
        assert_eq!(cf_dataset_copy(train, a.as_mut_ptr(), la.as_mut_ptr()), CF_OK);
        assert_eq!(cf_dataset_copy(loaded, b.as_mut_ptr(), lb.as_mut_ptr()), CF_OK);
    }
    assert_eq!(a, b);
    assert_eq!(la, lb);

    let cfg = CString::new(
        r#"{"model": {"hidden": [16], "embed_dim": 8},
            "train": {"batch_size": 12, "identities_per_batch": 4, "epochs": 2, "milestones": []},
            "seed": 1}"#,
    )
    .unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { cf_train(cfg.as_ptr(), train, &mut model) }, CF_OK, "{}", last_error());
    let (mut din, mut dout) = (0usize, 0usize);
    assert_eq!(unsafe { cf_model_dims(model, &mut din, &mut dout) }, CF_OK);
    assert_eq!((din, dout), (8, 8));

    let mut emb = vec![0.0; n * dout];
    assert_eq!(unsafe { cf_model_embed(model, a.as_ptr(), n, emb.as_mut_ptr()) }, CF_OK);
    for r in emb.chunks(dout) {
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    let mpath = CString::new(dir.path().join("model.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cf_model_save(model, mpath.as_ptr()) }, CF_OK);
    let mut reloaded = ptr::null_mut();
    assert_eq!(unsafe { cf_model_load(mpath.as_ptr(), cfg.as_ptr(), &mut reloaded) }, CF_OK, "{}", last_error());
    let mut emb2 = vec![0.0; n * dout];
    assert_eq!(unsafe { cf_model_embed(reloaded, a.as_ptr(), n, emb2.as_mut_ptr()) }, CF_OK);
    let max_diff = emb.iter().zip(&emb2).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(max_diff < 1e-5, "{max_diff}");

    // a dataset file is not a checkpoint
    let mut bogus = ptr::null_mut();
    assert_eq!(unsafe { cf_model_load(path.as_ptr(), cfg.as_ptr(), &mut bogus) }, CF_ERR_FORMAT);
    assert!(bogus.is_null());
    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cf_dataset_load(missing.as_ptr(), &mut bogus.cast()) }, CF_ERR_IO);

    let bad_cfg = CString::new(r#"{"train": {"bogus": 1}}"#).unwrap();
    assert_eq!(unsafe { cf_train(bad_cfg.as_ptr(), train, &mut bogus) }, CF_ERR_INVALID);
    assert!(last_error().contains("train.bogus"));

    unsafe {
        cf_model_free(model);
        cf_model_free(reloaded);
        cf_dataset_free(train);
        cf_dataset_free(eval);
        cf_dataset_free(loaded);
    }
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/coreface.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "cf_version",
        "cf_last_error",
        "cf_coreface_loss",
        "cf_ntxent_loss",
        "cf_supcon_loss",
        "cf_classification_loss",
        "cf_batch_margin",
        "cf_margin_new",
        "cf_margin_update",
        "cf_margin_value",
        "cf_margin_steps",
        "cf_margin_free",
        "cf_verification_accuracy",
        "cf_tar_at_far",
        "cf_rank1",
        "cf_dataset_generate",
        "cf_dataset_load",
        "cf_dataset_save",
        "cf_dataset_shape",
        "cf_dataset_copy",
        "cf_dataset_free",
        "cf_train",
        "cf_model_load",
        "cf_model_save",
        "cf_model_dims",
        "cf_model_embed",
        "cf_model_free",
    ] {
        assert!(text.contains(&format!("{name}(")), "{name} missing from header");
    }
    // syntax-check with the system C compiler when one is installed
    if let Ok(out) = Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
