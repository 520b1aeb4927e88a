use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use scorpio::attacks::{quad_attack, AttackObjective, FdScheme, ObjectiveKind, QuadAttackConfig};
use scorpio::autodiff::Tensor;
use scorpio::lp_geometry::{AttackBudget, Norm};
use scorpio::models::{LabeledBatch, Model};
use scorpio_ffi::*;

fn tanh_model(widths: &[usize], seed: u64) -> *mut ScorpioModel {
    let mut m = ptr::null_mut();
    let st = unsafe { scorpio_model_init_mlp(widths.as_ptr(), widths.len(), ScorpioActivation::Tanh, seed, &mut m) };
    assert_eq!(st, ScorpioStatus::Ok);
    m
}

fn last_error() -> String {
    let p = scorpio_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn params(p: f64, eps: f64, steps: usize) -> ScorpioAttackParams {
    ScorpioAttackParams {
        p,
        eps,
        steps,
        objective: ScorpioObjective::Ul,
        scheme: ScorpioFdScheme::Forward,
        fd_step: 1.15,
        clamp: 0,
        clamp_lo: 0.0,
        clamp_hi: 1.0,
        seed: 0,
    }
}

#[test]
fn oracle_attains_the_dual_norm_bound() {
    let g = [0.3, -1.2, 0.0, 2.5, -0.7];
    for p in [1.0, 1.5, 2.0, 3.0, f64::INFINITY] {
        let mut s = [0.0; 5];
        let mut deg = -1;
        let st = unsafe { scorpio_fw_oracle(g.as_ptr(), 5, p, 0.8, s.as_mut_ptr(), &mut deg) };
        assert_eq!(st, ScorpioStatus::Ok);
        assert_eq!(deg, 0);
        let q = if p == 1.0 { f64::INFINITY } else if p.is_infinite() { 1.0 } else { p / (p - 1.0) };
        let gq = if q.is_infinite() {
            g.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        } else {
            g.iter().map(|v| v.abs().powf(q)).sum::<f64>().powf(1.0 / q)
        };
        let dot: f64 = s.iter().zip(&g).map(|(a, b)| a * b).sum();
        assert!((dot - 0.8 * gq).abs() < 1e-9, "p={p}: {dot} vs {}", 0.8 * gq);
    }
    let mut s = [1.0; 3];
    let mut deg = 0;
    let st = unsafe { scorpio_fw_oracle([0.0; 3].as_ptr(), 3, 2.0, 1.0, s.as_mut_ptr(), &mut deg) };
    assert_eq!(st, ScorpioStatus::Ok);
    assert_eq!((s, deg), ([0.0; 3], 1));
}

#[test]
fn errors_carry_codes_and_messages() {
    let st = unsafe { scorpio_fw_oracle([1.0].as_ptr(), 1, 0.5, 1.0, [0.0].as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, ScorpioStatus::InvalidArgument);
    assert!(last_error().contains("norm order"));

    let st = unsafe { scorpio_fw_oracle(ptr::null(), 2, 2.0, 1.0, [0.0; 2].as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, ScorpioStatus::NullPointer);

    let st = unsafe { scorpio_model_logits(ptr::null(), ptr::null(), 0, ptr::null_mut(), 0) };
    assert_eq!(st, ScorpioStatus::NullPointer);

    let m = tanh_model(&[3, 4, 2], 1);
    let x = [0.1f32; 3];
    let mut out = [0.0f32; 3];
    let st = unsafe { scorpio_model_logits(m, x.as_ptr(), 1, out.as_mut_ptr(), 3) };
    assert_eq!(st, ScorpioStatus::InvalidArgument);
    let st = unsafe { scorpio_model_logits(m, x.as_ptr(), 1, out.as_mut_ptr(), 2) };
    assert_eq!(st, ScorpioStatus::Ok);
    assert!(scorpio_last_error().is_null());

    let y = [5u32];
    let st = unsafe { scorpio_model_input_grad(m, x.as_ptr(), y.as_ptr(), 1, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, ScorpioStatus::InvalidArgument);
    assert!(last_error().contains("out of range"));

    let p = params(1.5, 1.0, 3);
    let st = unsafe { scorpio_attack_pgd(m, x.as_ptr(), [0u32].as_ptr(), 1, &p, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, ScorpioStatus::UnsupportedNorm);

    let missing = CString::new("/nonexistent/model.scrp").unwrap();
    let mut h = ptr::null_mut();
    let st = unsafe { scorpio_model_load(missing.as_ptr(), &mut h) };
    assert_ne!(st, ScorpioStatus::Ok);
    assert!(h.is_null());
    unsafe { scorpio_model_free(m) };
    unsafe { scorpio_model_free(ptr::null_mut()) };
}

#[test]
fn quad_attack_matches_the_library_and_saves_round_trip() {
    let m = tanh_model(&[4, 8, 3], 9);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.scrp").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { scorpio_model_save(m, path.as_ptr()) }, ScorpioStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { scorpio_model_load(path.as_ptr(), &mut loaded) }, ScorpioStatus::Ok);

    let x: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin() * 0.5 + 0.5).collect();
    let y = [0u32, 1, 2];
    let p = params(1.5, 0.6, 3);
    let mut delta = vec![0.0f32; 12];
    let mut pred = [9u32; 3];
    let st = unsafe { scorpio_attack_quad(loaded, x.as_ptr(), y.as_ptr(), 3, &p, delta.as_mut_ptr(), pred.as_mut_ptr()) };
    assert_eq!(st, ScorpioStatus::Ok);

    let model = Model::<f32>::load(Path::new(path.to_str().unwrap())).unwrap();
    let batch = LabeledBatch::new(Tensor::new(vec![3, 4], x.clone()).unwrap(), vec![0, 1, 2]).unwrap();
    let cfg = QuadAttackConfig::new(AttackBudget::unclamped(Norm::Lp(1.5), 0.6).unwrap(), 3, FdScheme::Fe, 1.15).unwrap();
    let r = quad_attack(&model, &batch, &AttackObjective::untargeted(ObjectiveKind::Ul), &cfg).unwrap();
    assert_eq!(delta, r.delta.data());
    assert_eq!(pred.map(|p| p as usize).to_vec(), r.pred);

    let mut grad = vec![0.0f32; 12];
    let mut loss = [0.0f32; 3];
    let st = unsafe { scorpio_model_input_grad(m, x.as_ptr(), y.as_ptr(), 3, loss.as_mut_ptr(), grad.as_mut_ptr()) };
    assert_eq!(st, ScorpioStatus::Ok);
    let (l, g) = model.loss_and_input_grad(&batch.x, &batch.y).unwrap();
    assert_eq!(loss.to_vec(), l);
    assert_eq!(grad, g.data());
    unsafe {
        scorpio_model_free(m);
        scorpio_model_free(loaded);
    }
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

/// The directory holding the cdylib: `target/<profile>/`, one level above `deps/`.
fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = crate_dir().join("include/scorpio.h");
    assert!(header.exists(), "build script did not write {}", header.display());
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let out = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(&header)
            .output()
            .expect("running the C compiler");
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn c_program_links_and_runs() {
    let lib = lib_dir();
    assert!(lib.join("libscorpio_ffi.so").exists(), "no cdylib in {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror"])
        .arg(crate_dir().join("tests/c_smoke.c"))
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg("-L")
        .arg(&lib)
        .args(["-lscorpio_ffi", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).env("LD_LIBRARY_PATH", &lib).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
