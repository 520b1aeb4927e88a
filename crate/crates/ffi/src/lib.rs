//! C ABI over the core library.
//!
//! Every function returns a [`ScorpioStatus`]; on failure the message is available from
//! [`scorpio_last_error`] on the same thread. Models are opaque handles owned by the caller
//! and released with [`scorpio_model_free`]. Arrays are row-major `float` buffers whose
//! lengths the caller states explicitly; nothing is written unless the call succeeds.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scorpio::attacks::{pgd, quad_attack, AttackObjective, FdScheme, ObjectiveKind, PgdConfig, QuadAttackConfig};
use scorpio::autodiff::Tensor;
use scorpio::lp_geometry::{fw_oracle, AttackBudget, Norm};
use scorpio::models::{Activation, Architecture, LabeledBatch, Model};
use scorpio::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorpioStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnsupportedNorm = 3,
    ShapeMismatch = 4,
    Io = 5,
    Checkpoint = 6,
    NonFinite = 7,
    Panic = 8,
}

/// Which quantity an attack ascends.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorpioObjective {
    /// Cross-entropy of the true label.
    Ul = 0,
    /// Negative cross-entropy of a random target.
    Tl = 1,
    /// Negative margin of the true label.
    Um = 2,
    /// Margin of a random target.
    Tm = 3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorpioFdScheme {
    Forward = 0,
    Central = 1,
}

/// Hidden-layer nonlinearity for [`scorpio_model_init_mlp`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorpioActivation {
    Relu = 0,
    Tanh = 1,
}

/// Attack settings. `p` is the norm order (`INFINITY` for Linf). When `clamp` is nonzero,
/// adversarial inputs are clipped to `[clamp_lo, clamp_hi]`. `fd_step` and `scheme` apply
/// only to the quadratic attack; `seed` draws targets of targeted objectives.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct ScorpioAttackParams {
    pub p: f64,
    pub eps: f64,
    pub steps: usize,
    pub objective: ScorpioObjective,
    pub scheme: ScorpioFdScheme,
    pub fd_step: f64,
    pub clamp: i32,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub seed: u64,
}

/// Opaque classifier handle.
pub struct ScorpioModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ScorpioStatus {
    match e {
        Error::Shape { .. } => ScorpioStatus::ShapeMismatch,
        Error::UnsupportedNorm { .. } => ScorpioStatus::UnsupportedNorm,
        Error::Config(_) | Error::InvalidArgument(_) => ScorpioStatus::InvalidArgument,
        Error::NonFinite { .. } | Error::Diverged { .. } => ScorpioStatus::NonFinite,
        Error::Checkpoint(_) => ScorpioStatus::Checkpoint,
        Error::Io { .. } | Error::Data(_) | Error::Json(_) => ScorpioStatus::Io,
    }
}

struct Fail(ScorpioStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(ScorpioStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ScorpioStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ScorpioStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            ScorpioStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Fail(ScorpioStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Fail(ScorpioStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn model<'a>(m: *const ScorpioModel) -> Result<&'a Model<f32>, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| Fail(ScorpioStatus::NullPointer, "model is null".into()))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(Fail(ScorpioStatus::NullPointer, "path is null".into()));
    }
    CStr::from_ptr(p).to_str().map(Path::new).map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn batch(m: &Model<f32>, x: *const f32, labels: *const u32, n: usize) -> Result<LabeledBatch<f32>, Fail> {
    let d = m.input_dim();
    let xs = slice(x, n * d, "x")?;
    let ys = slice(labels, n, "labels")?;
    let k = m.num_classes();
    if let Some(bad) = ys.iter().find(|&&y| y as usize >= k) {
        return Err(invalid(format!("label {bad} out of range for {k} classes")));
    }
    let t = Tensor::new(vec![n, d], xs.to_vec())?;
    Ok(LabeledBatch::new(t, ys.iter().map(|&y| y as usize).collect())?)
}

fn budget(p: &ScorpioAttackParams) -> Result<AttackBudget, Fail> {
    let b = AttackBudget {
        norm: Norm::from_p(p.p)?,
        eps: p.eps,
        clamp_box: (p.clamp != 0).then_some((p.clamp_lo, p.clamp_hi)),
    };
    b.validate()?;
    Ok(b)
}

fn objective(p: &ScorpioAttackParams, b: &LabeledBatch<f32>, classes: usize) -> AttackObjective {
    let kind = match p.objective {
        ScorpioObjective::Ul => ObjectiveKind::Ul,
        ScorpioObjective::Tl => ObjectiveKind::Tl,
        ScorpioObjective::Um => ObjectiveKind::Um,
        ScorpioObjective::Tm => ObjectiveKind::Tm,
    };
    AttackObjective::new(kind, &b.y, classes, p.seed, 0)
}

/// NUL-terminated description of the last failure on this thread, or NULL after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn scorpio_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn scorpio_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a model checkpoint written by the `scorpio` tool.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scorpio_model_load(path_: *const c_char, out: *mut *mut ScorpioModel) -> ScorpioStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail(ScorpioStatus::NullPointer, "out is null".into()));
        }
        let inner = Model::load(path(path_)?)?;
        *out = Box::into_raw(Box::new(ScorpioModel { inner }));
        Ok(())
    })
}

/// Randomly initialized fully connected network with layer widths `widths[0..n_widths]`.
///
/// # Safety
/// `widths` must point to `n_widths` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn scorpio_model_init_mlp(
    widths: *const usize,
    n_widths: usize,
    activation: ScorpioActivation,
    seed: u64,
    out: *mut *mut ScorpioModel,
) -> ScorpioStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail(ScorpioStatus::NullPointer, "out is null".into()));
        }
        let w = slice(widths, n_widths, "widths")?;
        let act = match activation {
            ScorpioActivation::Relu => Activation::Relu,
            ScorpioActivation::Tanh => Activation::Tanh,
        };
        let arch = Architecture::mlp(w, act);
        arch.validate()?;
        let inner = Model::init(arch, &mut ChaCha8Rng::seed_from_u64(seed))?;
        *out = Box::into_raw(Box::new(ScorpioModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `m` must be NULL or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn scorpio_model_free(m: *mut ScorpioModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn scorpio_model_save(m: *const ScorpioModel, path_: *const c_char) -> ScorpioStatus {
    guard(|| Ok(model(m)?.save(path(path_)?)?))
}

/// Flattened input length; 0 for a NULL handle.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn scorpio_model_input_dim(m: *const ScorpioModel) -> usize {
    m.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// Number of classes; 0 for a NULL handle.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn scorpio_model_num_classes(m: *const ScorpioModel) -> usize {
    m.as_ref().map_or(0, |m| m.inner.num_classes())
}

/// Logits of `n` inputs into `out` (`n * num_classes` floats).
///
/// # Safety
/// `x` must hold `n * input_dim` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn scorpio_model_logits(
    m: *const ScorpioModel,
    x: *const f32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> ScorpioStatus {
    guard(|| {
        let m = model(m)?;
        let k = m.num_classes();
        if out_len != n * k {
            return Err(invalid(format!("out_len is {out_len}, expected {}", n * k)));
        }
        let xs = slice(x, n * m.input_dim(), "x")?;
        let logits = m.logits(&Tensor::new(vec![n, m.input_dim()], xs.to_vec())?)?;
        slice_mut(out, out_len, "out")?.copy_from_slice(logits.data());
        Ok(())
    })
}

/// Per-example cross-entropy into `loss` (`n` floats) and its input gradient into `grad`
/// (`n * input_dim` floats). Either output may be NULL.
///
/// # Safety
/// Buffers must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn scorpio_model_input_grad(
    m: *const ScorpioModel,
    x: *const f32,
    labels: *const u32,
    n: usize,
    loss: *mut f32,
    grad: *mut f32,
) -> ScorpioStatus {
    guard(|| {
        let m = model(m)?;
        let b = batch(m, x, labels, n)?;
        let (l, g) = m.loss_and_input_grad(&b.x, &b.y)?;
        if !loss.is_null() {
            slice_mut(loss, n, "loss")?.copy_from_slice(&l);
        }
        if !grad.is_null() {
            slice_mut(grad, n * m.input_dim(), "grad")?.copy_from_slice(g.data());
        }
        Ok(())
    })
}

/// Maximizer of `s . grad` over the ball `||s||_p <= eps` into `out` (`len` doubles).
/// `degenerate` (optional) is set to 1 when the gradient is identically zero.
///
/// # Safety
/// `grad` and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn scorpio_fw_oracle(
    grad: *const f64,
    len: usize,
    p: f64,
    eps: f64,
    out: *mut f64,
    degenerate: *mut i32,
) -> ScorpioStatus {
    guard(|| {
        let g = slice(grad, len, "grad")?;
        let b = AttackBudget::unclamped(Norm::from_p(p)?, eps)?;
        let o = fw_oracle(g, &b);
        slice_mut(out, len, "out")?.copy_from_slice(&o.s);
        if !degenerate.is_null() {
            *degenerate = o.degenerate as i32;
        }
        Ok(())
    })
}

unsafe fn write_attack(
    r: scorpio::attacks::AttackResult<f32>,
    n: usize,
    d: usize,
    delta: *mut f32,
    pred: *mut u32,
) -> Result<(), Fail> {
    if !delta.is_null() {
        slice_mut(delta, n * d, "delta")?.copy_from_slice(r.delta.data());
    }
    if !pred.is_null() {
        for (o, p) in slice_mut(pred, n, "pred")?.iter_mut().zip(&r.pred) {
            *o = *p as u32;
        }
    }
    Ok(())
}

/// Frank-Wolfe attack on the quadratic surrogate built from finite-difference
/// Hessian-vector products. Any `p >= 1` is accepted. Writes perturbations into `delta`
/// (`n * input_dim` floats) and adversarial predictions into `pred` (`n` values); either
/// may be NULL.
///
/// # Safety
/// Buffers must have the stated lengths; `params` must be valid.
#[no_mangle]
pub unsafe extern "C" fn scorpio_attack_quad(
    m: *const ScorpioModel,
    x: *const f32,
    labels: *const u32,
    n: usize,
    params: *const ScorpioAttackParams,
    delta: *mut f32,
    pred: *mut u32,
) -> ScorpioStatus {
    guard(|| {
        let m = model(m)?;
        let p = params.as_ref().ok_or_else(|| Fail(ScorpioStatus::NullPointer, "params is null".into()))?;
        let b = batch(m, x, labels, n)?;
        let scheme = match p.scheme {
            ScorpioFdScheme::Forward => FdScheme::Fe,
            ScorpioFdScheme::Central => FdScheme::Cd,
        };
        let cfg = QuadAttackConfig::new(budget(p)?, p.steps, scheme, p.fd_step)?;
        let r = quad_attack(m, &b, &objective(p, &b, m.num_classes()), &cfg)?;
        write_attack(r, n, m.input_dim(), delta, pred)
    })
}

/// Projected gradient attack with default step sizes; `p` must be 2 or `INFINITY`.
/// Outputs as for [`scorpio_attack_quad`].
///
/// # Safety
/// Buffers must have the stated lengths; `params` must be valid.
#[no_mangle]
pub unsafe extern "C" fn scorpio_attack_pgd(
    m: *const ScorpioModel,
    x: *const f32,
    labels: *const u32,
    n: usize,
    params: *const ScorpioAttackParams,
    delta: *mut f32,
    pred: *mut u32,
) -> ScorpioStatus {
    guard(|| {
        let m = model(m)?;
        let p = params.as_ref().ok_or_else(|| Fail(ScorpioStatus::NullPointer, "params is null".into()))?;
        let b = batch(m, x, labels, n)?;
        let cfg = PgdConfig::new(budget(p)?, p.steps)?;
        let r = pgd(m, &b, &objective(p, &b, m.num_classes()), &cfg)?;
        write_attack(r, n, m.input_dim(), delta, pred)
    })
}
