//! Training regimes: ERM, PGD adversarial training, the quadratic-approximate regularizer
//! and two input-gradient baselines, all driven by SGD with momentum.
//!
//! Parameter gradients of gradient-dependent penalties are never obtained by double
//! backpropagation. Directional derivatives of parameter gradients are taken by finite
//! differences instead: for a fixed direction `u`,
//! `d/dθ (u · grad_x l(x)) ≈ (grad_θ l(x + t u) - grad_θ l(x)) / t`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    pgd_core, quad_attack_from_gradient, run_attack, AttackObjective, AttackSpec, FdScheme, LossSurface,
    ModelObjective, ObjectiveKind, PassLedger, PgdConfig, PgdInit, QuadAttackConfig,
};
use crate::autodiff::{Scalar, Tape, Tensor};
use crate::data_io::{dataset_root, epoch_order, synth_blobs, synth_moons, Dataset};
use crate::error::{CheckpointError, Error, Result};
use crate::lp_geometry::{lp_norm, AttackBudget, Norm};
use crate::models::{
    accuracy, cross_entropy_per_example, hex, read_container, write_container, Architecture, LabeledBatch, Model,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Model file to fine-tune from; training starts from a fresh initialization otherwise.
    #[serde(default)]
    pub init_from: Option<PathBuf>,
    pub optimizer: OptimizerConfig,
    pub model: Architecture,
    pub data: DataConfig,
    pub regime: Regime,
    /// Validation attack used to pick the best epoch. Required for the baseline regularizers.
    #[serde(default)]
    pub selection: Option<SelectionConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Fraction of the epochs after which the learning rate is multiplied by `decay_factor`.
    #[serde(default = "default_decay_at")]
    pub decay_at: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_decay_at() -> f64 {
    0.8
}

fn default_decay_factor() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Moons,
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    #[serde(default)]
    pub root: Option<PathBuf>,
    pub val_size: usize,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub val_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Synthetic datasets: examples per split and noise level.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub noise: Option<f64>,
}

impl DataConfig {
    /// Load the dataset; `root_override` takes precedence over the configured root.
    pub fn load(&self, root_override: Option<&Path>, seed: u64) -> Result<Dataset> {
        let root = root_override.map(Path::to_path_buf).or_else(|| self.root.clone());
        let ds = match self.dataset {
            DatasetKind::Mnist => Dataset::mnist(&dataset_root(root.as_deref()), self.val_size)?,
            DatasetKind::Cifar10 => Dataset::cifar10(&dataset_root(root.as_deref()), self.val_size)?,
            DatasetKind::Moons | DatasetKind::Blobs => {
                let n = self.n.ok_or_else(|| Error::Config("synthetic datasets need data.n".into()))?;
                let noise = self.noise.unwrap_or(0.1);
                let make = |s: u64| -> Result<LabeledBatch<f32>> {
                    match self.dataset {
                        DatasetKind::Moons => synth_moons(n, noise, s),
                        _ => synth_blobs(&[vec![-1.0, -1.0], vec![1.0, 1.0]], n.div_ceil(2), noise, s),
                    }
                };
                let name = if self.dataset == DatasetKind::Moons { "moons" } else { "blobs" };
                let train = make(seed)?;
                let test = make(seed.wrapping_add(1))?;
                let val = make(seed.wrapping_add(2))?;
                Dataset { name: name.into(), train, val, test, input_shape: vec![2], classes: 2, input_range: None }
            }
        };
        Ok(ds.truncate(
            self.train_limit.unwrap_or(usize::MAX),
            self.val_limit.unwrap_or(usize::MAX),
            self.test_limit.unwrap_or(usize::MAX),
        ))
    }
}

/// Regime and its parameters. Budget, step counts, finite-difference step and strength have
/// no defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regime {
    Erm,
    At {
        norm: Norm,
        eps: f64,
        steps: usize,
        #[serde(default)]
        step_size: Option<f64>,
        #[serde(default)]
        random_init: bool,
    },
    Scorpio {
        norm: Norm,
        eps: f64,
        steps: usize,
        fd: FdScheme,
        h: f64,
        r: f64,
    },
    GradReg {
        lambda: f64,
        /// Input-space length of the finite-difference displacement.
        #[serde(default)]
        fd_step: Option<f64>,
    },
    Cure {
        lambda: f64,
        h: f64,
        #[serde(default)]
        fd_step: Option<f64>,
    },
}

const DEFAULT_FD_STEP: f64 = 0.01;

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Erm => "erm",
            Regime::At { .. } => "at",
            Regime::Scorpio { .. } => "scorpio",
            Regime::GradReg { .. } => "grad_reg",
            Regime::Cure { .. } => "cure",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub norm: Norm,
    pub eps: f64,
    pub steps: usize,
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("optimizer.lr must be > 0, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return bad(format!("optimizer.momentum must be in [0, 1), got {}", o.momentum));
        }
        if !(0.0..=1.0).contains(&o.decay_at) || !(o.decay_factor > 0.0) || o.weight_decay < 0.0 {
            return bad("optimizer decay_at must be in [0, 1], decay_factor > 0, weight_decay >= 0".into());
        }
        self.model.validate()?;
        let eps_ok = |eps: f64| eps.is_finite() && eps >= 0.0;
        match &self.regime {
            Regime::Erm => {}
            Regime::At { norm, eps, steps, step_size, .. } => {
                if !eps_ok(*eps) || *steps == 0 || step_size.is_some_and(|a| !(a > 0.0)) {
                    return bad("regime at needs eps >= 0, steps >= 1 and step_size > 0".into());
                }
                if !matches!(norm, Norm::L2 | Norm::Linf) {
                    return bad(format!("adversarial training uses projected PGD, which supports l2 and linf, not {norm}"));
                }
            }
            Regime::Scorpio { eps, steps, h, r, .. } => {
                if !eps_ok(*eps) || *steps == 0 || !(*h > 0.0) || !(*r >= 0.0 && r.is_finite()) {
                    return bad("regime scorpio needs eps >= 0, steps >= 1, h > 0 and r >= 0".into());
                }
            }
            Regime::GradReg { lambda, fd_step } | Regime::Cure { lambda, fd_step, .. } => {
                if !(*lambda >= 0.0 && lambda.is_finite()) || fd_step.is_some_and(|t| !(t > 0.0)) {
                    return bad("lambda must be >= 0 and fd_step > 0".into());
                }
                if let Regime::Cure { h, .. } = &self.regime {
                    if !(*h > 0.0) {
                        return bad("regime cure needs h > 0".into());
                    }
                }
                if self.selection.is_none() {
                    return bad(format!("regime {} needs a [selection] section", self.regime.name()));
                }
            }
        }
        if let Some(s) = &self.selection {
            if !eps_ok(s.eps) || s.steps == 0 || !matches!(s.norm, Norm::L2 | Norm::Linf) {
                return bad("selection needs norm l2 or linf, eps >= 0 and steps >= 1".into());
            }
        }
        Ok(())
    }

    /// Validation attack for best-epoch selection; `None` selects on clean accuracy.
    pub fn selection_attack(&self) -> Option<SelectionConfig> {
        self.selection.clone().or_else(|| match &self.regime {
            Regime::At { norm, eps, .. } | Regime::Scorpio { norm, eps, .. } => {
                Some(SelectionConfig { norm: *norm, eps: *eps, steps: 10 })
            }
            _ => None,
        })
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// SHA-256 of the canonical JSON form (object keys sorted), so the hash does not depend on
/// key order in the source file.
pub fn config_hash<C: Serialize>(cfg: &C) -> String {
    let v = serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null);
    hex(&Sha256::digest(canonical_json(&v).as_bytes()))
}

fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", serde_json::to_string(k).unwrap(), canonical_json(&m[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// Per-epoch record. `wall_seconds` is kept out of the deterministic metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean regularizer: `l(x + v) - l(x)` for the quadratic regime, the penalty for the
    /// baselines.
    pub mean_reg: Option<f64>,
    pub val_clean_acc: f64,
    pub val_adv_acc: Option<f64>,
    pub attack: PassLedger,
    pub train: PassLedger,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,lr,train_loss,mean_reg,val_clean_acc,val_adv_acc,attack_forward,attack_backward,train_forward,train_backward";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{:.6},{},{:.4},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            opt(self.mean_reg),
            self.val_clean_acc,
            opt(self.val_adv_acc),
            self.attack.forward,
            self.attack.backward,
            self.train.forward,
            self.train.backward
        )
    }
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

pub fn timings_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,wall_seconds\n");
    for m in metrics {
        s.push_str(&format!("{},{:.3}\n", m.epoch, m.wall_seconds));
    }
    s
}

/// Gradient and bookkeeping for one mini-batch.
pub struct StepOutput<T: Scalar> {
    pub grads: Vec<Tensor<T>>,
    /// Value of the training objective on the batch.
    pub loss: f64,
    pub reg: Option<f64>,
    pub attack: PassLedger,
    pub train: PassLedger,
}

struct PassOut<T: Scalar> {
    losses: Vec<f64>,
    input_grad: Option<Tensor<T>>,
    params: Vec<Tensor<T>>,
}

/// One forward+backward pass of `sum_i w_i l(x_i, y_i)`.
fn weighted_pass<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    y: &[usize],
    w: &[T],
    want_input: bool,
) -> Result<PassOut<T>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let fwd = model.record(&mut tape, xv)?;
    let loss = tape.cross_entropy(fwd.logits, y, w)?;
    let losses = cross_entropy_per_example(tape.value(fwd.logits), y)?.into_iter().map(|v| v.as_f64()).collect();
    let mut targets = fwd.params.clone();
    if want_input {
        targets.push(xv);
    }
    let mut grads = tape.backward(loss, &targets)?.into_tensors();
    let input_grad = if want_input { grads.pop() } else { None };
    Ok(PassOut { losses, input_grad, params: grads })
}

fn scaled_sum<T: Scalar>(a: &[Tensor<T>], ca: f64, b: Option<&[Tensor<T>]>) -> Result<Vec<Tensor<T>>> {
    a.iter()
        .enumerate()
        .map(|(i, t)| {
            let s = t.scale(T::of(ca));
            match b {
                Some(b) => s.add(&b[i]),
                None => Ok(s),
            }
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn one_pass() -> PassLedger {
    PassLedger { forward: 1, backward: 1, eval_forward: 0 }
}

fn clamp_to<T: Scalar>(t: Tensor<T>, range: Option<(f64, f64)>) -> Tensor<T> {
    match range {
        Some((lo, hi)) => t.clamp(T::of(lo), T::of(hi)),
        None => t,
    }
}

/// Parameter gradient of the batch objective for `regime`. `step_seed` feeds random PGD
/// starts only.
pub fn step_gradients<T: Scalar>(
    model: &Model<T>,
    regime: &Regime,
    batch: &LabeledBatch<T>,
    input_range: Option<(f64, f64)>,
    step_seed: u64,
) -> Result<StepOutput<T>> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let inv = 1.0 / b as f64;
    let (x, y) = (&batch.x, &batch.y[..]);
    let ones = vec![T::one(); b];
    let erm = || -> Result<StepOutput<T>> {
        let p = weighted_pass(model, x, y, &vec![T::of(inv); b], false)?;
        Ok(StepOutput { grads: p.params, loss: mean(&p.losses), reg: None, attack: PassLedger::default(), train: one_pass() })
    };
    match regime {
        Regime::Erm => erm(),
        Regime::At { norm, eps, steps, step_size, random_init } => {
            let budget = AttackBudget { norm: *norm, eps: *eps, clamp_box: input_range };
            let mut cfg = PgdConfig::new(budget, *steps)?;
            if let Some(a) = step_size {
                cfg.step_size = *a;
            }
            if *random_init {
                cfg.init = PgdInit::Random;
                cfg.seed = step_seed;
            }
            let obj = AttackObjective::untargeted(ObjectiveKind::Ul);
            let surface = ModelObjective::new(model, y, &obj)?;
            let out = pgd_core(&surface, x, &cfg, None)?;
            let adv = clamp_to(x.add(&out.delta)?, input_range);
            let p = weighted_pass(model, &adv, y, &vec![T::of(inv); b], false)?;
            Ok(StepOutput { grads: p.params, loss: mean(&p.losses), reg: None, attack: out.ledger, train: one_pass() })
        }
        Regime::Scorpio { norm, eps, steps, fd, h, r } => {
            if *r == 0.0 {
                return erm();
            }
            let budget = AttackBudget { norm: *norm, eps: *eps, clamp_box: input_range };
            let qcfg = QuadAttackConfig::new(budget, *steps, *fd, *h)?;
            // The clean pass provides both grad_x l (recycled by the attack) and grad_θ l(x).
            let p1 = weighted_pass(model, x, y, &ones, true)?;
            let g0 = p1.input_grad.as_ref().unwrap();
            let obj = AttackObjective::untargeted(ObjectiveKind::Ul);
            let surface = ModelObjective::new(model, y, &obj)?;
            let fw = quad_attack_from_gradient(&surface, x, g0, &qcfg, None)?;
            let mut attack = one_pass();
            attack.add(fw.ledger);
            let adv = clamp_to(x.add(&fw.delta)?, input_range);
            let p2 = weighted_pass(model, &adv, y, &vec![T::of(r * inv); b], false)?;
            let grads = scaled_sum(&p1.params, (1.0 - r) * inv, Some(&p2.params))?;
            let reg = mean(&p2.losses) - mean(&p1.losses);
            let loss = mean(&p1.losses) + r * reg;
            Ok(StepOutput { grads, loss, reg: Some(reg), attack, train: one_pass() })
        }
        Regime::GradReg { lambda, fd_step } => {
            if *lambda == 0.0 {
                return erm();
            }
            let tau = fd_step.unwrap_or(DEFAULT_FD_STEP);
            let p1 = weighted_pass(model, x, y, &ones, true)?;
            let g = p1.input_grad.as_ref().unwrap();
            let norms: Vec<f64> = g.rows_iter().map(|r| lp_norm(r, Norm::L2)).collect();
            let reg = lambda * mean(&norms.iter().map(|n| n * n).collect::<Vec<_>>());
            // grad_θ ||g||² = 2 (dg/dθ)ᵀ g, taken along u = g with t = tau / ||g||.
            let (shifted, coef) = displaced(x, g, &norms, tau, *lambda, inv)?;
            let both = Tensor::concat_rows(&[x, &shifted])?;
            let w: Vec<T> = coef.iter().map(|c| T::of(-c)).chain(coef.iter().map(|&c| T::of(c))).collect();
            let yy: Vec<usize> = y.iter().chain(y).copied().collect();
            let p2 = weighted_pass(model, &both, &yy, &w, false)?;
            let grads = scaled_sum(&p1.params, inv, Some(&p2.params))?;
            let mut attack = one_pass();
            attack.eval_forward = 0;
            Ok(StepOutput { grads, loss: mean(&p1.losses) + reg, reg: Some(reg), attack, train: one_pass() })
        }
        Regime::Cure { lambda, h, fd_step } => {
            if *lambda == 0.0 {
                return erm();
            }
            let tau = fd_step.unwrap_or(DEFAULT_FD_STEP);
            let p1 = weighted_pass(model, x, y, &ones, true)?;
            let g = p1.input_grad.as_ref().unwrap();
            let z = sign_direction(g)?;
            let xz = x.axpy(T::of(*h), &z)?;
            let obj = AttackObjective::untargeted(ObjectiveKind::Ul);
            let surface = ModelObjective::new(model, y, &obj)?;
            let (_, gz) = surface.values_and_grads(&xz)?;
            let d = gz.sub(g)?;
            let norms: Vec<f64> = d.rows_iter().map(|r| lp_norm(r, Norm::L2)).collect();
            let reg = lambda * mean(&norms.iter().map(|n| n * n).collect::<Vec<_>>());
            // grad_θ ||d||² = 2 [d/dθ (u · g(x + hz)) - d/dθ (u · g(x))] with u = d.
            let (x_u, coef) = displaced(x, &d, &norms, tau, *lambda, inv)?;
            let (xz_u, _) = displaced(&xz, &d, &norms, tau, *lambda, inv)?;
            let all = Tensor::concat_rows(&[x, &xz, &x_u, &xz_u])?;
            let signs = [1.0, -1.0, -1.0, 1.0];
            let w: Vec<T> = signs.iter().flat_map(|s| coef.iter().map(move |c| T::of(s * c))).collect();
            let yy: Vec<usize> = (0..4).flat_map(|_| y.iter().copied()).collect();
            let p3 = weighted_pass(model, &all, &yy, &w, false)?;
            let grads = scaled_sum(&p1.params, inv, Some(&p3.params))?;
            let attack = PassLedger { forward: 2, backward: 2, eval_forward: 0 };
            Ok(StepOutput { grads, loss: mean(&p1.losses) + reg, reg: Some(reg), attack, train: one_pass() })
        }
    }
}

/// Rows `x_i + t_i u_i` with `t_i = tau / ||u_i||` and the matching finite-difference
/// weights `2 lambda / (t_i B)`. Rows with `u_i = 0` get weight zero.
fn displaced<T: Scalar>(
    x: &Tensor<T>,
    u: &Tensor<T>,
    norms: &[f64],
    tau: f64,
    lambda: f64,
    inv_b: f64,
) -> Result<(Tensor<T>, Vec<f64>)> {
    let mut out = x.clone();
    let mut coef = Vec::with_capacity(norms.len());
    for (i, &n) in norms.iter().enumerate() {
        if n > 0.0 {
            let t = tau / n;
            for (o, &ui) in out.row_mut(i).iter_mut().zip(u.row(i)) {
                *o = T::of(o.as_f64() + t * ui.as_f64());
            }
            coef.push(2.0 * lambda / t * inv_b);
        } else {
            coef.push(0.0);
        }
    }
    Ok((out, coef))
}

/// `sgn(g) / ||sgn(g)||_2` per row with `sgn(0) = +1`.
fn sign_direction<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let c = 1.0 / (g.row_len().max(1) as f64).sqrt();
    Ok(g.map(|v| if v < T::zero() { T::of(-c) } else { T::of(c) }))
}

/// Curvature penalty `lambda ||grad l(x + h z) - grad l(x)||²` per example.
pub fn cure_penalty<T: Scalar>(model: &Model<T>, batch: &LabeledBatch<T>, h: f64, lambda: f64) -> Result<Vec<f64>> {
    let obj = AttackObjective::untargeted(ObjectiveKind::Ul);
    let surface = ModelObjective::new(model, &batch.y, &obj)?;
    let (_, g) = surface.values_and_grads(&batch.x)?;
    let z = sign_direction(&g)?;
    let (_, gz) = surface.values_and_grads(&batch.x.axpy(T::of(h), &z)?)?;
    let d = gz.sub(&g)?;
    Ok(d.rows_iter().map(|r| lambda * lp_norm(r, Norm::L2).powi(2)).collect())
}

/// Mutable training state; everything needed to resume bit-identically.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model<f32>,
    pub momentum: Vec<Tensor<f32>>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best: Option<BestModel>,
    pub metrics: Vec<EpochMetrics>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct BestModel {
    pub model: Model<f32>,
    pub score: f64,
    pub epoch: usize,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "training",
            "architecture": self.model.arch(),
            "epoch": self.epoch,
            "config_hash": self.config_hash,
            "rng": { "algorithm": "chacha8", "seed": self.seed, "stream": "epoch" },
            "best": self.best.as_ref().map(|b| serde_json::json!({ "score": b.score, "epoch": b.epoch })),
            "metrics": self.metrics,
        });
        let mut tensors: Vec<&Tensor<f32>> = self.model.params().iter().collect();
        tensors.extend(self.momentum.iter());
        if let Some(b) = &self.best {
            tensors.extend(b.model.params().iter());
        }
        write_container(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, mut tensors) = read_container(path)?;
        let bad = |m: &str| Error::from(CheckpointError::Metadata(m.to_string()));
        if meta.get("kind").and_then(|k| k.as_str()) != Some("training") {
            return Err(bad("not a training checkpoint"));
        }
        let arch: Architecture = serde_json::from_value(meta["architecture"].clone()).map_err(|e| bad(&e.to_string()))?;
        let n = arch.param_shapes().len();
        let has_best = !meta["best"].is_null();
        let expected = if has_best { 3 * n } else { 2 * n };
        if tensors.len() != expected {
            return Err(bad(&format!("expected {expected} tensors, found {}", tensors.len())));
        }
        let best_params = if has_best { tensors.split_off(2 * n) } else { Vec::new() };
        let momentum = tensors.split_off(n);
        let model = Model::from_params(arch.clone(), tensors)?;
        let best = if has_best {
            Some(BestModel {
                model: Model::from_params(arch, best_params)?,
                score: meta["best"]["score"].as_f64().ok_or_else(|| bad("best score"))?,
                epoch: meta["best"]["epoch"].as_u64().ok_or_else(|| bad("best epoch"))? as usize,
            })
        } else {
            None
        };
        Ok(TrainState {
            model,
            momentum,
            epoch: meta["epoch"].as_u64().ok_or_else(|| bad("epoch"))? as usize,
            best,
            metrics: serde_json::from_value(meta["metrics"].clone()).map_err(|e| bad(&e.to_string()))?,
            config_hash: meta["config_hash"].as_str().ok_or_else(|| bad("config hash"))?.to_string(),
            seed: meta["rng"]["seed"].as_u64().ok_or_else(|| bad("rng seed"))?,
        })
    }
}

pub struct TrainOutcome {
    /// Model from the selected epoch (the final model when no epoch ran).
    pub best: Model<f32>,
    pub last: Model<f32>,
    pub best_epoch: Option<usize>,
    pub metrics: Vec<EpochMetrics>,
    pub attack_ledger: PassLedger,
    pub train_ledger: PassLedger,
}

impl TrainOutcome {
    /// Writes `best.scrp`, `last.scrp`, `metrics.csv` and `timings.csv`; returns their paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let files = [dir.join("best.scrp"), dir.join("last.scrp"), dir.join("metrics.csv"), dir.join("timings.csv")];
        self.best.save(&files[0])?;
        self.last.save(&files[1])?;
        let w = |p: &Path, s: String| std::fs::write(p, s).map_err(|e| Error::io(format!("writing {}", p.display()), e));
        w(&files[2], metrics_csv(&self.metrics))?;
        w(&files[3], timings_csv(&self.metrics))?;
        Ok(files.to_vec())
    }
}

/// Epoch-level driver.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a Dataset,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    /// Fresh state from `init` (fine-tuning) or a seeded initialization.
    pub fn new(cfg: &'a TrainConfig, data: &'a Dataset, init: Option<Model<f32>>) -> Result<Self> {
        cfg.validate()?;
        let model = match init {
            Some(m) => {
                if m.arch() != &cfg.model {
                    return Err(Error::Config("initial model architecture differs from the config".into()));
                }
                m
            }
            None => Model::init(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
        };
        if model.input_dim() != data.train.x.row_len() || model.num_classes() < data.classes {
            return Err(Error::Config(format!(
                "model expects {} inputs / {} classes, data has {} / {}",
                model.input_dim(),
                model.num_classes(),
                data.train.x.row_len(),
                data.classes
            )));
        }
        let momentum = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let state =
            TrainState { model, momentum, epoch: 0, best: None, metrics: Vec::new(), config_hash: cfg.hash(), seed: cfg.seed };
        Ok(Trainer { cfg, data, state })
    }

    pub fn resume(cfg: &'a TrainConfig, data: &'a Dataset, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if state.config_hash != cfg.hash() {
            return Err(Error::Config("checkpoint was written for a different configuration".into()));
        }
        Ok(Trainer { cfg, data, state })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let o = &self.cfg.optimizer;
        let decay_epoch = (o.decay_at * self.cfg.epochs as f64).floor() as usize;
        if epoch >= decay_epoch {
            o.lr * o.decay_factor
        } else {
            o.lr
        }
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        let epoch = self.state.epoch;
        let lr = self.learning_rate(epoch);
        let train = &self.data.train;
        let order = epoch_order(train.len(), self.cfg.seed, epoch);
        let mut attack = PassLedger::default();
        let mut passes = PassLedger::default();
        let (mut loss_sum, mut reg_sum, mut n_steps) = (0.0, 0.0, 0usize);
        let mut saw_reg = false;
        for (step, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch = train.select(idx);
            let seed = self.cfg.seed ^ ((epoch as u64) << 32 | step as u64);
            let out = step_gradients(&self.state.model, &self.cfg.regime, &batch, self.data.input_range, seed)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged { epoch, step, loss: f64::NAN },
                    other => other,
                })?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: out.loss });
            }
            self.apply(&out.grads, lr);
            loss_sum += out.loss;
            if let Some(r) = out.reg {
                reg_sum += r;
                saw_reg = true;
            }
            n_steps += 1;
            attack.add(out.attack);
            passes.add(out.train);
        }
        if !self.state.model.params().iter().all(Tensor::is_finite) {
            return Err(Error::Diverged { epoch, step: n_steps, loss: f64::NAN });
        }
        let (val_clean_acc, val_adv_acc) = self.validate()?;
        let score = val_adv_acc.unwrap_or(val_clean_acc);
        if self.state.best.as_ref().map_or(true, |b| score > b.score) {
            self.state.best = Some(BestModel { model: self.state.model.clone(), score, epoch });
        }
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n_steps.max(1) as f64,
            mean_reg: saw_reg.then(|| reg_sum / n_steps.max(1) as f64),
            val_clean_acc,
            val_adv_acc,
            attack,
            train: passes,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        self.state.metrics.push(m.clone());
        self.state.epoch += 1;
        Ok(m)
    }

    fn apply(&mut self, grads: &[Tensor<f32>], lr: f64) {
        let o = &self.cfg.optimizer;
        let (mu, wd, lr) = (o.momentum as f32, o.weight_decay as f32, lr as f32);
        let params = self.state.model.params_mut();
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(self.state.momentum.iter_mut()) {
            for ((pv, &gv), bv) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
                *bv = mu * *bv + gv + wd * *pv;
                *pv -= lr * *bv;
            }
        }
    }

    fn validate(&self) -> Result<(f64, Option<f64>)> {
        let val = &self.data.val;
        if val.is_empty() {
            return Ok((0.0, None));
        }
        let clean = clean_accuracy(&self.state.model, val, 500)?;
        let adv = match self.cfg.selection_attack() {
            Some(s) => {
                let budget = AttackBudget { norm: s.norm, eps: s.eps, clamp_box: self.data.input_range };
                let spec = AttackSpec::Pgd { objective: ObjectiveKind::Ul, cfg: PgdConfig::new(budget, s.steps)? };
                Some(run_attack(&self.state.model, val, &spec, self.cfg.seed, 500)?.adversarial_accuracy())
            }
            None => None,
        };
        Ok((clean, adv))
    }

    /// Run the remaining epochs, saving `checkpoint` after each one when given.
    pub fn run(
        mut self,
        checkpoint: Option<&Path>,
        mut on_epoch: Option<&mut dyn FnMut(&EpochMetrics)>,
    ) -> Result<TrainOutcome> {
        while !self.is_done() {
            let m = self.run_epoch()?;
            if let Some(cb) = on_epoch.as_deref_mut() {
                cb(&m);
            }
            if let Some(path) = checkpoint {
                self.state.save(path)?;
            }
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        let s = self.state;
        let mut attack_ledger = PassLedger::default();
        let mut train_ledger = PassLedger::default();
        for m in &s.metrics {
            attack_ledger.add(m.attack);
            train_ledger.add(m.train);
        }
        let (best, best_epoch) = match s.best {
            Some(b) => (b.model, Some(b.epoch)),
            None => (s.model.clone(), None),
        };
        TrainOutcome { best, last: s.model, best_epoch, metrics: s.metrics, attack_ledger, train_ledger }
    }
}

/// Convenience: train from scratch (or from `init`) to completion.
pub fn train(cfg: &TrainConfig, data: &Dataset, init: Option<Model<f32>>) -> Result<TrainOutcome> {
    Trainer::new(cfg, data, init)?.run(None, None)
}

/// Clean accuracy in percent, evaluated in chunks.
pub fn clean_accuracy<T: Scalar>(model: &Model<T>, data: &LabeledBatch<T>, chunk: usize) -> Result<f64> {
    let mut pred = Vec::with_capacity(data.len());
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk.max(1)).min(data.len());
        pred.extend(model.predict(&data.x.slice_rows(start, end))?);
        start = end;
    }
    Ok(accuracy(&pred, &data.y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Activation;

    fn blobs_data(n: usize) -> Dataset {
        let train: LabeledBatch<f32> = synth_blobs(&[vec![-2.0, -2.0], vec![2.0, 2.0]], n, 0.5, 1).unwrap();
        let val: LabeledBatch<f32> = synth_blobs(&[vec![-2.0, -2.0], vec![2.0, 2.0]], 50, 0.5, 2).unwrap();
        Dataset {
            name: "blobs".into(),
            test: val.clone(),
            train,
            val,
            input_shape: vec![2],
            classes: 2,
            input_range: None,
        }
    }

    fn moons_data() -> Dataset {
        let train: LabeledBatch<f32> = synth_moons(256, 0.1, 1).unwrap();
        let val: LabeledBatch<f32> = synth_moons(64, 0.1, 2).unwrap();
        Dataset {
            name: "moons".into(),
            test: val.clone(),
            train,
            val,
            input_shape: vec![2],
            classes: 2,
            input_range: None,
        }
    }

    fn config(regime: Regime, widths: &[usize], epochs: usize) -> TrainConfig {
        let needs_sel = matches!(regime, Regime::GradReg { .. } | Regime::Cure { .. });
        TrainConfig {
            seed: 3,
            epochs,
            batch_size: 32,
            init_from: None,
            optimizer: OptimizerConfig { lr: 0.05, momentum: 0.9, decay_at: 0.8, decay_factor: 0.1, weight_decay: 0.0 },
            model: Architecture::mlp(widths, Activation::Tanh),
            data: DataConfig {
                dataset: DatasetKind::Moons,
                root: None,
                val_size: 64,
                train_limit: None,
                val_limit: None,
                test_limit: None,
                n: Some(256),
                noise: Some(0.1),
            },
            regime,
            selection: needs_sel.then_some(SelectionConfig { norm: Norm::L2, eps: 0.1, steps: 3 }),
        }
    }

    fn all_regimes() -> Vec<Regime> {
        vec![
            Regime::Erm,
            Regime::At { norm: Norm::L2, eps: 0.2, steps: 3, step_size: None, random_init: false },
            Regime::Scorpio { norm: Norm::L2, eps: 0.2, steps: 3, fd: FdScheme::Fe, h: 0.5, r: 1.05 },
            Regime::GradReg { lambda: 0.1, fd_step: None },
            Regime::Cure { lambda: 0.1, h: 0.5, fd_step: None },
        ]
    }

    #[test]
    fn logistic_model_separates_two_blobs_quickly() {
        let data = blobs_data(200);
        let mut cfg = config(Regime::Erm, &[2, 2], 15);
        cfg.batch_size = 32;
        let out = train(&cfg, &data, None).unwrap();
        let steps: u64 = out.train_ledger.forward;
        assert!(steps <= 200, "{steps} steps");
        assert!(clean_accuracy(&out.last, &data.train, 1000).unwrap() >= 99.0);
    }

    #[test]
    fn zero_epochs_returns_the_initial_model() {
        let data = moons_data();
        let cfg = config(Regime::Erm, &[2, 8, 2], 0);
        let init: Model<f32> = Model::init(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        let out = train(&cfg, &data, None).unwrap();
        assert_eq!(out.best, init);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let data = moons_data();
        let cfg = config(Regime::Erm, &[2, 8, 2], 2);
        let a = train(&cfg, &data, None).unwrap();
        let b = train(&cfg, &data, None).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.last, b.last);
    }

    #[test]
    fn degenerate_strengths_reduce_to_erm_exactly() {
        let data = moons_data();
        let erm = train(&config(Regime::Erm, &[2, 8, 2], 2), &data, None).unwrap().last;
        for regime in [
            Regime::Scorpio { norm: Norm::L2, eps: 0.3, steps: 3, fd: FdScheme::Fe, h: 1.15, r: 0.0 },
            Regime::GradReg { lambda: 0.0, fd_step: None },
            Regime::Cure { lambda: 0.0, h: 0.5, fd_step: None },
        ] {
            let mut cfg = config(regime.clone(), &[2, 8, 2], 2);
            cfg.selection = None;
            let out = Trainer::new(&cfg, &data, None);
            // Baselines insist on a selection attack; compare parameters only.
            let last = match out {
                Ok(t) => t.run(None, None).unwrap().last,
                Err(_) => {
                    let mut c = config(regime, &[2, 8, 2], 2);
                    c.selection = Some(SelectionConfig { norm: Norm::L2, eps: 0.1, steps: 1 });
                    train(&c, &data, None).unwrap().last
                }
            };
            assert_eq!(last, erm);
        }
    }

    #[test]
    fn adversarial_training_at_zero_budget_is_erm() {
        let data = Dataset {
            input_range: Some((0.0, 1.0)),
            ..{
                let mut d = moons_data();
                d.train.x = d.train.x.map(|v| (v + 1.0) / 3.0).clamp(0.0, 1.0);
                d.val.x = d.val.x.map(|v| (v + 1.0) / 3.0).clamp(0.0, 1.0);
                d
            }
        };
        let erm = train(&config(Regime::Erm, &[2, 8, 2], 2), &data, None).unwrap().last;
        let at = Regime::At { norm: Norm::L2, eps: 0.0, steps: 4, step_size: None, random_init: false };
        let out = train(&config(at, &[2, 8, 2], 2), &data, None).unwrap();
        assert_eq!(out.last, erm);
        let steps = out.train_ledger.forward;
        assert_eq!(out.attack_ledger.forward, 4 * steps);
    }

    #[test]
    fn first_epoch_lowers_the_loss_for_every_regime() {
        let data = moons_data();
        for regime in all_regimes() {
            let cfg = config(regime.clone(), &[2, 16, 2], 1);
            let init: Model<f32> = Model::init(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
            let before = step_gradients(&init, &regime, &data.train, None, 0).unwrap().loss;
            let out = train(&cfg, &data, None).unwrap();
            let after = step_gradients(&out.last, &regime, &data.train, None, 0).unwrap().loss;
            assert!(out.metrics[0].train_loss < before, "{}: {} vs {before}", regime.name(), out.metrics[0].train_loss);
            assert!(after < before, "{}: {after} vs {before}", regime.name());
        }
    }

    #[test]
    fn per_step_attack_costs() {
        let data = moons_data();
        let batch = data.train.slice(0, 32);
        let model: Model<f32> = Model::init(Architecture::mlp(&[2, 8, 2], Activation::Tanh), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let fe3 = Regime::Scorpio { norm: Norm::L2, eps: 0.2, steps: 3, fd: FdScheme::Fe, h: 1.15, r: 1.05 };
        let out = step_gradients(&model, &fe3, &batch, None, 0).unwrap();
        assert_eq!((out.attack.forward, out.attack.backward), (4, 4));
        assert_eq!(out.train.forward, 1);
        let cd3 = Regime::Scorpio { norm: Norm::L2, eps: 0.2, steps: 3, fd: FdScheme::Cd, h: 1.15, r: 1.05 };
        assert_eq!(step_gradients(&model, &cd3, &batch, None, 0).unwrap().attack.forward, 7);
        let at = Regime::At { norm: Norm::L2, eps: 0.2, steps: 10, step_size: None, random_init: false };
        let out = step_gradients(&model, &at, &batch, None, 0).unwrap();
        assert_eq!((out.attack.forward, out.attack.backward), (10, 10));
        assert_eq!(out.train.forward, 1);
    }

    #[test]
    fn quadratic_regime_treats_the_perturbation_as_a_constant() {
        let data = moons_data();
        let batch: LabeledBatch<f64> = LabeledBatch::new(data.train.x.slice_rows(0, 16).cast(), data.train.y[..16].to_vec()).unwrap();
        let model: Model<f64> =
            Model::init(Architecture::mlp(&[2, 8, 2], Activation::Tanh), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (eps, r) = (0.3, 1.05);
        let regime = Regime::Scorpio { norm: Norm::L2, eps, steps: 3, fd: FdScheme::Fe, h: 1.15, r };
        let inline = step_gradients(&model, &regime, &batch, None, 0).unwrap();

        // Frozen perturbation computed separately, then one tape over [x; x + v].
        let obj = AttackObjective::untargeted(ObjectiveKind::Ul);
        let surface = ModelObjective::new(&model, &batch.y, &obj).unwrap();
        let qcfg = QuadAttackConfig::new(AttackBudget::unclamped(Norm::L2, eps).unwrap(), 3, FdScheme::Fe, 1.15).unwrap();
        let v = crate::attacks::quad_attack_core(&surface, &batch.x, &qcfg, None).unwrap().delta;
        let adv = batch.x.add(&v).unwrap();
        let both = Tensor::concat_rows(&[&batch.x, &adv]).unwrap();
        let b = batch.len() as f64;
        let w: Vec<f64> = (0..16).map(|_| (1.0 - r) / b).chain((0..16).map(|_| r / b)).collect();
        let yy: Vec<usize> = batch.y.iter().chain(&batch.y).copied().collect();
        let frozen = weighted_pass(&model, &both, &yy, &w, false).unwrap();
        for (a, f) in inline.grads.iter().zip(&frozen.params) {
            for (x, y) in a.data().iter().zip(f.data()) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn gradient_penalty_parameter_gradient_matches_finite_differences() {
        // d/dθ [lambda ||grad_x l||²] checked against a central difference in one parameter.
        let data = moons_data();
        let batch: LabeledBatch<f64> = LabeledBatch::new(data.train.x.slice_rows(0, 8).cast(), data.train.y[..8].to_vec()).unwrap();
        let model: Model<f64> =
            Model::init(Architecture::mlp(&[2, 6, 2], Activation::Tanh), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let lambda = 0.7;
        let regime = Regime::GradReg { lambda, fd_step: Some(1e-5) };
        let out = step_gradients(&model, &regime, &batch, None, 0).unwrap();
        let objective = |m: &Model<f64>| {
            let (losses, g) = m.loss_and_input_grad(&batch.x, &batch.y).unwrap();
            let pen: f64 = g.rows_iter().map(|r| lp_norm(r, Norm::L2).powi(2)).sum();
            (losses.iter().sum::<f64>() + lambda * pen) / batch.len() as f64
        };
        for (pi, j) in [(0usize, 3usize), (1, 2), (2, 5)] {
            let e = 1e-6;
            let mut plus = model.clone();
            plus.params_mut()[pi].data_mut()[j] += e;
            let mut minus = model.clone();
            minus.params_mut()[pi].data_mut()[j] -= e;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * e);
            let got = out.grads[pi].data()[j];
            assert!((fd - got).abs() < 1e-4 * (1.0 + fd.abs()), "param {pi}[{j}]: {got} vs {fd}");
        }
    }

    #[test]
    fn cure_penalty_gradient_matches_finite_differences() {
        let data = moons_data();
        let batch: LabeledBatch<f64> = LabeledBatch::new(data.train.x.slice_rows(0, 8).cast(), data.train.y[..8].to_vec()).unwrap();
        let model: Model<f64> =
            Model::init(Architecture::mlp(&[2, 6, 2], Activation::Tanh), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (lambda, h) = (0.5, 0.3);
        let out = step_gradients(&model, &Regime::Cure { lambda, h, fd_step: Some(1e-5) }, &batch, None, 0).unwrap();
        // The direction z is held fixed, as in the regime itself.
        let g0 = model.loss_and_input_grad(&batch.x, &batch.y).unwrap().1;
        let z = sign_direction(&g0).unwrap();
        let xz = batch.x.axpy(h, &z).unwrap();
        let objective = |m: &Model<f64>| {
            let (losses, g) = m.loss_and_input_grad(&batch.x, &batch.y).unwrap();
            let gz = m.loss_and_input_grad(&xz, &batch.y).unwrap().1;
            let d = gz.sub(&g).unwrap();
            (losses.iter().sum::<f64>() + lambda * d.dot(&d)) / batch.len() as f64
        };
        for (pi, j) in [(0usize, 1usize), (2, 4), (3, 1)] {
            let e = 1e-6;
            let mut plus = model.clone();
            plus.params_mut()[pi].data_mut()[j] += e;
            let mut minus = model.clone();
            minus.params_mut()[pi].data_mut()[j] -= e;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * e);
            let got = out.grads[pi].data()[j];
            assert!((fd - got).abs() < 1e-4 * (1.0 + fd.abs()), "param {pi}[{j}]: {got} vs {fd}");
        }
    }

    #[test]
    fn cure_penalty_agrees_with_the_forward_euler_product() {
        let data = moons_data();
        let batch: LabeledBatch<f64> = LabeledBatch::new(data.train.x.slice_rows(0, 8).cast(), data.train.y[..8].to_vec()).unwrap();
        let model: Model<f64> =
            Model::init(Architecture::mlp(&[2, 6, 2], Activation::Tanh), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (h, lambda) = (0.25, 2.0);
        let pen = cure_penalty(&model, &batch, h, lambda).unwrap();
        let obj = AttackObjective::untargeted(ObjectiveKind::Ul);
        let surface = ModelObjective::new(&model, &batch.y, &obj).unwrap();
        let (_, g0) = surface.values_and_grads(&batch.x).unwrap();
        let z = sign_direction(&g0).unwrap();
        let q = crate::attacks::quad_grad(&surface, &batch.x, &z, &g0, FdScheme::Fe, h).unwrap();
        let d = q.sub(&g0).unwrap().scale(h);
        for (i, p) in pen.iter().enumerate() {
            let want = lambda * lp_norm(d.row(i), Norm::L2).powi(2);
            assert!(*p >= 0.0);
            assert!((p - want).abs() < 1e-10 * (1.0 + want), "{p} vs {want}");
        }
    }

    #[test]
    fn resume_is_bit_identical() {
        let data = moons_data();
        let cfg = config(Regime::Scorpio { norm: Norm::L2, eps: 0.2, steps: 1, fd: FdScheme::Fe, h: 0.5, r: 1.05 }, &[2, 8, 2], 3);
        let straight = train(&cfg, &data, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("state.ckpt");
        let mut t = Trainer::new(&cfg, &data, None).unwrap();
        t.run_epoch().unwrap();
        t.state().save(&ckpt).unwrap();
        drop(t);
        let state = TrainState::load(&ckpt).unwrap();
        let resumed = Trainer::resume(&cfg, &data, state).unwrap().run(None, None).unwrap();
        assert_eq!(resumed.last, straight.last);
        assert_eq!(resumed.best, straight.best);
        assert_eq!(metrics_csv(&resumed.metrics), metrics_csv(&straight.metrics));

        let mut other = cfg.clone();
        other.seed += 1;
        assert!(Trainer::resume(&other, &data, TrainState::load(&ckpt).unwrap()).is_err());
    }

    const EXAMPLE: &str = r#"
seed = 1
epochs = 20
batch_size = 128

[optimizer]
lr = 0.01
momentum = 0.9

[model]
kind = "mlp"
widths = [784, 512, 256, 10]
activation = "relu"

[data]
dataset = "mnist"
val_size = 1000

[regime]
kind = "scorpio"
norm = "l2"
eps = 1.5
steps = 3
fd = "fe"
h = 1.15
r = 1.05
"#;

    #[test]
    fn toml_config_parses_strictly() {
        let cfg = TrainConfig::from_toml_str(EXAMPLE).unwrap();
        assert_eq!(cfg.regime, Regime::Scorpio { norm: Norm::L2, eps: 1.5, steps: 3, fd: FdScheme::Fe, h: 1.15, r: 1.05 });
        let err = TrainConfig::from_toml_str(&EXAMPLE.replace("r = 1.05", "r = 1.05\nstrength = 2")).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("strength")), "{err}");
        let err = TrainConfig::from_toml_str(&EXAMPLE.replace("h = 1.15\n", "")).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("`h`")), "{err}");
        let err = TrainConfig::from_toml_str(&EXAMPLE.replace("seed = 1", "seed = 1\nsede = 2")).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("sede")), "{err}");
        let err = TrainConfig::from_toml_str(&EXAMPLE.replace("momentum = 0.9", "momentum = 0.9\nnesterov = true")).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("nesterov")), "{err}");
    }

    #[test]
    fn config_hash_ignores_key_order() {
        let a = TrainConfig::from_toml_str(EXAMPLE).unwrap();
        let reordered = EXAMPLE.replace("seed = 1\nepochs = 20\n", "epochs = 20\nseed = 1\n").replace(
            "lr = 0.01\nmomentum = 0.9",
            "momentum = 0.9\nlr = 0.01",
        );
        let b = TrainConfig::from_toml_str(&reordered).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = 2;
        assert_ne!(a.hash(), c.hash());
    }
}
