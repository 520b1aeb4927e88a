//! Perturbation generators and the pass-count ledger.
//!
//! Optimization cores work against a [`LossSurface`]: any batched function with per-example
//! values and input gradients. Model-level entry points wrap a classifier in a
//! [`ModelObjective`] and summarize the outcome as an [`AttackResult`].

mod pgd;
mod quad;
mod simba;

use std::cell::Cell;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use pgd::{fgsm, pgd, pgd_core, PgdConfig, PgdInit, PgdOutcome, StepRule};
pub use quad::{
    frank_wolfe, quad_attack, quad_attack_core, quad_attack_from_gradient, quad_grad, FdScheme, FwInit, FwOutcome, FwStep, QuadAttackConfig,
};
pub use simba::{simba, SimbaConfig};

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::lp_geometry::{lp_norm, AttackBudget};
use crate::models::{cross_entropy_per_example, margin, predict_from_logits, LabeledBatch, Model};

/// Which quantity the attacker ascends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    /// Cross-entropy of the true label.
    Ul,
    /// Negative cross-entropy of a random target.
    Tl,
    /// Negative margin of the true label.
    Um,
    /// Margin of a random target.
    Tm,
}

impl ObjectiveKind {
    pub fn is_targeted(self) -> bool {
        matches!(self, ObjectiveKind::Tl | ObjectiveKind::Tm)
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Ul => "ul",
            ObjectiveKind::Tl => "tl",
            ObjectiveKind::Um => "um",
            ObjectiveKind::Tm => "tm",
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ul" => Ok(ObjectiveKind::Ul),
            "tl" => Ok(ObjectiveKind::Tl),
            "um" => Ok(ObjectiveKind::Um),
            "tm" => Ok(ObjectiveKind::Tm),
            _ => Err(Error::Config(format!("unknown objective '{s}' (expected ul, tl, um or tm)"))),
        }
    }
}

/// Objective plus the per-example targets for the targeted kinds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackObjective {
    pub kind: ObjectiveKind,
    pub targets: Option<Vec<usize>>,
}

impl AttackObjective {
    pub fn untargeted(kind: ObjectiveKind) -> Self {
        assert!(!kind.is_targeted(), "targeted objectives need labels");
        AttackObjective { kind, targets: None }
    }

    /// Targets are drawn once per example from `{0..K} \ {y}`, seeded by `seed` and the
    /// example's global index `first_index + i`.
    pub fn new(kind: ObjectiveKind, y: &[usize], classes: usize, seed: u64, first_index: usize) -> Self {
        let targets = kind
            .is_targeted()
            .then(|| y.iter().enumerate().map(|(i, &yi)| random_target(seed, first_index + i, yi, classes)).collect());
        AttackObjective { kind, targets }
    }
}

/// Uniform draw from the classes other than `y`.
pub fn random_target(seed: u64, index: usize, y: usize, classes: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let r = rng.gen_range(0..classes - 1);
    if r >= y {
        r + 1
    } else {
        r
    }
}

/// Forward/backward pass counts. A pass is one batched evaluation of the network;
/// `eval_forward` counts the forward-only evaluations used for reporting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassLedger {
    pub forward: u64,
    pub backward: u64,
    pub eval_forward: u64,
}

impl PassLedger {
    pub fn add(&mut self, other: PassLedger) {
        self.forward += other.forward;
        self.backward += other.backward;
        self.eval_forward += other.eval_forward;
    }
}

/// Batched per-example objective with input gradients.
pub trait LossSurface<T: Scalar> {
    /// Objective value for each row of `x`.
    fn values(&self, x: &Tensor<T>) -> Result<Vec<f64>>;

    /// Values and `d value_i / d x_i` for each row.
    fn values_and_grads(&self, x: &Tensor<T>) -> Result<(Vec<f64>, Tensor<T>)>;

    /// Evaluate several same-shape blocks; implementations may run them as one batch.
    fn values_and_grads_stacked(&self, xs: &[&Tensor<T>]) -> Result<Vec<(Vec<f64>, Tensor<T>)>> {
        xs.iter().map(|x| self.values_and_grads(x)).collect()
    }
}

/// Counts every pass that goes through it: gradient evaluations charge one forward and one
/// backward per block, value evaluations charge `eval_forward`.
pub struct Metered<'a, S: ?Sized> {
    inner: &'a S,
    ledger: Cell<PassLedger>,
}

impl<'a, S: ?Sized> Metered<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Metered { inner, ledger: Cell::new(PassLedger::default()) }
    }

    pub fn ledger(&self) -> PassLedger {
        self.ledger.get()
    }

    fn charge(&self, grads: u64, evals: u64) {
        let mut l = self.ledger.get();
        l.forward += grads;
        l.backward += grads;
        l.eval_forward += evals;
        self.ledger.set(l);
    }
}

impl<'a, T: Scalar, S: LossSurface<T> + ?Sized> LossSurface<T> for Metered<'a, S> {
    fn values(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        self.charge(0, 1);
        self.inner.values(x)
    }

    fn values_and_grads(&self, x: &Tensor<T>) -> Result<(Vec<f64>, Tensor<T>)> {
        self.charge(1, 0);
        self.inner.values_and_grads(x)
    }

    fn values_and_grads_stacked(&self, xs: &[&Tensor<T>]) -> Result<Vec<(Vec<f64>, Tensor<T>)>> {
        self.charge(xs.len() as u64, 0);
        self.inner.values_and_grads_stacked(xs)
    }
}

/// Attack objective of a classifier on fixed labels.
pub struct ModelObjective<'a, T: Scalar> {
    pub model: &'a Model<T>,
    pub y: &'a [usize],
    pub objective: &'a AttackObjective,
}

impl<'a, T: Scalar> ModelObjective<'a, T> {
    pub fn new(model: &'a Model<T>, y: &'a [usize], objective: &'a AttackObjective) -> Result<Self> {
        if objective.kind.is_targeted() {
            match &objective.targets {
                Some(t) if t.len() == y.len() => {
                    if t.iter().zip(y).any(|(a, b)| a == b) {
                        return Err(Error::InvalidArgument("target equals true label".into()));
                    }
                }
                _ => return Err(Error::InvalidArgument("targeted objective needs one target per example".into())),
            }
        }
        Ok(ModelObjective { model, y, objective })
    }

    /// Labels and signs for `blocks` stacked copies of the batch.
    fn labels(&self, blocks: usize) -> (Vec<usize>, T) {
        let base: &[usize] = match self.objective.kind {
            ObjectiveKind::Ul | ObjectiveKind::Um => self.y,
            ObjectiveKind::Tl | ObjectiveKind::Tm => self.objective.targets.as_deref().unwrap(),
        };
        let sign = match self.objective.kind {
            ObjectiveKind::Ul | ObjectiveKind::Tm => T::one(),
            ObjectiveKind::Tl | ObjectiveKind::Um => -T::one(),
        };
        (base.iter().copied().cycle().take(base.len() * blocks).collect(), sign)
    }

    fn values_from_logits(&self, logits: &Tensor<T>, labels: &[usize], sign: T) -> Result<Vec<f64>> {
        let raw = match self.objective.kind {
            ObjectiveKind::Ul | ObjectiveKind::Tl => cross_entropy_per_example(logits, labels)?,
            ObjectiveKind::Um | ObjectiveKind::Tm => margin(logits, labels)?,
        };
        Ok(raw.into_iter().map(|v| (v * sign).as_f64()).collect())
    }

    fn check_rows(&self, x: &Tensor<T>) -> Result<()> {
        if x.rows() != self.y.len() {
            return Err(Error::shape("objective", format!("{} rows for {} labels", x.rows(), self.y.len())));
        }
        Ok(())
    }
}

impl<'a, T: Scalar> LossSurface<T> for ModelObjective<'a, T> {
    fn values(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        self.check_rows(x)?;
        let (labels, sign) = self.labels(1);
        self.values_from_logits(&self.model.logits(x)?, &labels, sign)
    }

    fn values_and_grads(&self, x: &Tensor<T>) -> Result<(Vec<f64>, Tensor<T>)> {
        Ok(self.values_and_grads_stacked(&[x])?.remove(0))
    }

    fn values_and_grads_stacked(&self, xs: &[&Tensor<T>]) -> Result<Vec<(Vec<f64>, Tensor<T>)>> {
        for x in xs {
            self.check_rows(x)?;
        }
        let joined;
        let input = if xs.len() == 1 {
            xs[0]
        } else {
            joined = Tensor::concat_rows(xs)?;
            &joined
        };
        let (labels, sign) = self.labels(xs.len());
        let weights = vec![sign; labels.len()];
        let mut tape = Tape::new();
        let xv = tape.leaf(input.clone())?;
        let fwd = self.model.record(&mut tape, xv)?;
        let loss = match self.objective.kind {
            ObjectiveKind::Ul | ObjectiveKind::Tl => tape.cross_entropy(fwd.logits, &labels, &weights)?,
            ObjectiveKind::Um | ObjectiveKind::Tm => tape.margin(fwd.logits, &labels, &weights)?,
        };
        let values = self.values_from_logits(tape.value(fwd.logits), &labels, sign)?;
        let grad = tape.backward(loss, &[xv])?.into_tensors().remove(0);
        let b = self.y.len();
        Ok((0..xs.len()).map(|k| (values[k * b..(k + 1) * b].to_vec(), grad.slice_rows(k * b, (k + 1) * b))).collect())
    }
}

/// `l(x) = c·x + ½ xᵀ A x` applied to every row; a test surface whose gradient is linear.
#[derive(Clone, Debug)]
pub struct QuadraticSurface {
    pub c: Vec<f64>,
    /// Row-major `d x d`, assumed symmetric.
    pub a: Vec<f64>,
}

impl QuadraticSurface {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn eval_row(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim();
        let ax: Vec<f64> = (0..d).map(|i| (0..d).map(|j| self.a[i * d + j] * x[j]).sum()).collect();
        let v = (0..d).map(|i| self.c[i] * x[i] + 0.5 * x[i] * ax[i]).sum();
        let g = (0..d).map(|i| self.c[i] + ax[i]).collect();
        (v, g)
    }
}

impl<T: Scalar> LossSurface<T> for QuadraticSurface {
    fn values(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        Ok(self.values_and_grads(x)?.0)
    }

    fn values_and_grads(&self, x: &Tensor<T>) -> Result<(Vec<f64>, Tensor<T>)> {
        if x.row_len() != self.dim() {
            return Err(Error::shape("quadratic surface", format!("row length {} vs {}", x.row_len(), self.dim())));
        }
        let mut values = Vec::with_capacity(x.rows());
        let mut grad = Vec::with_capacity(x.len());
        for row in x.rows_iter() {
            let r: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let (v, g) = self.eval_row(&r);
            values.push(v);
            grad.extend(g.into_iter().map(T::of));
        }
        Ok((values, Tensor::new(x.shape().to_vec(), grad)?))
    }
}

/// Per-example outcome of an attack on a labeled batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult<T: Scalar = f32> {
    pub attack: String,
    pub budget: AttackBudget,
    /// Perturbation before clamping to the input box.
    pub delta: Tensor<T>,
    /// `clamp(x + delta)`.
    pub adv_x: Tensor<T>,
    pub labels: Vec<usize>,
    pub targets: Option<Vec<usize>>,
    pub pred: Vec<usize>,
    /// Prediction on `adv_x` differs from the true label.
    pub success: Vec<bool>,
    pub degenerate: Vec<bool>,
    /// Cross-entropy and margin of the true label at `x`, at `x + delta` and at `adv_x`.
    pub pre_loss: Vec<f64>,
    pub post_loss_unclamped: Vec<f64>,
    pub post_loss: Vec<f64>,
    pub pre_margin: Vec<f64>,
    pub post_margin: Vec<f64>,
    pub ledger: PassLedger,
}

impl<T: Scalar> AttackResult<T> {
    /// Evaluate `delta` on the model and assemble the result. Charges three evaluation
    /// forwards (clean, unclamped, clamped).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        attack: String,
        model: &Model<T>,
        batch: &LabeledBatch<T>,
        budget: &AttackBudget,
        delta: Tensor<T>,
        targets: Option<Vec<usize>>,
        degenerate: Vec<bool>,
        mut ledger: PassLedger,
    ) -> Result<Self> {
        let clean = model.logits(&batch.x)?;
        let raw_x = batch.x.add(&delta)?;
        let unclamped = model.logits(&raw_x)?;
        let adv_x = match budget.clamp_box {
            Some((lo, hi)) => raw_x.clamp(T::of(lo), T::of(hi)),
            None => raw_x,
        };
        let adv = model.logits(&adv_x)?;
        ledger.eval_forward += 3;
        let pred = predict_from_logits(&adv);
        let f = |v: Vec<T>| v.into_iter().map(|a| a.as_f64()).collect::<Vec<f64>>();
        Ok(AttackResult {
            attack,
            budget: *budget,
            success: pred.iter().zip(&batch.y).map(|(p, y)| p != y).collect(),
            pred,
            labels: batch.y.clone(),
            targets,
            degenerate,
            pre_loss: f(cross_entropy_per_example(&clean, &batch.y)?),
            post_loss_unclamped: f(cross_entropy_per_example(&unclamped, &batch.y)?),
            post_loss: f(cross_entropy_per_example(&adv, &batch.y)?),
            pre_margin: f(margin(&clean, &batch.y)?),
            post_margin: f(margin(&adv, &batch.y)?),
            delta,
            adv_x,
            ledger,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Percentage of examples still classified correctly after the attack.
    pub fn adversarial_accuracy(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        100.0 * self.success.iter().filter(|s| !**s).count() as f64 / self.len() as f64
    }

    pub fn mean_margin(&self) -> f64 {
        self.post_margin.iter().sum::<f64>() / self.len().max(1) as f64
    }

    /// Join results from consecutive batches of the same attack.
    pub fn concat(parts: Vec<AttackResult<T>>) -> Result<Self> {
        let mut it = parts.into_iter();
        let mut acc = it.next().ok_or_else(|| Error::InvalidArgument("no attack results to join".into()))?;
        for p in it {
            acc.delta = Tensor::concat_rows(&[&acc.delta, &p.delta])?;
            acc.adv_x = Tensor::concat_rows(&[&acc.adv_x, &p.adv_x])?;
            acc.labels.extend(p.labels);
            acc.targets = match (acc.targets.take(), p.targets) {
                (Some(mut a), Some(b)) => {
                    a.extend(b);
                    Some(a)
                }
                _ => None,
            };
            acc.pred.extend(p.pred);
            acc.success.extend(p.success);
            acc.degenerate.extend(p.degenerate);
            acc.pre_loss.extend(p.pre_loss);
            acc.post_loss_unclamped.extend(p.post_loss_unclamped);
            acc.post_loss.extend(p.post_loss);
            acc.pre_margin.extend(p.pre_margin);
            acc.post_margin.extend(p.post_margin);
            acc.ledger.add(p.ledger);
        }
        Ok(acc)
    }

    /// One JSON record per example, including the perturbation.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for i in 0..self.len() {
            let delta: Vec<f64> = self.delta.row(i).iter().map(|v| v.as_f64()).collect();
            let rec = serde_json::json!({
                "index": i,
                "attack": self.attack,
                "norm": self.budget.norm,
                "eps": self.budget.eps,
                "label": self.labels[i],
                "target": self.targets.as_ref().map(|t| t[i]),
                "pred": self.pred[i],
                "success": self.success[i],
                "degenerate": self.degenerate[i],
                "pre_loss": self.pre_loss[i],
                "post_loss": self.post_loss[i],
                "post_loss_unclamped": self.post_loss_unclamped[i],
                "pre_margin": self.pre_margin[i],
                "post_margin": self.post_margin[i],
                "delta_norm": lp_norm(&delta, self.budget.norm),
                "delta": delta,
            });
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io("writing attack records", e))?;
        }
        Ok(())
    }
}

/// Attack selection for dataset-level runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "attack", rename_all = "lowercase")]
pub enum AttackSpec {
    Fgsm { budget: AttackBudget },
    Pgd { objective: ObjectiveKind, cfg: PgdConfig },
    Quad { objective: ObjectiveKind, cfg: QuadAttackConfig },
    Simba { cfg: SimbaConfig },
}

impl AttackSpec {
    pub fn budget(&self) -> AttackBudget {
        match self {
            AttackSpec::Fgsm { budget } => *budget,
            AttackSpec::Pgd { cfg, .. } => cfg.budget,
            AttackSpec::Quad { cfg, .. } => cfg.budget,
            AttackSpec::Simba { cfg } => AttackBudget { norm: crate::lp_geometry::Norm::Linf, eps: cfg.step, clamp_box: cfg.clamp_box },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AttackSpec::Fgsm { .. } => "fgsm",
            AttackSpec::Pgd { .. } => "pgd",
            AttackSpec::Quad { .. } => "quad",
            AttackSpec::Simba { .. } => "simba",
        }
    }

    pub fn objective(&self) -> ObjectiveKind {
        match self {
            AttackSpec::Pgd { objective, .. } | AttackSpec::Quad { objective, .. } => *objective,
            _ => ObjectiveKind::Ul,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            AttackSpec::Fgsm { .. } => 1,
            AttackSpec::Pgd { cfg, .. } => cfg.steps,
            AttackSpec::Quad { cfg, .. } => cfg.steps,
            AttackSpec::Simba { cfg } => cfg.iterations,
        }
    }

    /// Gradient passes one batch must spend, or `None` for gradient-free attacks.
    pub fn expected_passes(&self) -> Option<u64> {
        match self {
            AttackSpec::Fgsm { .. } => Some(1),
            AttackSpec::Pgd { cfg, .. } => Some(cfg.steps as u64),
            AttackSpec::Quad { cfg, .. } => Some(cfg.expected_passes()),
            AttackSpec::Simba { .. } => None,
        }
    }
}

/// Run `spec` over `data` in chunks of `chunk` examples. Targets for TL/TM are seeded by
/// `target_seed` and the example's index in `data`.
pub fn run_attack<T: Scalar>(
    model: &Model<T>,
    data: &LabeledBatch<T>,
    spec: &AttackSpec,
    target_seed: u64,
    chunk: usize,
) -> Result<AttackResult<T>> {
    let chunk = chunk.max(1);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        let batch = data.slice(start, end);
        let objective = AttackObjective::new(spec.objective(), &batch.y, model.num_classes(), target_seed, start);
        let r = match spec {
            AttackSpec::Fgsm { budget } => fgsm(model, &batch, budget)?,
            AttackSpec::Pgd { cfg, .. } => pgd(model, &batch, &objective, cfg)?,
            AttackSpec::Quad { cfg, .. } => quad_attack(model, &batch, &objective, cfg)?,
            AttackSpec::Simba { cfg } => {
                let mut c = cfg.clone();
                c.seed = cfg.seed.wrapping_add(start as u64);
                simba(model, &batch, &c)?
            }
        };
        parts.push(r);
        start = end;
    }
    AttackResult::concat(parts)
}

/// Row-wise map over a batched tensor.
pub(crate) fn map_rows<T: Scalar>(t: &Tensor<T>, mut f: impl FnMut(usize, &[T]) -> Vec<T>) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(t.len());
    for (i, row) in t.rows_iter().enumerate() {
        data.extend(f(i, row));
    }
    Tensor::new(t.shape().to_vec(), data)
}
