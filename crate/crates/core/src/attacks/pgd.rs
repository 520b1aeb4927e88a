use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{map_rows, AttackObjective, AttackResult, LossSurface, Metered, ModelObjective, ObjectiveKind, PassLedger};
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::lp_geometry::{lp_norm, project_ball, AttackBudget, Norm};
use crate::models::{LabeledBatch, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PgdInit {
    Zero,
    /// Uniform in the ball.
    Random,
}

/// Direction taken from the objective gradient at each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// `sgn(g)` with `sgn(0) = +1`.
    Sign,
    /// `g / ||g||_2`.
    Normalized,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub steps: usize,
    pub step_size: f64,
    pub budget: AttackBudget,
    pub init: PgdInit,
    pub step_rule: StepRule,
    /// Return the iterate with the highest objective instead of the last one.
    pub keep_best: bool,
    pub seed: u64,
}

impl PgdConfig {
    /// Defaults: `alpha = 2.5 eps / N` with normalized steps for L2, `alpha = eps / 4` with
    /// sign steps for Linf; zero init; best iterate kept.
    pub fn new(budget: AttackBudget, steps: usize) -> Result<Self> {
        let (step_size, step_rule) = match budget.norm {
            Norm::L2 => (2.5 * budget.eps / steps.max(1) as f64, StepRule::Normalized),
            Norm::Linf => (budget.eps / 4.0, StepRule::Sign),
            other => return Err(Error::UnsupportedNorm { op: "pgd", norm: other.to_string() }),
        };
        let cfg = PgdConfig { steps, step_size, budget, init: PgdInit::Zero, step_rule, keep_best: true, seed: 0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if !matches!(self.budget.norm, Norm::L2 | Norm::Linf) {
            return Err(Error::UnsupportedNorm { op: "pgd", norm: self.budget.norm.to_string() });
        }
        if self.steps == 0 {
            return Err(Error::Config("pgd needs at least one step".into()));
        }
        let ok = self.step_size.is_finite() && (self.step_size > 0.0 || (self.step_size == 0.0 && self.budget.eps == 0.0));
        if !ok {
            return Err(Error::Config(format!("pgd step size must be > 0, got {}", self.step_size)));
        }
        Ok(())
    }
}

pub struct PgdOutcome<T: Scalar> {
    pub delta: Tensor<T>,
    /// Objective value at the returned iterate.
    pub values: Vec<f64>,
    pub ledger: PassLedger,
}

/// Projected gradient ascent on `surface` around `x`. The observer sees the objective values
/// of iterate `k` for `k = 0..=steps`.
pub fn pgd_core<T: Scalar, S: LossSurface<T> + ?Sized>(
    surface: &S,
    x: &Tensor<T>,
    cfg: &PgdConfig,
    mut observer: Option<&mut dyn FnMut(usize, &[f64])>,
) -> Result<PgdOutcome<T>> {
    cfg.validate()?;
    let meter = Metered::new(surface);
    let b = &cfg.budget;
    let mut delta = match cfg.init {
        PgdInit::Zero => Tensor::zeros(x.shape()),
        PgdInit::Random => random_in_ball(x, b, cfg.seed)?,
    };
    let mut best = delta.clone();
    let mut best_val = vec![f64::NEG_INFINITY; x.rows()];
    let keep = |delta: &Tensor<T>, vals: &[f64], best: &mut Tensor<T>, best_val: &mut [f64]| {
        for (i, &v) in vals.iter().enumerate() {
            if v > best_val[i] {
                best_val[i] = v;
                best.row_mut(i).copy_from_slice(delta.row(i));
            }
        }
    };
    let alpha = cfg.step_size;
    for k in 0..cfg.steps {
        let (vals, g) = meter.values_and_grads(&x.add(&delta)?)?;
        if let Some(obs) = observer.as_deref_mut() {
            obs(k, &vals);
        }
        keep(&delta, &vals, &mut best, &mut best_val);
        delta = map_rows(&delta, |i, d| {
            let gi = g.row(i);
            let dir: Vec<f64> = match cfg.step_rule {
                StepRule::Sign => gi.iter().map(|v| if v.as_f64() < 0.0 { -1.0 } else { 1.0 }).collect(),
                StepRule::Normalized => {
                    let n = lp_norm(gi, Norm::L2);
                    gi.iter().map(|v| if n > 0.0 { v.as_f64() / n } else { 0.0 }).collect()
                }
                StepRule::Raw => gi.iter().map(|v| v.as_f64()).collect(),
            };
            let z: Vec<T> = d.iter().zip(&dir).map(|(&di, &s)| T::of(di.as_f64() + alpha * s)).collect();
            project_ball(&z, b).expect("norm validated")
        })?;
    }
    let vals = meter.values(&x.add(&delta)?)?;
    if let Some(obs) = observer.as_deref_mut() {
        obs(cfg.steps, &vals);
    }
    if cfg.keep_best {
        keep(&delta, &vals, &mut best, &mut best_val);
        Ok(PgdOutcome { delta: best, values: best_val, ledger: meter.ledger() })
    } else {
        Ok(PgdOutcome { delta, values: vals, ledger: meter.ledger() })
    }
}

fn random_in_ball<T: Scalar>(x: &Tensor<T>, b: &AttackBudget, seed: u64) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = x.row_len();
    map_rows(x, |_, _| match b.norm {
        Norm::Linf => (0..d).map(|_| T::of(rng.gen_range(-1.0..=1.0) * b.eps)).collect(),
        _ => {
            let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = lp_norm(&dir, Norm::L2).max(f64::MIN_POSITIVE);
            let r = b.eps * rng.gen_range(0.0f64..1.0).powf(1.0 / d as f64);
            dir.iter().map(|v| T::of(v * r / n)).collect()
        }
    })
}

/// Single signed-gradient step on the cross-entropy: `delta = eps sgn(grad)`.
pub fn fgsm<T: Scalar>(model: &Model<T>, batch: &LabeledBatch<T>, budget: &AttackBudget) -> Result<AttackResult<T>> {
    if budget.norm != Norm::Linf {
        return Err(Error::UnsupportedNorm { op: "fgsm", norm: budget.norm.to_string() });
    }
    budget.validate()?;
    let objective = AttackObjective::untargeted(ObjectiveKind::Ul);
    let surface = ModelObjective::new(model, &batch.y, &objective)?;
    let meter = Metered::new(&surface);
    let (_, g) = meter.values_and_grads(&batch.x)?;
    // Signed gradient with sgn(0) = +1, also for an identically zero gradient.
    let e = T::of(budget.eps);
    let delta = g.map(|v| if v < T::zero() { -e } else { e });
    AttackResult::assemble("fgsm".into(), model, batch, budget, delta, None, vec![false; batch.len()], meter.ledger())
}

/// PGD against one of the four objectives.
pub fn pgd<T: Scalar>(
    model: &Model<T>,
    batch: &LabeledBatch<T>,
    objective: &AttackObjective,
    cfg: &PgdConfig,
) -> Result<AttackResult<T>> {
    let surface = ModelObjective::new(model, &batch.y, objective)?;
    let out = pgd_core(&surface, &batch.x, cfg, None)?;
    AttackResult::assemble(
        format!("pgd{}-{}", cfg.steps, objective.kind.name()),
        model,
        batch,
        &cfg.budget,
        out.delta,
        objective.targets.clone(),
        vec![false; batch.len()],
        out.ledger,
    )
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::attacks::QuadraticSurface;
    use crate::models::{Activation, Architecture};

    #[test]
    fn linear_objective_reaches_the_boundary_in_one_step() {
        let c = vec![3.0, -4.0, 12.0];
        let surf = QuadraticSurface { c: c.clone(), a: vec![0.0; 9] };
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let mut cfg = PgdConfig::new(AttackBudget::unclamped(Norm::L2, 0.5).unwrap(), 1).unwrap();
        cfg.step_size = 0.7;
        let out = pgd_core(&surf, &x, &cfg, None).unwrap();
        for (d, ci) in out.delta.data().iter().zip(&c) {
            assert!((d - 0.5 * ci / 13.0).abs() < 1e-12);
        }
        assert_eq!(out.ledger, PassLedger { forward: 1, backward: 1, eval_forward: 1 });
    }

    #[test]
    fn zero_budget_gives_zero_perturbation() {
        let surf = QuadraticSurface { c: vec![1.0, 1.0], a: vec![1.0, 0.0, 0.0, 1.0] };
        let x = Tensor::<f64>::full(&[2, 2], 0.3);
        for norm in [Norm::L2, Norm::Linf] {
            let cfg = PgdConfig::new(AttackBudget::unclamped(norm, 0.0).unwrap(), 5).unwrap();
            let out = pgd_core(&surf, &x, &cfg, None).unwrap();
            assert!(out.delta.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ledger_counts_one_pass_per_step() {
        let surf = QuadraticSurface { c: vec![1.0, -1.0], a: vec![0.5, 0.0, 0.0, 0.5] };
        let x = Tensor::<f64>::zeros(&[4, 2]);
        for steps in [1, 3, 10, 40] {
            let cfg = PgdConfig::new(AttackBudget::unclamped(Norm::Linf, 0.1).unwrap(), steps).unwrap();
            let out = pgd_core(&surf, &x, &cfg, None).unwrap();
            assert_eq!(out.ledger.forward, steps as u64);
            assert_eq!(out.ledger.backward, steps as u64);
            assert_eq!(out.ledger.eval_forward, 1);
        }
    }

    #[test]
    fn projection_based_pgd_rejects_other_norms() {
        let b = AttackBudget::unclamped(Norm::Lp(1.5), 1.0).unwrap();
        assert!(matches!(PgdConfig::new(b, 10), Err(Error::UnsupportedNorm { .. })));
    }

    #[test]
    fn random_init_stays_in_the_ball() {
        let x = Tensor::<f64>::zeros(&[20, 9]);
        for norm in [Norm::L2, Norm::Linf] {
            let b = AttackBudget::unclamped(norm, 0.4).unwrap();
            let d = random_in_ball(&x, &b, 3).unwrap();
            for row in d.rows_iter() {
                assert!(b.contains(row, 1e-12));
            }
        }
    }

    #[test]
    fn margin_descent_is_mostly_monotone_on_a_smooth_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model: Model<f64> = Model::init(Architecture::mlp(&[6, 16, 4], Activation::Tanh), &mut rng).unwrap();
        let x = Tensor::new(vec![64, 6], (0..384).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let y = model.predict(&x).unwrap();
        let eps = 0.5;
        let mut cfg = PgdConfig::new(AttackBudget::unclamped(Norm::L2, eps).unwrap(), 10).unwrap();
        cfg.step_size = eps / 5.0;
        let obj = AttackObjective::untargeted(ObjectiveKind::Um);
        let surface = ModelObjective::new(&model, &y, &obj).unwrap();
        let mut trace: Vec<Vec<f64>> = Vec::new();
        let mut obs = |_: usize, v: &[f64]| trace.push(v.to_vec());
        pgd_core(&surface, &x, &cfg, Some(&mut obs)).unwrap();
        let monotone = (0..64).filter(|&i| trace.windows(2).all(|w| w[1][i] >= w[0][i])).count();
        assert!(monotone as f64 >= 0.9 * 64.0, "{monotone}/64 monotone");
    }

    #[test]
    fn fgsm_matches_the_linear_closed_form() {
        let w = Tensor::new(vec![3, 2], vec![1.0f64, -1.0, -2.0, 2.0, 0.0, 0.0]).unwrap();
        let model = Model::from_params(Architecture::mlp(&[3, 2], Activation::Relu), vec![w, Tensor::zeros(&[2])])
            .unwrap();
        let batch = LabeledBatch::new(Tensor::from_rows(&[vec![0.5, 0.5, 0.5]]).unwrap(), vec![0]).unwrap();
        let b = AttackBudget::new(Norm::Linf, 0.1).unwrap();
        let r = fgsm(&model, &batch, &b).unwrap();
        // d loss / d x = (p - e_y)ᵀ Wᵀ; with p_0 < 1 the sign is that of (w_1 - w_0).
        assert_eq!(r.delta.data(), &[-0.1, 0.1, 0.1]);
        assert_eq!(r.ledger.forward, 1);
        assert_eq!(r.ledger.backward, 1);

        let zero = fgsm(&model, &batch, &AttackBudget::new(Norm::Linf, 0.0).unwrap()).unwrap();
        assert!(zero.delta.data().iter().all(|&v| v == 0.0));
        assert_eq!(zero.pred, model.predict(&batch.x).unwrap());

        let flat = Model::from_params(
            Architecture::mlp(&[3, 2], Activation::Relu),
            vec![Tensor::zeros(&[3, 2]), Tensor::zeros(&[2])],
        )
        .unwrap();
        let r = fgsm(&flat, &batch, &b).unwrap();
        assert_eq!(r.delta.data(), &[0.1, 0.1, 0.1]);
    }
}
