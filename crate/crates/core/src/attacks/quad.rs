//! Quadratic-approximate attack: Frank-Wolfe ascent on `Q(v) = g·v + ½ vᵀHv` where the
//! Hessian-vector products come from finite differences of input gradients.

use serde::{Deserialize, Serialize};

use super::{map_rows, AttackObjective, AttackResult, LossSurface, Metered, ModelObjective, PassLedger};
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::lp_geometry::{fw_oracle, lp_norm, AttackBudget};
use crate::models::{LabeledBatch, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FdScheme {
    /// Forward Euler: one extra gradient per step.
    Fe,
    /// Central difference: two extra gradients per step.
    Cd,
}

impl FdScheme {
    pub fn name(self) -> &'static str {
        match self {
            FdScheme::Fe => "fe",
            FdScheme::Cd => "cd",
        }
    }
}

impl std::str::FromStr for FdScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fe" => Ok(FdScheme::Fe),
            "cd" => Ok(FdScheme::Cd),
            _ => Err(Error::Config(format!("unknown finite-difference scheme '{s}' (expected fe or cd)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FwInit {
    /// `v0 = eps g / ||g||_p`.
    Normalized,
    /// `v0 = g`; must already be feasible.
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadAttackConfig {
    pub steps: usize,
    pub scheme: FdScheme,
    pub h: f64,
    pub budget: AttackBudget,
    pub init: FwInit,
}

impl QuadAttackConfig {
    pub fn new(budget: AttackBudget, steps: usize, scheme: FdScheme, h: f64) -> Result<Self> {
        let cfg = QuadAttackConfig { steps, scheme, h, budget, init: FwInit::Normalized };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("quadratic attack needs at least one Frank-Wolfe step".into()));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Config(format!("finite-difference step h must be > 0, got {}", self.h)));
        }
        Ok(())
    }

    /// Gradient passes per batch: `N + 1` for FE, `2N + 1` for CD.
    pub fn expected_passes(&self) -> u64 {
        match self.scheme {
            FdScheme::Fe => self.steps as u64 + 1,
            FdScheme::Cd => 2 * self.steps as u64 + 1,
        }
    }
}

/// `grad Q(v) = g0 + Hv` with `Hv` from finite differences of `surface`'s gradient.
/// `g0` is the cached gradient at `x` and is recycled rather than recomputed.
pub fn quad_grad<T: Scalar, S: LossSurface<T> + ?Sized>(
    surface: &S,
    x: &Tensor<T>,
    v: &Tensor<T>,
    g0: &Tensor<T>,
    scheme: FdScheme,
    h: f64,
) -> Result<Tensor<T>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step h must be > 0, got {h}")));
    }
    x.ensure_same_shape(v, "quad_grad")?;
    x.ensure_same_shape(g0, "quad_grad")?;
    let ht = T::of(h);
    match scheme {
        FdScheme::Fe => {
            let (_, g1) = surface.values_and_grads(&x.axpy(ht, v)?)?;
            g0.zip_map(&g1, |a, b| T::of(a.as_f64() + (b.as_f64() - a.as_f64()) / h))
        }
        FdScheme::Cd => {
            let plus = x.axpy(ht, v)?;
            let minus = x.axpy(-ht, v)?;
            let mut out = surface.values_and_grads_stacked(&[&plus, &minus])?;
            let (_, gm) = out.pop().unwrap();
            let (_, gp) = out.pop().unwrap();
            let diff = gp.zip_map(&gm, |a, b| T::of((a.as_f64() - b.as_f64()) / (2.0 * h)))?;
            g0.zip_map(&diff, |a, d| T::of(a.as_f64() + d.as_f64()))
        }
    }
}

/// One Frank-Wolfe iteration as seen by an observer.
pub struct FwStep<'a, T: Scalar> {
    pub k: usize,
    /// Iterate before the update.
    pub v: &'a Tensor<T>,
    pub grad_q: &'a Tensor<T>,
    pub s: &'a Tensor<T>,
    pub gamma: f64,
}

/// Frank-Wolfe over `B_p(eps)` row by row: `s = oracle(grad_q(v))`, `v <- v + gamma (s - v)`
/// with `gamma = 2 / (2 + k)`. A row whose `grad_q` vanishes keeps its iterate.
pub fn frank_wolfe<T: Scalar>(
    v0: Tensor<T>,
    budget: &AttackBudget,
    steps: usize,
    mut grad_q: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    mut observer: Option<&mut dyn FnMut(&FwStep<'_, T>)>,
) -> Result<Tensor<T>> {
    let mut v = v0;
    for k in 0..steps {
        let gq = grad_q(&v)?;
        let s = map_rows(&gq, |i, row| {
            let o = fw_oracle(row, budget);
            if o.degenerate {
                v.row(i).to_vec()
            } else {
                o.s
            }
        })?;
        let gamma = 2.0 / (2.0 + k as f64);
        if let Some(obs) = observer.as_deref_mut() {
            obs(&FwStep { k, v: &v, grad_q: &gq, s: &s, gamma });
        }
        v = v.zip_map(&s, |a, b| {
            let (a, b) = (a.as_f64(), b.as_f64());
            T::of(a + gamma * (b - a))
        })?;
    }
    Ok(v)
}

pub struct FwOutcome<T: Scalar> {
    pub delta: Tensor<T>,
    /// Rows whose input gradient was identically zero; their perturbation is zero.
    pub degenerate: Vec<bool>,
    pub ledger: PassLedger,
}

/// Quadratic-approximate attack on an arbitrary surface.
pub fn quad_attack_core<T: Scalar, S: LossSurface<T> + ?Sized>(
    surface: &S,
    x: &Tensor<T>,
    cfg: &QuadAttackConfig,
    observer: Option<&mut dyn FnMut(&FwStep<'_, T>)>,
) -> Result<FwOutcome<T>> {
    cfg.validate()?;
    let meter = Metered::new(surface);
    let (_, g0) = meter.values_and_grads(x)?;
    let mut out = quad_attack_from_gradient(&meter, x, &g0, cfg, observer)?;
    out.ledger = meter.ledger();
    Ok(out)
}

/// Same as [`quad_attack_core`] with the base gradient `g0 = grad l(x)` supplied by the caller;
/// the ledger then counts only the finite-difference passes.
pub fn quad_attack_from_gradient<T: Scalar, S: LossSurface<T> + ?Sized>(
    surface: &S,
    x: &Tensor<T>,
    g0: &Tensor<T>,
    cfg: &QuadAttackConfig,
    observer: Option<&mut dyn FnMut(&FwStep<'_, T>)>,
) -> Result<FwOutcome<T>> {
    cfg.validate()?;
    x.ensure_same_shape(g0, "quad_attack")?;
    let meter = Metered::new(surface);
    let b = &cfg.budget;
    let degenerate: Vec<bool> = g0.rows_iter().map(|r| r.iter().all(|v| *v == T::zero())).collect();
    let v0 = match cfg.init {
        FwInit::Normalized => map_rows(&g0, |i, row| {
            if degenerate[i] {
                return vec![T::zero(); row.len()];
            }
            let n = lp_norm(row, b.norm);
            row.iter().map(|&g| T::of(b.eps * g.as_f64() / n)).collect()
        })?,
        FwInit::Gradient => {
            if let Some(i) = (0..g0.rows()).find(|&i| !b.contains(g0.row(i), 1e-12)) {
                return Err(Error::InvalidArgument(format!(
                    "gradient initialization infeasible for row {i}: ||g||_p = {} > eps = {}",
                    lp_norm(g0.row(i), b.norm),
                    b.eps
                )));
            }
            g0.clone()
        }
    };
    let mut delta = frank_wolfe(v0, b, cfg.steps, |v| quad_grad(&meter, x, v, g0, cfg.scheme, cfg.h), observer)?;
    for (i, &d) in degenerate.iter().enumerate() {
        if d {
            delta.row_mut(i).fill(T::zero());
        }
    }
    Ok(FwOutcome { delta, degenerate, ledger: meter.ledger() })
}

/// Quadratic-approximate attack on a classifier.
pub fn quad_attack<T: Scalar>(
    model: &Model<T>,
    batch: &LabeledBatch<T>,
    objective: &AttackObjective,
    cfg: &QuadAttackConfig,
) -> Result<AttackResult<T>> {
    let surface = ModelObjective::new(model, &batch.y, objective)?;
    let out = quad_attack_core(&surface, &batch.x, cfg, None)?;
    AttackResult::assemble(
        format!("quad-{}{}-{}", cfg.scheme.name(), cfg.steps, objective.kind.name()),
        model,
        batch,
        &cfg.budget,
        out.delta,
        objective.targets.clone(),
        out.degenerate,
        out.ledger,
    )
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::attacks::{ObjectiveKind, QuadraticSurface};
    use crate::lp_geometry::Norm;
    use crate::models::{Activation, Architecture};

    fn q_value(g: &[f64], h: &[f64], v: &[f64]) -> f64 {
        let d = g.len();
        let hv: Vec<f64> = (0..d).map(|i| (0..d).map(|j| h[i * d + j] * v[j]).sum()).collect();
        (0..d).map(|i| g[i] * v[i] + 0.5 * v[i] * hv[i]).sum()
    }

    fn random_surface(rng: &mut ChaCha8Rng, d: usize) -> QuadraticSurface {
        let m: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..d).map(|k| m[k * d + i] * m[k * d + j]).sum();
            }
        }
        QuadraticSurface { c: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(), a }
    }

    #[test]
    fn quadratic_loss_gives_exact_hvp_for_any_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_surface(&mut rng, 4);
        let x = Tensor::new(vec![1, 4], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let v = Tensor::new(vec![1, 4], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (_, g0) = s.values_and_grads(&x).unwrap();
        let want: Vec<f64> = (0..4)
            .map(|i| g0.data()[i] + (0..4).map(|j| s.a[i * 4 + j] * v.data()[j]).sum::<f64>())
            .collect();
        for scheme in [FdScheme::Fe, FdScheme::Cd] {
            for h in [1e-3, 0.1, 1.0, 7.5] {
                let got = quad_grad(&s, &x, &v, &g0, scheme, h).unwrap();
                for (a, b) in got.data().iter().zip(&want) {
                    assert!((a - b).abs() < 1e-10, "{scheme:?} h={h}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn zero_direction_returns_the_cached_gradient_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model: Model<f32> = Model::init(Architecture::mlp(&[8, 12, 3], Activation::Tanh), &mut rng).unwrap();
        let x = Tensor::new(vec![5, 8], (0..40).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap();
        let y = vec![0, 1, 2, 0, 1];
        let obj = AttackObjective::untargeted(ObjectiveKind::Ul);
        let s = ModelObjective::new(&model, &y, &obj).unwrap();
        let (_, g0) = s.values_and_grads(&x).unwrap();
        let v = Tensor::zeros(x.shape());
        for scheme in [FdScheme::Fe, FdScheme::Cd] {
            assert_eq!(quad_grad(&s, &x, &v, &g0, scheme, 0.5).unwrap(), g0);
        }
        assert!(quad_grad(&s, &x, &v, &g0, FdScheme::Fe, 0.0).is_err());
    }

    #[test]
    fn fw_on_the_disk_climbs_toward_the_grid_maximizer() {
        let surf = QuadraticSurface { c: vec![1.0, 0.0], a: vec![1.0, 0.0, 0.0, 1.0] };
        let x = Tensor::<f64>::zeros(&[1, 2]);
        // Brute-force maximum of Q over the unit disk on a 1e-3 grid.
        let mut grid_best = (f64::NEG_INFINITY, [0.0, 0.0]);
        for i in -1000..=1000 {
            for j in -1000..=1000 {
                let v = [i as f64 * 1e-3, j as f64 * 1e-3];
                if v[0] * v[0] + v[1] * v[1] <= 1.0 {
                    let q = q_value(&surf.c, &surf.a, &v);
                    if q > grid_best.0 {
                        grid_best = (q, v);
                    }
                }
            }
        }
        assert_eq!(grid_best.1, [1.0, 0.0]);
        let cfg = QuadAttackConfig::new(AttackBudget::unclamped(Norm::L2, 1.0).unwrap(), 60, FdScheme::Fe, 1.0)
            .unwrap();
        let mut qs = Vec::new();
        let mut obs = |st: &FwStep<'_, f64>| qs.push(q_value(&surf.c, &surf.a, st.v.data()));
        let out = quad_attack_core(&surf, &x, &cfg, Some(&mut obs)).unwrap();
        qs.push(q_value(&surf.c, &surf.a, out.delta.data()));
        assert!(qs.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert!((qs.last().unwrap() - grid_best.0).abs() < 1e-6);
        assert!((out.delta.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ascent_needs_a_feasible_start() {
        // v0 = g outside the ball: the first step lands on the boundary and Q drops.
        let g = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let budget = AttackBudget::unclamped(Norm::L2, 0.5).unwrap();
        let v1 = frank_wolfe(g.clone(), &budget, 1, |_| Ok(g.clone()), None).unwrap();
        assert_eq!(v1.data(), &[0.5]);
        assert!(v1.data()[0] < g.data()[0]);
    }

    #[test]
    fn linf_oracle_points_are_signed_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let surf = random_surface(&mut rng, 6);
        let x = Tensor::new(vec![3, 6], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let cfg = QuadAttackConfig::new(AttackBudget::unclamped(Norm::Linf, 0.3).unwrap(), 5, FdScheme::Cd, 0.2)
            .unwrap();
        let mut checked = 0;
        let mut obs = |st: &FwStep<'_, f64>| {
            for (s, g) in st.s.data().iter().zip(st.grad_q.data()) {
                assert_eq!(*s, if *g < 0.0 { -0.3 } else { 0.3 });
                checked += 1;
            }
        };
        quad_attack_core(&surf, &x, &cfg, Some(&mut obs)).unwrap();
        assert_eq!(checked, 5 * 18);
    }

    #[test]
    fn ledger_follows_the_scheme_formula() {
        let surf = QuadraticSurface { c: vec![1.0, 2.0], a: vec![1.0, 0.0, 0.0, 1.0] };
        let x = Tensor::<f64>::zeros(&[2, 2]);
        for n in 1..6 {
            for scheme in [FdScheme::Fe, FdScheme::Cd] {
                let cfg = QuadAttackConfig::new(AttackBudget::unclamped(Norm::L2, 0.5).unwrap(), n, scheme, 0.1)
                    .unwrap();
                let out = quad_attack_core(&surf, &x, &cfg, None).unwrap();
                assert_eq!(out.ledger.forward, cfg.expected_passes());
                assert_eq!(out.ledger.backward, cfg.expected_passes());
            }
        }
        let cfg = QuadAttackConfig::new(AttackBudget::unclamped(Norm::L2, 0.5).unwrap(), 1, FdScheme::Fe, 0.1).unwrap();
        let out = quad_attack_core(&surf, &x, &cfg, None).unwrap();
        assert_eq!(out.ledger, PassLedger { forward: 2, backward: 2, eval_forward: 0 });
    }

    #[test]
    fn zero_gradient_is_degenerate() {
        let surf = QuadraticSurface { c: vec![0.0, 0.0], a: vec![1.0, 0.0, 0.0, 1.0] };
        let x = Tensor::<f64>::zeros(&[1, 2]);
        let cfg = QuadAttackConfig::new(AttackBudget::unclamped(Norm::L2, 0.5).unwrap(), 3, FdScheme::Fe, 0.1).unwrap();
        let out = quad_attack_core(&surf, &x, &cfg, None).unwrap();
        assert_eq!(out.degenerate, vec![true]);
        assert!(out.delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_difference_error_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model: Model<f64> = Model::init(Architecture::mlp(&[6, 10, 3], Activation::Tanh), &mut rng).unwrap();
        let x = Tensor::new(vec![1, 6], (0..6).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let v = Tensor::new(vec![1, 6], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let obj = AttackObjective::untargeted(ObjectiveKind::Ul);
        let s = ModelObjective::new(&model, &[1], &obj).unwrap();
        let (_, g0) = s.values_and_grads(&x).unwrap();
        let hvp = |scheme, h| quad_grad(&s, &x, &v, &g0, scheme, h).unwrap().sub(&g0).unwrap();
        let exact = hvp(FdScheme::Cd, 1e-4);
        let err = |scheme, h| {
            let e = hvp(scheme, h).sub(&exact).unwrap();
            e.dot(&e).sqrt()
        };
        let fe = err(FdScheme::Fe, 0.1) / err(FdScheme::Fe, 0.05);
        let cd = err(FdScheme::Cd, 0.1) / err(FdScheme::Cd, 0.05);
        assert!((1.6..2.5).contains(&fe), "FE ratio {fe}");
        assert!((3.2..5.0).contains(&cd), "CD ratio {cd}");
    }
}
