//! Empirical check of the worst-case loss gap bound
//! `|L_A - L_Q| <= 2 eps ||g||_q + 2 eps² ||H||_{p,q} + eps³ M / 3`
//! on low-dimensional smooth models.
//!
//! `L_A` is estimated from below (random search plus PGD restarts), so an observed violation
//! is genuine while a missed maximizer can only hide one. `v_Q` maximizes the quadratic model
//! over the same candidate pool, augmented with Frank-Wolfe iterates on the exact quadratic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attacks::{frank_wolfe, pgd_core, LossSurface, PgdConfig, PgdInit};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::lp_geometry::{fw_oracle, lp_norm, AttackBudget, Norm};
use crate::models::{cross_entropy_per_example, Activation, Architecture, LabeledBatch, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub norm: Norm,
    pub eps: f64,
    /// Random candidates per point; half in the ball, half on its boundary.
    pub samples: usize,
    pub pgd_steps: usize,
    /// Random-start PGD runs per point, in addition to one zero-start run.
    pub restarts: usize,
    pub fw_steps: usize,
    /// Random (point, direction) pairs for the third-derivative estimate.
    pub third_samples: usize,
    pub safety: f64,
    /// Central-difference step for Hessian columns.
    pub hess_step: f64,
    /// Second-difference step for third directional derivatives.
    pub third_step: f64,
    pub max_dim: usize,
    /// Refuse when the typical sample spacing `2 eps / samples^(1/d)` exceeds this.
    pub max_resolution: f64,
    pub seed: u64,
}

impl BoundConfig {
    pub fn new(norm: Norm, eps: f64) -> Self {
        BoundConfig {
            norm,
            eps,
            samples: 1_000_000,
            pgd_steps: 200,
            restarts: 4,
            fw_steps: 100,
            third_samples: 256,
            safety: 2.0,
            hess_step: 1e-4,
            third_step: 1e-3,
            max_dim: 8,
            max_resolution: 0.25,
            seed: 0,
        }
    }

    pub fn resolution(&self, dim: usize) -> f64 {
        2.0 * self.eps / (self.samples.max(1) as f64).powf(1.0 / dim.max(1) as f64)
    }

    fn check(&self, dim: usize) -> Result<()> {
        if !matches!(self.norm, Norm::L2 | Norm::Linf) {
            return Err(Error::UnsupportedNorm { op: "verify_bound", norm: self.norm.to_string() });
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("bound check needs eps > 0, got {}", self.eps)));
        }
        if dim == 0 || dim > self.max_dim {
            return Err(Error::InvalidArgument(format!(
                "refusing brute-force search in {dim} dimensions (limit {})",
                self.max_dim
            )));
        }
        let res = self.resolution(dim);
        if res > self.max_resolution {
            return Err(Error::InvalidArgument(format!(
                "refusing: {} samples give spacing {res:.3} over a radius-{} ball in {dim} dimensions (limit {})",
                self.samples, self.eps, self.max_resolution
            )));
        }
        if self.samples < 2 || self.safety < 1.0 || !(self.hess_step > 0.0) || !(self.third_step > 0.0) {
            return Err(Error::InvalidArgument("bound config needs samples >= 2, safety >= 1 and positive steps".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianNorm {
    /// Spectral norm by power iteration.
    PowerIteration,
    /// `q`-norm of the row `q`-norms, an upper bound on the operator norm.
    HolderUpperBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub index: usize,
    pub loss: f64,
    pub l_a: f64,
    pub l_q: f64,
    pub gap: f64,
    pub grad_norm_q: f64,
    pub hess_opnorm: f64,
    pub m_est: f64,
    pub remainder_bound: f64,
    pub rhs: f64,
    pub holds: bool,
    /// Where the best adversarial candidate came from: `samples`, `pgd` or `quadratic`.
    pub l_a_source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub config: BoundConfig,
    pub dim: usize,
    pub resolution: f64,
    pub hessian_norm: HessianNorm,
    pub note: String,
    pub records: Vec<BoundRecord>,
    pub violations: usize,
}

impl BoundReport {
    pub fn mean_gap(&self) -> f64 {
        self.records.iter().map(|r| r.gap).sum::<f64>() / self.records.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,loss,l_a,l_q,gap,grad_norm_q,hess_opnorm,m_est,remainder_bound,rhs,holds,l_a_source\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.3e},{:.6},{:.6},{:.6},{:.3e},{:.6},{},{}\n",
                r.index,
                r.loss,
                r.l_a,
                r.l_q,
                r.gap,
                r.grad_norm_q,
                r.hess_opnorm,
                r.m_est,
                r.remainder_bound,
                r.rhs,
                r.holds,
                r.l_a_source
            ));
        }
        s
    }
}

/// Cross-entropy of one fixed label, usable on any number of rows.
struct FixedLabel<'a> {
    model: &'a Model<f64>,
    label: usize,
}

impl LossSurface<f64> for FixedLabel<'_> {
    fn values(&self, x: &Tensor<f64>) -> Result<Vec<f64>> {
        cross_entropy_per_example(&self.model.logits(x)?, &vec![self.label; x.rows()])
    }

    fn values_and_grads(&self, x: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)> {
        self.model.loss_and_input_grad(x, &vec![self.label; x.rows()])
    }
}

/// Bound check for a tanh MLP on labeled points.
pub fn verify_bound(model: &Model<f64>, points: &LabeledBatch<f64>, cfg: &BoundConfig) -> Result<BoundReport> {
    match model.arch() {
        Architecture::Mlp { activation: Activation::Tanh, .. } => {}
        _ => {
            return Err(Error::InvalidArgument(
                "the bound needs a three-times differentiable loss; use a tanh MLP".into(),
            ))
        }
    }
    verify_bound_surface(|i| FixedLabel { model, label: points.y[i] }, &points.x, cfg)
}

/// Bound check on any smooth surface; `surface_for(i)` is the loss around row `i` of `points`.
pub fn verify_bound_surface<S: LossSurface<f64>>(
    surface_for: impl Fn(usize) -> S,
    points: &Tensor<f64>,
    cfg: &BoundConfig,
) -> Result<BoundReport> {
    let d = points.row_len();
    cfg.check(d)?;
    let mut records = Vec::with_capacity(points.rows());
    for i in 0..points.rows() {
        let s = surface_for(i);
        records.push(check_point(&s, points.row(i), i, cfg)?);
    }
    let violations = records.iter().filter(|r| !r.holds).count();
    Ok(BoundReport {
        config: cfg.clone(),
        dim: d,
        resolution: cfg.resolution(d),
        hessian_norm: if cfg.norm == Norm::L2 { HessianNorm::PowerIteration } else { HessianNorm::HolderUpperBound },
        note: format!(
            "L_A is a lower estimate: max over {} random candidates (half on the boundary, typical spacing {:.4}), \
             1 zero-start and {} random-start PGD({}) runs, and the quadratic maximizer. Under-estimating L_A can \
             hide a violation but never create one. M is the sampled third-derivative maximum times {}.",
            cfg.samples,
            cfg.resolution(d),
            cfg.restarts,
            cfg.pgd_steps,
            cfg.safety
        ),
        records,
        violations,
    })
}

/// Best candidate under two criteria at once.
struct Best {
    loss: (f64, Vec<f64>, &'static str),
    quad: (f64, Vec<f64>),
}

impl Best {
    fn offer(&mut self, v: &[f64], loss: f64, q: f64, source: &'static str) {
        if loss > self.loss.0 {
            self.loss = (loss, v.to_vec(), source);
        }
        if q > self.quad.0 {
            self.quad = (q, v.to_vec());
        }
    }
}

fn quad_value(g: &[f64], h: &[f64], v: &[f64]) -> f64 {
    let d = g.len();
    let mut acc = 0.0;
    for i in 0..d {
        let hv: f64 = (0..d).map(|j| h[i * d + j] * v[j]).sum();
        acc += g[i] * v[i] + 0.5 * v[i] * hv;
    }
    acc
}

fn row_tensor(rows: &[Vec<f64>]) -> Result<Tensor<f64>> {
    Tensor::from_rows(rows)
}

/// Uniform draw in the ball (`boundary = false`) or on its surface.
fn sample_ball(rng: &mut ChaCha8Rng, d: usize, norm: Norm, eps: f64, boundary: bool) -> Vec<f64> {
    match norm {
        Norm::Linf => {
            let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-eps..=eps)).collect();
            if boundary {
                let k = rng.gen_range(0..d);
                v[k] = if rng.gen::<bool>() { eps } else { -eps };
            }
            v
        }
        _ => {
            let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = lp_norm(&dir, Norm::L2).max(f64::MIN_POSITIVE);
            let r = if boundary { eps } else { eps * rng.gen::<f64>().powf(1.0 / d as f64) };
            dir.iter().map(|x| x * r / n).collect()
        }
    }
}

fn check_point<S: LossSurface<f64>>(s: &S, x: &[f64], index: usize, cfg: &BoundConfig) -> Result<BoundRecord> {
    let d = x.len();
    let eps = cfg.eps;
    let budget = AttackBudget { norm: cfg.norm, eps, clamp_box: None };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let x_t = row_tensor(&[x.to_vec()])?;
    let (l0, g) = s.values_and_grads(&x_t)?;
    let (l0, g) = (l0[0], g.into_data());

    // Hessian by central differences of the gradient, symmetrized.
    let t = cfg.hess_step;
    let mut probes = Vec::with_capacity(2 * d);
    for sign in [1.0, -1.0] {
        for j in 0..d {
            let mut p = x.to_vec();
            p[j] += sign * t;
            probes.push(p);
        }
    }
    let (_, gp) = s.values_and_grads(&row_tensor(&probes)?)?;
    let mut h = vec![0.0; d * d];
    for j in 0..d {
        for i in 0..d {
            h[i * d + j] = (gp.row(j)[i] - gp.row(d + j)[i]) / (2.0 * t);
        }
    }
    for i in 0..d {
        for j in 0..i {
            let m = 0.5 * (h[i * d + j] + h[j * d + i]);
            h[i * d + j] = m;
            h[j * d + i] = m;
        }
    }

    let mut best = Best { loss: (f64::NEG_INFINITY, vec![0.0; d], "samples"), quad: (f64::NEG_INFINITY, vec![0.0; d]) };
    let shifted = |vs: &[Vec<f64>]| -> Result<Tensor<f64>> {
        row_tensor(&vs.iter().map(|v| v.iter().zip(x).map(|(a, b)| a + b).collect()).collect::<Vec<Vec<f64>>>())
    };

    // Random search.
    const CHUNK: usize = 16384;
    let mut done = 0;
    while done < cfg.samples {
        let n = CHUNK.min(cfg.samples - done);
        let vs: Vec<Vec<f64>> =
            (0..n).map(|k| sample_ball(&mut rng, d, cfg.norm, eps, (done + k) >= cfg.samples / 2)).collect();
        let vals = s.values(&shifted(&vs)?)?;
        for (v, l) in vs.iter().zip(vals) {
            best.offer(v, l, quad_value(&g, &h, v), "samples");
        }
        done += n;
    }

    // PGD on the loss: one zero start and several random starts, run as one batch each.
    let mut pgd_cfg = PgdConfig::new(budget, cfg.pgd_steps)?;
    for (init, rows) in [(PgdInit::Zero, 1), (PgdInit::Random, cfg.restarts)] {
        if rows == 0 {
            continue;
        }
        pgd_cfg.init = init;
        pgd_cfg.seed = rng.gen();
        let xs = row_tensor(&vec![x.to_vec(); rows])?;
        let out = pgd_core(s, &xs, &pgd_cfg, None)?;
        for (k, v) in out.delta.rows_iter().enumerate() {
            best.offer(v, out.values[k], quad_value(&g, &h, v), "pgd");
        }
    }

    // Frank-Wolfe on the exact quadratic, plus the final oracle vertex.
    let grad_q = |v: &Tensor<f64>| -> Result<Tensor<f64>> {
        let row: Vec<f64> = (0..d).map(|i| g[i] + (0..d).map(|j| h[i * d + j] * v.data()[j]).sum::<f64>()).collect();
        row_tensor(&[row])
    };
    let gn = lp_norm(&g, cfg.norm);
    let v0: Vec<f64> = if gn > 0.0 { g.iter().map(|gi| eps * gi / gn).collect() } else { vec![0.0; d] };
    let v_fw = frank_wolfe(row_tensor(&[v0.clone()])?, &budget, cfg.fw_steps, grad_q, None)?;
    let vertex = fw_oracle(grad_q(&v_fw)?.data(), &budget);
    let mut extra = vec![v0, v_fw.into_data()];
    if !vertex.degenerate {
        extra.push(vertex.s);
    }
    let vals = s.values(&shifted(&extra)?)?;
    for (v, l) in extra.iter().zip(vals) {
        best.offer(v, l, quad_value(&g, &h, v), "quadratic");
    }

    let v_q = best.quad.1.clone();
    let l_q = s.values(&shifted(&[v_q.clone()])?)?[0];
    let (mut l_a, v_a, mut source) = (best.loss.0, best.loss.1.clone(), best.loss.2);
    if l_q > l_a {
        l_a = l_q;
        source = "quadratic";
    }

    let grad_norm_q = lp_norm(&g, cfg.norm.dual());
    let hess_opnorm = match cfg.norm {
        Norm::L2 => spectral_norm(&h, d),
        _ => holder_opnorm(&h, d, cfg.norm.dual()),
    };
    let m_est = cfg.safety * third_derivative_max(s, x, &[&v_a, &v_q], cfg, &mut rng)?;
    let remainder_bound = eps.powi(3) * m_est / 3.0;
    let rhs = 2.0 * eps * grad_norm_q + 2.0 * eps * eps * hess_opnorm + remainder_bound;
    let gap = (l_a - l_q).abs();
    Ok(BoundRecord {
        index,
        loss: l0,
        l_a,
        l_q,
        gap,
        grad_norm_q,
        hess_opnorm,
        m_est,
        remainder_bound,
        rhs,
        holds: gap <= rhs,
        l_a_source: source.into(),
    })
}

/// Largest `|H|` eigenvalue of a symmetric matrix by power iteration.
pub(crate) fn spectral_norm(h: &[f64], d: usize) -> f64 {
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut est = 0.0;
    for _ in 0..1000 {
        let hv: Vec<f64> = (0..d).map(|i| (0..d).map(|j| h[i * d + j] * v[j]).sum()).collect();
        let n = lp_norm(&hv, Norm::L2);
        let vn = lp_norm(&v, Norm::L2);
        if n == 0.0 {
            return 0.0;
        }
        est = n / vn;
        v = hv.iter().map(|a| a / n).collect();
    }
    est
}

/// `|| (||h_i||_q)_i ||_q`, which bounds `sup_{||v||_p <= 1} ||Hv||_q` by Hölder row by row.
pub(crate) fn holder_opnorm(h: &[f64], d: usize, q: Norm) -> f64 {
    let rows: Vec<f64> = h.chunks(d).map(|r| lp_norm(r, q)).collect();
    lp_norm(&rows, q)
}

/// Sampled `max |D³l(xi)[u, u, u]|` over `xi` in the ball and unit `u`, plus points along the
/// segments to the given candidates.
fn third_derivative_max<S: LossSurface<f64>>(
    s: &S,
    x: &[f64],
    toward: &[&Vec<f64>],
    cfg: &BoundConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let d = x.len();
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for _ in 0..cfg.third_samples {
        let xi = sample_ball(rng, d, cfg.norm, cfg.eps, false);
        let u: Vec<f64> = sample_ball(rng, d, cfg.norm, 1.0, true);
        pairs.push((xi, u));
    }
    for v in toward {
        let n = lp_norm(v, cfg.norm);
        if n > 0.0 {
            let u: Vec<f64> = v.iter().map(|a| a / n).collect();
            for k in 0..=4 {
                let tau = k as f64 / 4.0;
                pairs.push((v.iter().map(|a| a * tau).collect(), u.clone()));
            }
        }
    }
    let t = cfg.third_step;
    let mut rows = Vec::with_capacity(3 * pairs.len());
    for (xi, u) in &pairs {
        for sgn in [1.0, 0.0, -1.0] {
            rows.push((0..d).map(|j| x[j] + xi[j] + sgn * t * u[j]).collect::<Vec<f64>>());
        }
    }
    let (_, gr) = s.values_and_grads(&row_tensor(&rows)?)?;
    let mut m: f64 = 0.0;
    for (k, (_, u)) in pairs.iter().enumerate() {
        let (gp, g0, gm) = (gr.row(3 * k), gr.row(3 * k + 1), gr.row(3 * k + 2));
        let d3: f64 = (0..d).map(|j| u[j] * (gp[j] - 2.0 * g0[j] + gm[j])).sum::<f64>() / (t * t);
        m = m.max(d3.abs());
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::QuadraticSurface;

    fn small_cfg(norm: Norm, eps: f64) -> BoundConfig {
        BoundConfig { samples: 20_000, pgd_steps: 50, restarts: 2, third_samples: 64, ..BoundConfig::new(norm, eps) }
    }

    #[test]
    fn holder_bound_dominates_sampled_operator_norm() {
        let h = vec![2.0, -1.0, 0.5, -1.0, 3.0, 0.0, 0.5, 0.0, -1.5];
        let bound = holder_opnorm(&h, 3, Norm::L1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let v = sample_ball(&mut rng, 3, Norm::Linf, 1.0, true);
            let hv: Vec<f64> = (0..3).map(|i| (0..3).map(|j| h[i * 3 + j] * v[j]).sum()).collect();
            assert!(lp_norm(&hv, Norm::L1) <= bound + 1e-12);
        }
        assert!((spectral_norm(&[3.0, 0.0, 0.0, -4.0], 2) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn quadratic_surface_has_zero_gap() {
        // Dyadic data keeps every evaluation exact, so the two maximizers coincide bit for bit.
        let surf = QuadraticSurface { c: vec![0.5, -0.25], a: vec![1.0, 0.0, 0.0, 2.0] };
        let pts = Tensor::from_rows(&[vec![0.25, 0.5], vec![-0.5, 0.125], vec![0.0, 0.0]]).unwrap();
        let cfg = BoundConfig { hess_step: 0.5, ..small_cfg(Norm::Linf, 0.5) };
        let rep = verify_bound_surface(|_| surf.clone(), &pts, &cfg).unwrap();
        for r in &rep.records {
            assert_eq!(r.gap, 0.0, "{r:?}");
            assert!(r.holds);
        }
        // Other norms and budgets: never a violation.
        for (norm, eps) in [(Norm::L2, 0.3), (Norm::L2, 1.0), (Norm::Linf, 0.1)] {
            let rep = verify_bound_surface(|_| surf.clone(), &pts, &small_cfg(norm, eps)).unwrap();
            assert_eq!(rep.violations, 0);
        }
    }

    #[test]
    fn refuses_high_dimension_and_coarse_grids() {
        let surf = QuadraticSurface { c: vec![0.0; 9], a: vec![0.0; 81] };
        let pts = Tensor::zeros(&[1, 9]);
        assert!(verify_bound_surface(|_| surf.clone(), &pts, &small_cfg(Norm::L2, 0.1)).is_err());
        let surf = QuadraticSurface { c: vec![0.0; 4], a: vec![0.0; 16] };
        let cfg = BoundConfig { samples: 100, ..small_cfg(Norm::L2, 2.0) };
        let err = verify_bound_surface(|_| surf.clone(), &Tensor::zeros(&[1, 4]), &cfg).unwrap_err();
        assert!(err.to_string().contains("refusing"), "{err}");
    }

    #[test]
    fn tanh_network_satisfies_the_bound_and_gap_shrinks_faster_than_rhs() {
        let model: Model<f64> =
            Model::init(Architecture::mlp(&[2, 8, 3], Activation::Tanh), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..10).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let pts = LabeledBatch::new(Tensor::from_rows(&x).unwrap(), y).unwrap();
        let big = verify_bound(&model, &pts, &small_cfg(Norm::L2, 0.3)).unwrap();
        assert_eq!(big.violations, 0);
        let small = verify_bound(&model, &pts, &small_cfg(Norm::L2, 0.03)).unwrap();
        assert_eq!(small.violations, 0);
        let ratio = |r: &BoundReport| r.records.iter().map(|b| b.gap / b.rhs).sum::<f64>();
        assert!(ratio(&small) < ratio(&big));
        let relu: Model<f64> =
            Model::init(Architecture::mlp(&[2, 3], Activation::Relu), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(verify_bound(&relu, &pts, &small_cfg(Norm::L2, 0.3)).is_err());
    }
}
