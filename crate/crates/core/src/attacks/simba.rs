//! Gradient-free attack over the pixel basis: try `-step` then `+step` along one coordinate
//! at a time and keep a move when it lowers the true-class probability. Past `d` queries the
//! coordinate order repeats; every coordinate stays within `step` of the clean input, so the
//! perturbation lies in the Linf ball of radius `step`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AttackResult, PassLedger};
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::lp_geometry::{AttackBudget, Norm};
use crate::models::{softmax, LabeledBatch, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimbaConfig {
    pub step: f64,
    /// Number of coordinate directions tried per example.
    pub iterations: usize,
    pub seed: u64,
    pub clamp_box: Option<(f64, f64)>,
    /// Reject moves that would take the perturbation outside this L2 radius.
    #[serde(default)]
    pub max_l2: Option<f64>,
}

impl SimbaConfig {
    pub fn new(step: f64, iterations: usize, seed: u64) -> Self {
        SimbaConfig { step, iterations, seed, clamp_box: Some((0.0, 1.0)), max_l2: None }
    }
}

/// Each example follows its own random coordinate order, seeded by `cfg.seed` and its index
/// in the batch. Only forward passes are spent (`ledger.backward == 0`).
pub fn simba<T: Scalar>(model: &Model<T>, batch: &LabeledBatch<T>, cfg: &SimbaConfig) -> Result<AttackResult<T>> {
    if !(cfg.step >= 0.0 && cfg.step.is_finite()) {
        return Err(Error::Config(format!("simba step must be >= 0, got {}", cfg.step)));
    }
    if cfg.iterations == 0 {
        return Err(Error::Config("simba needs at least one query".into()));
    }
    let n = batch.len();
    let d = batch.x.row_len();
    let orders: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
            let mut o: Vec<usize> = (0..d).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    let prob_y = |x: &Tensor<T>, y: &[usize]| -> Result<Vec<f64>> {
        let p = softmax(&model.logits(x)?);
        Ok(p.rows_iter().zip(y).map(|(r, &yi)| r[yi].as_f64()).collect())
    };
    let clamp = |v: f64| match cfg.clamp_box {
        Some((lo, hi)) => v.clamp(lo, hi),
        None => v,
    };
    let mut ledger = PassLedger::default();
    let mut cur = batch.x.clone();
    let mut p_cur = prob_y(&cur, &batch.y)?;
    let mut sq = vec![0.0f64; n];
    let cap = cfg.max_l2.map(|m| m * m * (1.0 + 1e-12));
    ledger.forward += 1;
    for t in 0..cfg.iterations {
        let mut pending: Vec<usize> = (0..n).collect();
        for sign in [-1.0, 1.0] {
            if pending.is_empty() {
                break;
            }
            let mut cand = cur.select_rows(&pending);
            for (r, &i) in pending.iter().enumerate() {
                let c = orders[i][t % d];
                let x0 = batch.x.row(i)[c].as_f64();
                let v = &mut cand.row_mut(r)[c];
                let old = v.as_f64();
                let new = clamp((old + sign * cfg.step).clamp(x0 - cfg.step, x0 + cfg.step));
                let within = cap.map_or(true, |cap| sq[i] - (old - x0).powi(2) + (new - x0).powi(2) <= cap);
                if within {
                    *v = T::of(new);
                }
            }
            let labels: Vec<usize> = pending.iter().map(|&i| batch.y[i]).collect();
            let p = prob_y(&cand, &labels)?;
            ledger.forward += 1;
            let mut still = Vec::new();
            for (r, &i) in pending.iter().enumerate() {
                if p[r] < p_cur[i] {
                    p_cur[i] = p[r];
                    cur.row_mut(i).copy_from_slice(cand.row(r));
                    let x0 = batch.x.row(i);
                    sq[i] = cur.row(i).iter().zip(x0).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
                } else {
                    still.push(i);
                }
            }
            pending = still;
        }
    }
    let delta = cur.sub(&batch.x)?;
    let budget = AttackBudget { norm: Norm::Linf, eps: cfg.step, clamp_box: cfg.clamp_box };
    AttackResult::assemble(
        format!("simba{}", cfg.iterations),
        model,
        batch,
        &budget,
        delta,
        None,
        vec![false; n],
        ledger,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp_geometry::lp_norm;
    use crate::models::{cross_entropy_per_example, Activation, Architecture};

    #[test]
    fn flat_model_accepts_nothing() {
        let m: Model<f32> = Model::from_params(
            Architecture::mlp(&[4, 3], Activation::Relu),
            vec![Tensor::zeros(&[4, 3]), Tensor::zeros(&[3])],
        )
        .unwrap();
        let batch = LabeledBatch::new(Tensor::full(&[2, 4], 0.5), vec![0, 2]).unwrap();
        let r = simba(&m, &batch, &SimbaConfig::new(0.2, 4, 1)).unwrap();
        assert!(r.delta.data().iter().all(|&v| v == 0.0));
        assert_eq!(r.ledger.backward, 0);
    }

    #[test]
    fn linear_model_steps_follow_the_weight_difference() {
        let w = vec![0.5f64, -0.5, -1.0, 1.0, 2.0, 0.0, 0.0, 3.0, 0.7, 0.2, -0.4, 0.1];
        let m = Model::from_params(
            Architecture::mlp(&[6, 2], Activation::Relu),
            vec![Tensor::new(vec![6, 2], w.clone()).unwrap(), Tensor::zeros(&[2])],
        )
        .unwrap();
        let x = Tensor::full(&[1, 6], 0.5);
        let batch = LabeledBatch::new(x, vec![0]).unwrap();
        let r = simba(&m, &batch, &SimbaConfig::new(0.1, 6, 5)).unwrap();
        for (c, &dc) in r.delta.data().iter().enumerate() {
            let diff = w[c * 2] - w[c * 2 + 1];
            if dc != 0.0 {
                assert_eq!(dc.signum(), -diff.signum(), "coordinate {c}");
            } else {
                assert_eq!(diff, 0.0);
            }
        }
        let before = cross_entropy_per_example(&m.logits(&batch.x).unwrap(), &[0]).unwrap()[0];
        let after = cross_entropy_per_example(&m.logits(&r.adv_x).unwrap(), &[0]).unwrap()[0];
        assert!(after > before);
        assert_eq!(r.ledger.backward, 0);
    }

    #[test]
    fn repeated_passes_stay_within_one_step() {
        let m = Model::from_params(
            Architecture::mlp(&[3, 2], Activation::Relu),
            vec![Tensor::new(vec![3, 2], vec![1.0f64, -1.0, -2.0, 2.0, 0.5, -0.5]).unwrap(), Tensor::zeros(&[2])],
        )
        .unwrap();
        let batch = LabeledBatch::new(Tensor::full(&[1, 3], 0.5), vec![0]).unwrap();
        let mut cfg = SimbaConfig::new(0.1, 12, 2);
        cfg.clamp_box = None;
        let r = simba(&m, &batch, &cfg).unwrap();
        for &d in r.delta.data() {
            assert!((d.abs() - 0.1).abs() < 1e-12, "{d}");
        }
    }

    #[test]
    fn l2_cap_bounds_the_perturbation() {
        let m = Model::from_params(
            Architecture::mlp(&[8, 2], Activation::Relu),
            vec![Tensor::new(vec![8, 2], (0..16).map(|i| if i % 2 == 0 { 1.0f64 } else { -1.0 }).collect()).unwrap(), Tensor::zeros(&[2])],
        )
        .unwrap();
        let batch = LabeledBatch::new(Tensor::full(&[1, 8], 0.5), vec![0]).unwrap();
        let mut cfg = SimbaConfig::new(0.1, 16, 4);
        cfg.max_l2 = Some(0.25);
        let r = simba(&m, &batch, &cfg).unwrap();
        let moved = r.delta.data().iter().filter(|d| **d != 0.0).count();
        // Each accepted move adds 0.01 to the squared norm: six fit under 0.0625.
        assert_eq!(moved, 6);
        assert!(lp_norm(r.delta.data(), Norm::L2) <= 0.25 + 1e-12);
    }
}
