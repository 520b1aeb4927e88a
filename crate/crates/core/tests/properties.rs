//! Property tests over the public API: random models, budgets and attack settings.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scorpio::attacks::{
    frank_wolfe, run_attack, AttackSpec, FdScheme, ObjectiveKind, PgdConfig, QuadAttackConfig, SimbaConfig,
};
use scorpio::autodiff::{Tape, Tensor};
use scorpio::data_io::{encode_idx, epoch_order, load_idx_images};
use scorpio::evaluation::{pgd_grid, sweep, SweepOptions};
use scorpio::explain::{contrastive, ContrastiveConfig, Role};
use scorpio::lp_geometry::{lp_norm, AttackBudget, Norm};
use scorpio::models::{Activation, Architecture, LabeledBatch, Model};
use scorpio::training::config_hash;

fn tanh_net(d: usize, k: usize, seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::init(Architecture::mlp(&[d, 6, k], Activation::Tanh), &mut rng).unwrap()
}

fn unit_batch(n: usize, d: usize, k: usize, seed: u64) -> LabeledBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    LabeledBatch::new(x, (0..n).map(|_| rng.gen_range(0..k)).collect()).unwrap()
}

fn norm_strategy() -> impl Strategy<Value = Norm> {
    prop_oneof![Just(Norm::L1), Just(Norm::L2), Just(Norm::Lp(1.5)), Just(Norm::Lp(3.0)), Just(Norm::Linf)]
}

fn objective_strategy() -> impl Strategy<Value = ObjectiveKind> {
    prop_oneof![Just(ObjectiveKind::Ul), Just(ObjectiveKind::Tl), Just(ObjectiveKind::Um), Just(ObjectiveKind::Tm)]
}

fn specs(norm: Norm, eps: f64, steps: usize, objective: ObjectiveKind, clamp: bool) -> Vec<AttackSpec> {
    let clamp_box = clamp.then_some((0.0, 1.0));
    let budget = AttackBudget { norm, eps, clamp_box };
    let mut out = vec![];
    for scheme in [FdScheme::Fe, FdScheme::Cd] {
        out.push(AttackSpec::Quad { objective, cfg: QuadAttackConfig::new(budget, steps, scheme, 0.8).unwrap() });
    }
    if matches!(norm, Norm::L2 | Norm::Linf) {
        out.push(AttackSpec::Pgd { objective, cfg: PgdConfig::new(budget, steps).unwrap() });
    }
    if norm == Norm::Linf && objective == ObjectiveKind::Ul {
        out.push(AttackSpec::Fgsm { budget });
        let mut s = SimbaConfig::new(eps, 4 * steps, 3);
        s.clamp_box = clamp_box;
        out.push(AttackSpec::Simba { cfg: s });
    }
    out
}

fn q_value(g: &[f64], h: &[f64], v: &[f64]) -> f64 {
    let d = g.len();
    (0..d).map(|i| g[i] * v[i] + 0.5 * v[i] * (0..d).map(|j| h[i * d + j] * v[j]).sum::<f64>()).sum()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn attacks_stay_in_the_ball_and_leave_the_model_alone(
        seed in 0u64..1000,
        norm in norm_strategy(),
        eps in 0.0f64..1.5,
        steps in 1usize..5,
        objective in objective_strategy(),
        clamp in any::<bool>(),
    ) {
        let model = tanh_net(5, 3, seed);
        let before = model.checksum();
        let data = unit_batch(7, 5, 3, seed);
        for spec in specs(norm, eps, steps, objective, clamp) {
            let r = run_attack(&model, &data, &spec, seed, 4).unwrap();
            for row in r.delta.rows_iter() {
                prop_assert!(lp_norm(row, norm) <= eps * (1.0 + 1e-6) + 1e-12, "{}: {}", spec.kind(), lp_norm(row, norm));
            }
            if clamp {
                prop_assert!(r.adv_x.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            // Identical seeds give identical bytes.
            let again = run_attack(&model, &data, &spec, seed, 4).unwrap();
            let (mut a, mut b) = (Vec::new(), Vec::new());
            r.write_jsonl(&mut a).unwrap();
            again.write_jsonl(&mut b).unwrap();
            prop_assert_eq!(a, b);
        }
        prop_assert_eq!(model.checksum(), before);
    }

    #[test]
    fn ledgers_follow_the_scheme_formulas(
        seed in 0u64..1000,
        steps in 1usize..12,
        n in 1usize..10,
        chunk in 1usize..6,
    ) {
        let model = tanh_net(4, 3, seed);
        let data = unit_batch(n, 4, 3, seed);
        let batches = n.div_ceil(chunk) as u64;
        let b = AttackBudget::unclamped(Norm::L2, 0.5).unwrap();
        let cases = [
            (AttackSpec::Quad { objective: ObjectiveKind::Ul, cfg: QuadAttackConfig::new(b, steps, FdScheme::Fe, 1.0).unwrap() }, steps + 1),
            (AttackSpec::Quad { objective: ObjectiveKind::Um, cfg: QuadAttackConfig::new(b, steps, FdScheme::Cd, 1.0).unwrap() }, 2 * steps + 1),
            (AttackSpec::Pgd { objective: ObjectiveKind::Tl, cfg: PgdConfig::new(b, steps).unwrap() }, steps),
        ];
        for (spec, per_batch) in cases {
            let r = run_attack(&model, &data, &spec, 0, chunk).unwrap();
            prop_assert_eq!(r.ledger.forward, per_batch as u64 * batches);
            prop_assert_eq!(r.ledger.backward, per_batch as u64 * batches);
            prop_assert_eq!(spec.expected_passes(), Some(per_batch as u64));
        }
    }

    #[test]
    fn frank_wolfe_from_the_gradient_never_decreases_q(
        seed in 0u64..10_000,
        d in 2usize..8,
        linf in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..d * d)
            .map(|ij| (0..d).map(|k| m[k * d + ij / d] * m[k * d + ij % d]).sum())
            .collect();
        let norm = if linf { Norm::Linf } else { Norm::L2 };
        // v0 = g is feasible once eps reaches its norm.
        let eps = lp_norm(&g, norm) * rng.gen_range(1.0..3.0);
        let budget = AttackBudget::unclamped(norm, eps).unwrap();
        let mut qs = vec![];
        let mut obs = |s: &scorpio::attacks::FwStep<'_, f64>| qs.push(q_value(&g, &h, s.v.data()));
        let v = frank_wolfe(
            Tensor::new(vec![1, d], g.clone()).unwrap(),
            &budget,
            10,
            |v| {
                let hv: Vec<f64> = (0..d).map(|i| g[i] + (0..d).map(|j| h[i * d + j] * v.data()[j]).sum::<f64>()).collect();
                Tensor::new(vec![1, d], hv)
            },
            Some(&mut obs),
        )
        .unwrap();
        qs.push(q_value(&g, &h, v.data()));
        prop_assert!(qs[0] >= 0.0);
        for w in qs.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn explanations_order_losses_and_stay_feasible(seed in 0u64..1000, eps in 0.0f64..2.0, steps in 1usize..8) {
        let model = tanh_net(6, 4, seed);
        let data = unit_batch(5, 6, 4, seed);
        let cfg = ContrastiveConfig::new(eps, steps);
        for e in contrastive(&model, &data, &cfg).unwrap() {
            prop_assert!(e.loss_min <= e.loss && e.loss <= e.loss_max);
            prop_assert!(e.norm_max <= eps * (1.0 + 1e-6) + 1e-9 && e.norm_min <= eps * (1.0 + 1e-6) + 1e-9);
            let expected = if e.correct { (Role::PertinentNegative, Role::PertinentPositive) } else { (Role::PertinentPositive, Role::PertinentNegative) };
            prop_assert_eq!((e.role_max, e.role_min), expected);
        }
    }

    #[test]
    fn sweep_accuracies_are_percentages(seed in 0u64..1000, eps in prop::collection::vec(0.05f64..1.0, 1..3)) {
        let model = tanh_net(4, 3, seed);
        let data = unit_batch(9, 4, 3, seed);
        let grid = pgd_grid(Norm::L2, &eps, 3, &[ObjectiveKind::Ul, ObjectiveKind::Tm], Some((0.0, 1.0))).unwrap();
        let rep = sweep(&model, &data, &grid, "m", "test", SweepOptions { target_seed: seed, chunk: 4 }).unwrap();
        prop_assert!(rep.rows.iter().any(|r| r.attack == "clean" && r.eps == 0.0));
        for r in &rep.rows {
            prop_assert!((0.0..=100.0).contains(&r.adversarial_accuracy));
            prop_assert!(r.ledger_consistent());
        }
    }

    #[test]
    fn config_hash_ignores_key_order(pairs in prop::collection::btree_map("[a-z]{1,6}", -1000i64..1000, 1..8), rot in 0usize..8) {
        let entries: Vec<_> = pairs.iter().collect();
        let n = entries.len();
        let mut fwd = serde_json::Map::new();
        let mut rotated = serde_json::Map::new();
        for (k, v) in &entries {
            fwd.insert((*k).clone(), serde_json::json!({ "v": v, "w": [v] }));
        }
        for i in 0..n {
            let (k, v) = entries[(i + rot) % n];
            rotated.insert(k.clone(), serde_json::json!({ "w": [v], "v": v }));
        }
        prop_assert_eq!(config_hash(&fwd), config_hash(&rotated));
    }

    #[test]
    fn decoded_pixels_are_in_the_unit_interval(bytes in prop::collection::vec(any::<u8>(), 12)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.idx");
        std::fs::write(&p, encode_idx(&[3, 2, 2], &bytes).unwrap()).unwrap();
        let (x, shape) = load_idx_images(&p).unwrap();
        prop_assert_eq!(shape, vec![2, 2]);
        prop_assert_eq!(x.rows(), 3);
        for (v, b) in x.data().iter().zip(&bytes) {
            prop_assert!((0.0..=1.0).contains(v));
            prop_assert_eq!(*v, *b as f32 / 255.0);
        }
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation(n in 0usize..200, seed in any::<u64>(), epoch in 0usize..5) {
        let a = epoch_order(n, seed, epoch);
        prop_assert_eq!(&a, &epoch_order(n, seed, epoch));
        let mut s = a.clone();
        s.sort_unstable();
        prop_assert_eq!(s, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let grad_of = |ca: f64, cb: f64| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone()).unwrap();
            let th = t.tanh(x).unwrap();
            let l1 = t.sum(th).unwrap();
            let sq = t.mul(x, x).unwrap();
            let l2 = t.sum(sq).unwrap();
            let s1 = t.scale(l1, ca).unwrap();
            let s2 = t.scale(l2, cb).unwrap();
            let loss = t.add(s1, s2).unwrap();
            t.backward(loss, &[x]).unwrap().get(x).unwrap().data().to_vec()
        };
        let (g1, g2, g) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(a, b));
        for i in 0..6 {
            prop_assert!((g[i] - (a * g1[i] + b * g2[i])).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_budget_attacks_return_zero_perturbations() {
    let model = tanh_net(4, 3, 2);
    let data = unit_batch(6, 4, 3, 2);
    for norm in [Norm::L2, Norm::Linf, Norm::Lp(1.5)] {
        for spec in specs(norm, 0.0, 3, ObjectiveKind::Ul, true) {
            let r = run_attack(&model, &data, &spec, 0, 8).unwrap();
            assert!(r.delta.data().iter().all(|v| *v == 0.0), "{}", spec.kind());
        }
    }
}
