mod common;

use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

use wsc_core::fixtures;
use wsc_core::graph::{self, build_perturbation_graph, normalize, Graph, GraphKind, PerturbationConfig};
use wsc_core::loss::*;
use wsc_core::recovery::{exact_recovery, Provenance, RecoveryMap};
use wsc_core::rng;
use wsc_core::spectral;
use wsc_core::world::*;
use wsc_core::Mat;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

#[test]
fn population_terms_match_enumeration() {
    for seed in 0..12 {
        let mut r = rng::seeded(seed);
        let ww = fixtures::random_weak_world(&mut r, 3, 2 + (seed as usize) % 2, 4, 3, false, seed % 3 == 0).unwrap();
        let c = ww.world().classes();
        let s = if seed % 2 == 0 {
            exact_recovery(&ww).unwrap()
        } else {
            RecoveryMap::shared(Provenance::Custom, fixtures::random_features(&mut r, c, 3, 1.0)).unwrap()
        };
        let cfg = PerturbationConfig::new(0.8, 1.7).unwrap();
        let f = fixtures::random_features(&mut r, 4, 2, 1.0);
        let b = population_loss(&f, &ww, &s, &cfg).unwrap();
        let t = common::loss_terms(&f, &ww, &s);
        for (got, want) in [b.l1, b.l2, b.l3, b.l4, b.l5].iter().zip(t.iter()) {
            assert!(rel(*got, *want) < 1e-12, "{got} vs {want}");
        }
        assert!(rel(b.total, common::loss_total(&t, &cfg)) < 1e-12);
    }
}

#[test]
fn zero_features_give_zero_loss() {
    let mut r = rng::seeded(1);
    let ww = fixtures::random_weak_world(&mut r, 3, 2, 4, 3, false, false).unwrap();
    let b = population_loss(&Array2::zeros((4, 3)), &ww, &exact_recovery(&ww).unwrap(), &PerturbationConfig::new(1.0, 1.0).unwrap())
        .unwrap();
    assert_eq!([b.l1, b.l2, b.l3, b.l4, b.l5, b.total], [0.0; 6]);
    let g = population_gradient(&Array2::zeros((4, 3)), &ww, &exact_recovery(&ww).unwrap(), &PerturbationConfig::new(1.0, 1.0).unwrap())
        .unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn uniform_prior_collapse() {
    for seed in 0..10 {
        let mut r = rng::seeded(seed + 20);
        let c = 2 + seed as usize % 3;
        let ww = fixtures::random_weak_world(&mut r, 4, c, 5, c + 1, true, seed % 2 == 0).unwrap();
        let s = exact_recovery(&ww).unwrap();
        let cfg = PerturbationConfig::new(0.6, 2.5).unwrap();
        let f = fixtures::random_features(&mut r, 5, 3, 1.0);
        let b = population_loss(&f, &ww, &s, &cfg).unwrap();
        let cf = c as f64;
        assert!((b.l4 - b.l3 / (cf * cf)).abs() <= 1e-12);
        assert!((b.l5 - b.l3 / cf).abs() <= 1e-12);
        let k = cfg.alpha + cfg.beta / cf;
        let collapsed = -2.0 * cfg.alpha * b.l1 - 2.0 * cfg.beta * b.l2 + k * k * b.l3;
        assert!((b.collapsed.unwrap() - collapsed).abs() <= 1e-12);
        assert!((b.total - collapsed).abs() <= 1e-10);
    }
    // non-uniform prior: no collapsed value
    let mut r = rng::seeded(3);
    let ww = fixtures::random_weak_world(&mut r, 4, 3, 5, 3, false, false).unwrap();
    let b = population_loss(&fixtures::random_features(&mut r, 5, 2, 1.0), &ww, &exact_recovery(&ww).unwrap(), &PerturbationConfig::new(1.0, 1.0).unwrap())
        .unwrap();
    assert!(b.collapsed.is_none());
}

#[test]
fn loss_plus_constant_is_the_factorization_objective() {
    for seed in 0..20 {
        let mut r = rng::seeded(seed + 40);
        let ww = fixtures::random_weak_world(&mut r, 4, 3, 6, 4, false, seed % 2 == 0).unwrap();
        let s = exact_recovery(&ww).unwrap();
        let cfg = PerturbationConfig::new(0.3 + seed as f64 * 0.1, 2.0 - seed as f64 * 0.05).unwrap();
        let norm = normalize(&build_perturbation_graph(&ww, &s, &cfg).unwrap()).unwrap();
        let a2: f64 = norm.matrix().iter().map(|v| v * v).sum();
        for _ in 0..10 {
            let f = fixtures::random_features(&mut r, 6, 3, 2.0);
            let lhs = matrix_factorization_objective(&norm, &f).unwrap() - population_loss(&f, &ww, &s, &cfg).unwrap().total;
            assert!(rel(lhs, a2) <= 1e-8);
        }
    }
}

#[test]
fn factorization_objective_examples() {
    let g = Graph::new(array![[1.0, 0.0], [0.0, 1.0]], GraphKind::Perturbation).unwrap();
    let n = normalize(&g).unwrap();
    assert_eq!(matrix_factorization_objective(&n, &Array2::eye(2)).unwrap(), 0.0);
    let mut r = rng::seeded(7);
    let a = fixtures::random_features(&mut r, 4, 4, 1.0).mapv(f64::abs);
    let g = Graph::new(&a + &a.t(), GraphKind::Perturbation).unwrap();
    let n = normalize(&g).unwrap();
    let a2: f64 = n.matrix().iter().map(|v| v * v).sum();
    assert!(rel(matrix_factorization_objective(&n, &Array2::zeros((4, 2))).unwrap(), a2) < 1e-15);
    // naive double loop with F_x = sqrt(D_x) f_x
    let f = fixtures::random_features(&mut r, 4, 2, 1.0);
    let w = g.weights();
    let deg: Vec<f64> = (0..4).map(|x| w.row(x).sum()).collect();
    let mut direct = 0.0;
    for x in 0..4 {
        for y in 0..4 {
            let at = w[[x, y]] / (deg[x] * deg[y]).sqrt();
            let ff: f64 = (0..2).map(|k| deg[x].sqrt() * f[[x, k]] * deg[y].sqrt() * f[[y, k]]).sum();
            direct += (at - ff).powi(2);
        }
    }
    assert!(rel(matrix_factorization_objective(&n, &f).unwrap(), direct) < 1e-13);
}

fn central_difference(f: &Mat, value: impl Fn(&Mat) -> f64) -> Mat {
    let h = 1e-5;
    Array2::from_shape_fn(f.dim(), |idx| {
        let mut p = f.clone();
        let mut m = f.clone();
        p[idx] += h;
        m[idx] -= h;
        (value(&p) - value(&m)) / (2.0 * h)
    })
}

#[test]
fn gradient_matches_central_differences() {
    for seed in 0..10 {
        let mut r = rng::seeded(seed + 60);
        let ww = fixtures::random_weak_world(&mut r, 3, 3, 5, 4, false, true).unwrap();
        let c = ww.world().classes();
        let s = if seed % 2 == 0 {
            exact_recovery(&ww).unwrap()
        } else {
            RecoveryMap::shared(Provenance::Custom, fixtures::random_features(&mut r, c, 4, 1.0)).unwrap()
        };
        let cfg = PerturbationConfig::new(1.0, 0.5 + seed as f64 * 0.3).unwrap();
        let f = fixtures::random_features(&mut r, 5, 3, 1.0);
        let g = population_gradient(&f, &ww, &s, &cfg).unwrap();
        let fd = central_difference(&f, |x| population_loss(x, &ww, &s, &cfg).unwrap().total);
        let err = (&g - &fd).iter().map(|v| v * v).sum::<f64>().sqrt() / g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err <= 1e-5, "{err}");
    }
}

#[test]
fn gradient_vanishes_at_the_spectral_optimum() {
    let ww = fixtures::grouped_world(3).unwrap();
    let s = exact_recovery(&ww).unwrap();
    let cfg = PerturbationConfig::new(1.0, 1.0).unwrap();
    let g = build_perturbation_graph(&ww, &s, &cfg).unwrap();
    let spec = spectral::eigendecompose(&normalize(&g).unwrap()).unwrap();
    let fstar = spectral::embedding_to_features(&spectral::optimal_embedding(&spec, 4).unwrap(), g.degrees()).unwrap();
    let grad = population_gradient(&fstar, &ww, &s, &cfg).unwrap();
    assert!(grad.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-6);
}

fn one(q1: f64, q2: f64, u: Option<(f64, f64)>) -> BatchFeatures {
    let (u1, u2) = match u {
        Some((a, b)) => (array![[a]], array![[b]]),
        None => (Array2::zeros((0, 1)), Array2::zeros((0, 1))),
    };
    BatchFeatures { q1: array![[q1]], q2: array![[q2]], u1, u2 }
}

#[test]
fn batch_hand_cases() {
    let cfg = PerturbationConfig::new(1.0, 0.0).unwrap();
    let v = batch_loss_uniform(&one(2.0, 3.0, None), &array![[1.0], [0.0]], &cfg, 2, BatchVariant::Verbatim).unwrap();
    assert_eq!(v, -2.0 * 6.0 + 36.0);
    // S' = prior · S col = 1; L1 = 2.5, L2 = 12, L3 = 18.5, L4 = 36, L5 = 26/4
    let cfg = PerturbationConfig::new(1.0, 1.0).unwrap();
    let prior = Array1::from(vec![0.5, 0.5]);
    let v = batch_loss_general(&one(2.0, 3.0, Some((1.0, -1.0))), &array![[1.0], [1.0]], &prior, &cfg, BatchVariant::Verbatim)
        .unwrap();
    assert!((v - (-5.0 - 24.0 + 18.5 + 36.0 + 13.0)).abs() < 1e-12, "{v}");
}

#[test]
fn batch_zero_features_and_errors() {
    let zero = BatchFeatures { q1: Array2::zeros((3, 2)), q2: Array2::zeros((3, 2)), u1: Array2::zeros((2, 2)), u2: Array2::zeros((2, 2)) };
    let cols = Array2::from_elem((2, 3), 0.5);
    let cfg = PerturbationConfig::new(1.0, 1.0).unwrap();
    let prior = Array1::from(vec![0.5, 0.5]);
    assert_eq!(batch_loss_uniform(&zero, &cols, &cfg, 2, BatchVariant::Verbatim).unwrap(), 0.0);
    assert_eq!(batch_loss_general(&zero, &cols, &prior, &cfg, BatchVariant::UStatistic).unwrap(), 0.0);
    let empty = BatchFeatures { q1: Array2::zeros((0, 2)), q2: Array2::zeros((0, 2)), u1: Array2::zeros((2, 2)), u2: Array2::zeros((2, 2)) };
    assert!(batch_loss_uniform(&empty, &Array2::zeros((2, 0)), &cfg, 2, BatchVariant::Verbatim).is_err());
    let neg = array![[1.0, -1.0, 1.0], [0.0, 0.0, 0.0]];
    let e = batch_loss_general(&zero, &neg, &prior, &cfg, BatchVariant::Verbatim).unwrap_err();
    assert!(matches!(e, wsc_core::Error::Domain { .. }), "{e}");
}

/// Mean and standard error of a batch estimator over `reps` resampled batches.
fn monte_carlo(ww: &WeakWorld, s: &RecoveryMap, f: &Mat, cfg: &PerturbationConfig, est: Estimator, reps: usize) -> (f64, f64) {
    let prior = ww.world().class_prior().clone();
    let mut sum = 0.0;
    let mut sq = 0.0;
    for k in 0..reps {
        let d = sample_weak_dataset(ww, 4, 4, rng::mix(99, 2 * k as u64)).unwrap();
        let v = sample_augmented_views(ww.world(), &d, rng::mix(99, 2 * k as u64 + 1)).unwrap();
        let x = BatchFeatures::gather(f, &v);
        let cols = recovery_columns(s, &v).unwrap();
        let val = match est {
            Estimator::Uniform => batch_loss_uniform(&x, &cols, cfg, ww.world().classes(), BatchVariant::UStatistic),
            Estimator::General => batch_loss_general(&x, &cols, &prior, cfg, BatchVariant::UStatistic),
        }
        .unwrap();
        sum += val;
        sq += val * val;
    }
    let n = reps as f64;
    let mean = sum / n;
    (mean, ((sq / n - mean * mean) / n).sqrt())
}

#[test]
fn general_estimator_is_unbiased_for_a_skewed_prior() {
    let mut r = rng::seeded(17);
    let ww = fixtures::random_weak_world(&mut r, 3, 2, 4, 2, false, false).unwrap();
    let s = RecoveryMap::shared(Provenance::Custom, array![[1.0, 0.2], [0.3, 1.0]]).unwrap();
    let cfg = PerturbationConfig::new(1.0, 0.7).unwrap();
    let f = fixtures::random_features(&mut r, 4, 2, 1.0);
    let pop = population_loss(&f, &ww, &s, &cfg).unwrap().total;
    let (mean, se) = monte_carlo(&ww, &s, &f, &cfg, Estimator::General, 20_000);
    assert!((mean - pop).abs() <= 4.0 * se, "{mean} vs {pop} (se {se})");
}

#[test]
fn population_training_descends_monotonically() {
    let mut r = rng::seeded(5);
    let ww = fixtures::random_weak_world(&mut r, 4, 2, 6, 3, false, false).unwrap();
    let s = exact_recovery(&ww).unwrap();
    let cfg = PerturbationConfig::new(1.0, 1.0).unwrap();
    let train = TrainConfig { d: 3, max_steps: 500, ..TrainConfig::default() };
    let res = train_features(&ww, &s, &cfg, &train).unwrap();
    let traj = res.loss_trajectory();
    assert!(traj.len() <= train.max_steps + 1);
    assert!(traj.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn identity_graph_is_fit_exactly() {
    // one class per instance, identity kernel: Ã = I
    let m = 4;
    let joint: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|y| if i == y { 0.1 + 0.1 * i as f64 } else { 0.0 }).collect()).collect();
    let kernel: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|x| if i == x { 1.0 } else { 0.0 }).collect()).collect();
    let w = build_world(&WorldSpec { instances: m, classes: m, aug_points: m, joint, aug_kernel: kernel, weak: None }).unwrap();
    let ww = WeakWorld::new(w, Transition::Global(symmetric_noise_matrix(m, 0.0).unwrap())).unwrap();
    let s = exact_recovery(&ww).unwrap();
    let cfg = PerturbationConfig::new(1.0, 0.0).unwrap();
    let res = train_features(&ww, &s, &cfg, &TrainConfig { d: m, ..TrainConfig::default() }).unwrap();
    assert!(res.converged);
    let g = build_perturbation_graph(&ww, &s, &cfg).unwrap();
    let norm = normalize(&g).unwrap();
    assert!(common::max_diff(norm.matrix(), &Array2::eye(m)) < 1e-15);
    assert!(matrix_factorization_objective(&norm, &res.final_features).unwrap() < 1e-8);
    let e = spectral::features_to_embedding(&res.final_features, g.degrees()).unwrap();
    assert!(common::max_diff(&e.dot(&e.t()), &Array2::eye(m)) < 1e-4);
}

#[test]
fn minibatch_training_is_deterministic() {
    let mut r = rng::seeded(6);
    let ww = fixtures::random_weak_world(&mut r, 3, 2, 4, 2, false, false).unwrap();
    let s = exact_recovery(&ww).unwrap();
    let cfg = PerturbationConfig::new(1.0, 1.0).unwrap();
    for est in [Estimator::Uniform, Estimator::General] {
        let train = TrainConfig { d: 2, max_steps: 50, mode: TrainMode::Minibatch, step_size: 0.05, batch_q: 8, batch_u: 8, seed: 11, estimator: est, ..TrainConfig::default() };
        let a = train_features(&ww, &s, &cfg, &train).unwrap();
        let b = train_features(&ww, &s, &cfg, &train).unwrap();
        assert_eq!(a.loss_trajectory(), b.loss_trajectory());
        assert_eq!(a.final_features, b.final_features);
    }
}

#[test]
fn minibatch_divergence_is_reported() {
    let mut r = rng::seeded(6);
    let ww = fixtures::random_weak_world(&mut r, 3, 2, 4, 2, false, false).unwrap();
    let s = exact_recovery(&ww).unwrap();
    let cfg = PerturbationConfig::new(1.0, 1.0).unwrap();
    let train = TrainConfig { d: 2, max_steps: 200, mode: TrainMode::Minibatch, step_size: 1e4, init_scale: 1.0, ..TrainConfig::default() };
    assert!(matches!(train_features(&ww, &s, &cfg, &train).unwrap_err(), wsc_core::Error::Diverged { .. }));
}

#[test]
fn trainer_config_validation() {
    let mut r = rng::seeded(6);
    let ww = fixtures::random_weak_world(&mut r, 3, 2, 4, 2, false, false).unwrap();
    let s = exact_recovery(&ww).unwrap();
    let cfg = PerturbationConfig::new(1.0, 1.0).unwrap();
    assert!(train_features(&ww, &s, &cfg, &TrainConfig { d: 0, ..TrainConfig::default() }).is_err());
    assert!(train_features(&ww, &s, &cfg, &TrainConfig { step_size: 0.0, ..TrainConfig::default() }).is_err());
}

#[test]
fn loss_degrees_equal_graph_degrees_for_exact_maps() {
    let mut r = rng::seeded(8);
    let ww = fixtures::random_weak_world(&mut r, 4, 3, 5, 4, false, true).unwrap();
    let s = exact_recovery(&ww).unwrap();
    let cfg = PerturbationConfig::new(0.4, 1.9).unwrap();
    let obj = WscObjective::population(&ww, &s, &cfg).unwrap();
    let g = graph::build_perturbation_graph(&ww, &s, &cfg).unwrap();
    for x in 0..5 {
        assert!((obj.loss_degrees()[x] - g.degrees()[x]).abs() < 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reassembly_is_exact(seed in any::<u64>(), a in 0.0f64..3.0, b in 0.01f64..3.0) {
        let mut r = rng::seeded(seed);
        let ww = fixtures::random_weak_world(&mut r, 3, 3, 4, 3, false, false).unwrap();
        let s = exact_recovery(&ww).unwrap();
        let cfg = PerturbationConfig::new(a, b).unwrap();
        let l = population_loss(&fixtures::random_features(&mut r, 4, 2, 1.0), &ww, &s, &cfg).unwrap();
        let re = -2.0 * a * l.l1 - 2.0 * b * l.l2 + a * a * l.l3 + b * b * l.l4 + 2.0 * a * b * l.l5;
        prop_assert!((l.total - re).abs() <= 1e-12 * re.abs().max(1.0));
    }

    #[test]
    fn factorization_identity_holds(seed in any::<u64>(), a in 0.05f64..3.0, b in 0.0f64..3.0) {
        let mut r = rng::seeded(seed);
        let ww = fixtures::random_weak_world(&mut r, 3, 2, 5, 3, false, true).unwrap();
        let s = exact_recovery(&ww).unwrap();
        let cfg = PerturbationConfig::new(a, b).unwrap();
        let norm = normalize(&build_perturbation_graph(&ww, &s, &cfg).unwrap()).unwrap();
        let a2: f64 = norm.matrix().iter().map(|v| v * v).sum();
        let f = fixtures::random_features(&mut r, 5, 3, 1.0);
        let lhs = matrix_factorization_objective(&norm, &f).unwrap() - population_loss(&f, &ww, &s, &cfg).unwrap().total;
        prop_assert!(rel(lhs, a2) <= 1e-8);
    }
}
