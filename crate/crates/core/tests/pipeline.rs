use std::path::{Path, PathBuf};

use proptest::prelude::*;

use wsc_core::fixtures;
use wsc_core::io::read_json;
use wsc_core::pipeline::*;
use wsc_core::recovery::expected_bias;
use wsc_core::rng;
use wsc_core::world::*;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn load(name: &str) -> ExperimentConfig {
    read_json(&fixture_dir().join(name)).unwrap()
}

#[test]
fn forward_loss_examples() {
    let id = symmetric_noise_matrix(3, 0.0).unwrap();
    let l = supervised_forward_loss(&[0.0, 1.0, 0.0], &id, 1, 7.5).unwrap();
    assert_eq!((l.cross_entropy, l.logdet, l.total), (0.0, Some(0.0), 0.0));
    assert!(!l.clamped);

    let t = symmetric_noise_matrix(2, 0.2).unwrap();
    for g in [[0.3, 0.7], [1.0, 0.0], [0.5, 0.5]] {
        let l = supervised_forward_loss(&g, &t, 1, 1.0).unwrap();
        assert!((l.logdet.unwrap() - 0.6f64.ln()).abs() < 1e-15);
        let p = 0.2 * g[0] + 0.8 * g[1];
        assert!((l.cross_entropy + p.ln()).abs() < 1e-15);
    }

    for c in 2..6 {
        let g = vec![1.0 / c as f64; c];
        let l = supervised_forward_loss(&g, &symmetric_noise_matrix(c, 0.0).unwrap(), c - 1, 0.0).unwrap();
        assert!((l.cross_entropy - (c as f64).ln()).abs() < 1e-14);
    }

    // rectangular transition: no determinant term
    let scui = scui_transition(&ScuiParams::new(vec![0.5, 0.5]).unwrap()).unwrap();
    let l = supervised_forward_loss(&[0.5, 0.5], &scui, 2, 1.0).unwrap();
    assert!(l.logdet.is_none());
    assert_eq!(l.total, l.cross_entropy);

    assert!(supervised_forward_loss(&[1.0], &t, 0, 0.0).is_err());
    assert!(supervised_forward_loss(&[0.5, 0.5], &t, 2, 0.0).is_err());
}

#[test]
fn partial_loss_examples() {
    let g = [0.2, 0.5, 0.3];
    for y in 0..3 {
        let (v, clamped) = average_partial_loss(&g, 1 << y).unwrap();
        assert!((v + g[y].ln()).abs() < 1e-15 && !clamped);
    }
    let u = [0.25; 4];
    for mask in 1..16 {
        assert!((average_partial_loss(&u, mask).unwrap().0 - 4f64.ln()).abs() < 1e-15);
    }
    let (v, clamped) = average_partial_loss(&[1.0, 0.0, 0.0], 0b011).unwrap();
    assert!(clamped);
    assert!((v - (-LOG_CLAMP.ln()) / 2.0).abs() < 1e-12);
    assert!(v.is_finite());
    assert!(average_partial_loss(&g, 0).is_err());
    assert!(average_partial_loss(&g, 0b1000).is_err());
}

#[test]
fn consistency_examples() {
    assert_eq!(consistency_loss(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), (0.0, false));
    let (v, _) = consistency_loss(&[0.5, 0.2, 0.3], &[1.0, 0.0, 0.0]).unwrap();
    assert!((v - 2f64.ln()).abs() < 1e-15);
    let (v, _) = consistency_loss(&[1.0 / 3.0; 3], &[1.0 / 3.0; 3]).unwrap();
    assert!((v - 3f64.ln()).abs() < 1e-15);
    assert!(consistency_loss(&[0.5, 0.5], &[1.0]).is_err());
}

fn simplex(r: &mut rng::WscRng, c: usize) -> Vec<f64> {
    let f = fixtures::random_features(r, 1, c, 1.0);
    let e: Vec<f64> = f.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn supervised_losses_are_nonnegative(seed in any::<u64>(), c in 2usize..6) {
        let mut r = rng::seeded(seed);
        let g = simplex(&mut r, c);
        let h = simplex(&mut r, c);
        let t = symmetric_noise_matrix(c, 0.3).unwrap();
        prop_assert!(supervised_forward_loss(&g, &t, 0, 0.0).unwrap().cross_entropy >= 0.0);
        prop_assert!(average_partial_loss(&g, 0b11).unwrap().0 >= 0.0);
        prop_assert!(consistency_loss(&g, &h).unwrap().0 > 0.0);
        // Gibbs: cross entropy against a uniform target is at least log c
        let u = vec![1.0 / c as f64; c];
        prop_assert!(consistency_loss(&g, &u).unwrap().0 >= (c as f64).ln() - 1e-12);
    }
}

#[test]
fn experiment_is_deterministic_across_runs_and_thread_counts() {
    let cfg = load("experiment.json");
    let a = serde_json::to_string(&run_experiment(&cfg, &fixture_dir()).unwrap()).unwrap();
    let b = serde_json::to_string(&run_experiment(&cfg, &fixture_dir()).unwrap()).unwrap();
    assert_eq!(a, b);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let c = pool.install(|| serde_json::to_string(&run_experiment(&cfg, &fixture_dir()).unwrap()).unwrap());
    assert_eq!(a, c);
}

#[test]
fn experiment_report_shape() {
    let cfg = load("experiment.json");
    let rep = run_experiment(&cfg, &fixture_dir()).unwrap();
    assert!(rep.results.iter().all(|r| (0.0..=1.0).contains(&r.epsilon)));
    // per seed: self-supervised, then exact and corrupted for β = 1 and 4
    assert_eq!(rep.results.len(), cfg.seeds.len() * 5);
    assert_eq!(rep.bounds.len(), cfg.seeds.len());
    assert!(rep.results.iter().filter(|r| r.arm == "exact").all(|r| r.delta_s.abs() < 1e-12));
    assert!(rep.results.iter().filter(|r| r.arm == "corrupted").all(|r| r.delta_s > 0.5));
    let ssl = rep.median_epsilon("self_supervised", 0.0).unwrap();
    let sup = rep.median_epsilon("exact", 4.0).unwrap();
    assert!(sup <= ssl);
    let csv = rep.to_csv();
    assert_eq!(csv.lines().next(), Some("seed,arm,beta,epsilon"));
    assert_eq!(csv.lines().count(), rep.results.len() + 1);
}

#[test]
fn posterior_recovery_arm_runs() {
    let cfg = load("experiment_candidates.json");
    let rep = run_experiment(&cfg, &fixture_dir()).unwrap();
    assert!(rep.results.iter().any(|r| r.arm == "weak"));
    assert!(rep.results.iter().all(|r| (0.0..=1.0).contains(&r.epsilon)));
    let arm = train_single_arm(&cfg, &fixture_dir(), cfg.seeds[0]).unwrap();
    assert!(arm.result.final_features.iter().all(|v| v.is_finite()));
}

#[test]
fn posterior_head_outputs_distributions() {
    let cfg = load("experiment_candidates.json");
    let ww = cfg.weak_world(&fixture_dir()).unwrap();
    let data = sample_weak_dataset(&ww, 50, 50, 3).unwrap();
    let mut r = rng::seeded(2);
    let f = fixtures::random_features(&mut r, ww.world().aug_points(), 2, 1.0);
    let g = fit_posterior_head(&f, &ww, &data, &HeadConfig { steps: 40, ..HeadConfig::default() }, 5).unwrap();
    for row in g.rows() {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn corrupted_maps_are_biased() {
    for (name, ww, _) in fixtures::curated_worlds().unwrap() {
        let s = corrupted_recovery(&ww, 9).unwrap();
        assert!(expected_bias(&s, &ww).unwrap() > 0.5, "{name}");
        let again = corrupted_recovery(&ww, 9).unwrap();
        assert_eq!(s, again);
    }
}

#[test]
fn config_errors() {
    let mut cfg = load("experiment.json");
    cfg.seeds.clear();
    assert!(run_experiment(&cfg, &fixture_dir()).is_err());
    let mut cfg = load("experiment.json");
    cfg.beta_grid = vec![1.0, -1.0];
    assert!(run_experiment(&cfg, &fixture_dir()).is_err());
    let mut cfg = load("experiment.json");
    cfg.recovery = "scui".into();
    assert!(run_experiment(&cfg, &fixture_dir()).is_err());
    let mut cfg = load("experiment.json");
    cfg.world = WorldSource::Path { path: "missing.json".into() };
    assert!(run_experiment(&cfg, &fixture_dir()).is_err());
    let bad = serde_json::from_str::<ExperimentConfig>(r#"{"world": {"path": "a.json"}, "colour": 1}"#);
    assert!(bad.is_err());
}

#[test]
fn median_examples() {
    assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    assert!(median(&mut []).is_nan());
}
