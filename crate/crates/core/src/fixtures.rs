//! Seeded random worlds and a few hand-built ones. Used by the tests, the
//! invariant checker and the example configs.

use ndarray::Array2;
use rand::Rng;

use crate::rng::{self, WscRng};
use crate::world::{
    asymmetric_pair_noise_matrix, symmetric_noise_matrix, ScuiParams, Transition, TransitionMatrix, WeakWorld,
    WorldModel,
};
use crate::{Mat, Result};

fn positive(r: &mut WscRng) -> f64 {
    0.05 + r.random::<f64>()
}

/// Random kernel rows where each entry is dropped with probability
/// `sparsity`, keeping every row and column non-empty.
pub fn random_kernel(r: &mut WscRng, m: usize, n: usize, sparsity: f64) -> Mat {
    let mut k = Array2::zeros((m, n));
    for i in 0..m {
        for x in 0..n {
            if r.random::<f64>() >= sparsity {
                k[[i, x]] = positive(r);
            }
        }
        if k.row(i).sum() == 0.0 {
            k[[i, r.random_range(0..n)]] = 1.0;
        }
    }
    for x in 0..n {
        if k.column(x).sum() == 0.0 {
            k[[r.random_range(0..m), x]] = positive(r);
        }
    }
    for mut row in k.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    k
}

/// Random joint with strictly positive entries; with `uniform_prior` every
/// class column is rescaled to mass 1/c.
pub fn random_joint(r: &mut WscRng, m: usize, c: usize, uniform_prior: bool) -> Mat {
    let mut j = Array2::from_shape_fn((m, c), |_| positive(r));
    if uniform_prior {
        for mut col in j.columns_mut() {
            let s = col.sum();
            col.mapv_inplace(|v| v / (s * c as f64));
        }
    } else {
        let s = j.sum();
        j.mapv_inplace(|v| v / s);
    }
    j
}

pub fn random_world(r: &mut WscRng, m: usize, c: usize, n: usize, uniform_prior: bool) -> Result<WorldModel> {
    let joint = random_joint(r, m, c, uniform_prior);
    let kernel = random_kernel(r, m, n, 0.4);
    WorldModel::new(joint, kernel)
}

pub fn random_transition(r: &mut WscRng, v: usize, c: usize) -> Result<TransitionMatrix> {
    let mut t = Array2::from_shape_fn((v, c), |_| positive(r));
    for mut col in t.columns_mut() {
        let s = col.sum();
        col.mapv_inplace(|x| x / s);
    }
    TransitionMatrix::new(t)
}

/// Random world with a random global channel of `v` weak labels, or a
/// per-instance one when `per_instance` is set.
pub fn random_weak_world(
    r: &mut WscRng,
    m: usize,
    c: usize,
    n: usize,
    v: usize,
    uniform_prior: bool,
    per_instance: bool,
) -> Result<WeakWorld> {
    let w = random_world(r, m, c, n, uniform_prior)?;
    let t = if per_instance {
        Transition::PerInstance((0..m).map(|_| random_transition(r, v, c)).collect::<Result<_>>()?)
    } else {
        Transition::Global(random_transition(r, v, c)?)
    };
    WeakWorld::new(w, t)
}

pub fn random_features(r: &mut WscRng, n: usize, d: usize, scale: f64) -> Mat {
    Array2::from_shape_fn((n, d), |_| rng::symmetric_uniform(r, scale))
}

/// World where every instance belongs to a single class and owns its own
/// `per_instance` augmentation points. Classes get equal mass, spread over
/// their instances with the given relative weights.
pub fn clustered_world(c: usize, weights_per_class: &[f64], per_instance: usize) -> Result<WorldModel> {
    let k = weights_per_class.len();
    let m = c * k;
    let n = m * per_instance;
    let wsum: f64 = weights_per_class.iter().sum();
    let mut joint = Array2::zeros((m, c));
    let mut kernel = Array2::zeros((m, n));
    for y in 0..c {
        for (j, &w) in weights_per_class.iter().enumerate() {
            let i = y * k + j;
            joint[[i, y]] = w / wsum / c as f64;
            for a in 0..per_instance {
                kernel[[i, i * per_instance + a]] = 1.0 / per_instance as f64;
            }
        }
    }
    WorldModel::new(joint, kernel)
}

/// Three small worlds whose classes are separable but whose self-supervised
/// graphs split each class into several disconnected pieces, so weak labels
/// are needed to tie a class together. Returns (name, world, d).
pub fn curated_worlds() -> Result<Vec<(&'static str, WeakWorld, usize)>> {
    let a = clustered_world(3, &[1.0, 1.5], 2)?;
    let a = WeakWorld::new(a, Transition::Global(symmetric_noise_matrix(3, 0.2)?))?;
    let b = clustered_world(2, &[1.0, 1.3, 0.8], 2)?;
    let b = WeakWorld::with_scui(b, ScuiParams::new(vec![0.3, 0.4])?)?;
    let c = clustered_world(4, &[1.0, 1.2], 1)?;
    let c = WeakWorld::new(c, Transition::Global(asymmetric_pair_noise_matrix(4, 0.25)?))?;
    Ok(vec![("three_class_pairs", a, 3), ("two_class_candidates", b, 2), ("four_class_flips", c, 4)])
}

/// 20 augmentation points with a clear gap after the fourth eigenvalue of
/// the normalized perturbation graph: four groups of instances that mostly
/// share augmentations within the group.
pub fn grouped_world(seed: u64) -> Result<WeakWorld> {
    let mut r = rng::seeded(seed);
    let (groups, per_group, n) = (4, 2, 20);
    let m = groups * per_group;
    let c = 2;
    let mut kernel = Array2::zeros((m, n));
    for i in 0..m {
        let g = i / per_group;
        for x in 0..n {
            let home = x % groups == g;
            kernel[[i, x]] = if home { positive(&mut r) } else { 0.02 * r.random::<f64>() };
        }
        let s = kernel.row(i).sum();
        kernel.row_mut(i).mapv_inplace(|v| v / s);
    }
    let mut joint = Array2::zeros((m, c));
    for i in 0..m {
        let y = (i / per_group) % c;
        joint[[i, y]] = 0.8 * positive(&mut r);
        joint[[i, 1 - y]] = 0.2 * positive(&mut r);
    }
    let s = joint.sum();
    joint.mapv_inplace(|v| v / s);
    let w = WorldModel::new(joint, kernel)?;
    WeakWorld::new(w, Transition::Global(symmetric_noise_matrix(c, 0.1)?))
}
