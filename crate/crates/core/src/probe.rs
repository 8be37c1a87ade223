//! Linear probe on frozen features and its ensembled error.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::io::mat_to_rows;
use crate::linalg;
use crate::world::WorldModel;
use crate::{Error, Mat, Result};

pub const DEFAULT_RIDGE: f64 = 1e-8;

/// d×c weights B; the score of class y at x is (Bᵀ f_x)_y.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    weights: Mat,
    ridge: f64,
}

impl LinearProbe {
    pub fn new(weights: Mat, ridge: f64) -> Self {
        LinearProbe { weights, ridge }
    }
    pub fn weights(&self) -> &Mat {
        &self.weights
    }
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn scores(&self, f: &Mat) -> Result<Mat> {
        if f.ncols() != self.weights.nrows() {
            return Err(Error::dimension("features", format!("{} columns", self.weights.nrows()), f.ncols()));
        }
        Ok(f.dot(&self.weights))
    }

    /// argmax per row, lowest class index on ties.
    pub fn predict(&self, f: &Mat) -> Result<Vec<usize>> {
        Ok(self.scores(f)?.rows().into_iter().map(|r| argmax(r.iter().copied())).collect())
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Minimize Σ_{x̃,y} P(x̃,y) Σ_x A(x|x̃) ‖e_y - Bᵀ f_x‖² + ridge ‖B‖²_F via
/// the normal equations (Σ_x P(x) f_x f_xᵀ + ridge I) B = Σ_x f_x m_xᵀ with
/// m_x the augmentation-class mass at x.
pub fn fit_linear_probe(f: &Mat, world: &WorldModel, ridge: f64) -> Result<LinearProbe> {
    let n = world.aug_points();
    if f.nrows() != n {
        return Err(Error::dimension("features", format!("{n} rows"), f.nrows()));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::invalid("ridge", "must be finite and non-negative"));
    }
    let d = f.ncols();
    let px = world.aug_marginal();
    let mut weighted = f.clone();
    for (x, mut row) in weighted.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v * px[x]);
    }
    let gram = f.t().dot(&weighted) + Array2::<f64>::eye(d) * ridge;
    let rhs = f.t().dot(&world.aug_class_mass());
    let b = match linalg::solve(&gram, &rhs) {
        Ok(b) => b,
        Err(Error::Singular(msg)) if ridge == 0.0 => {
            return Err(Error::Singular(format!("{msg}; the probe needs a positive ridge for these features")))
        }
        Err(e) => return Err(e),
    };
    let resid = linalg::max_abs(&(gram.dot(&b) - &rhs));
    let scale = linalg::max_abs(&rhs).max(1.0);
    if resid > 1e-8 * scale {
        return Err(Error::Numerical(format!("probe normal equations residual {resid:e}")));
    }
    Ok(LinearProbe::new(b, ridge))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Σ P(x̃, y) 1[h̃(x̃) ≠ y].
    pub epsilon: f64,
    /// h(x) per augmentation point.
    pub aug_predictions: Vec<usize>,
    /// h̃(x̃): majority vote of h over A(·|x̃), lowest class on ties.
    pub instance_predictions: Vec<usize>,
    /// Mass of (true class, predicted class) pairs.
    pub confusion: Vec<Vec<f64>>,
}

impl ProbeResult {
    pub fn confusion_csv(&self) -> String {
        let c = self.confusion.len();
        let mut header: Vec<String> = vec!["true_class".into()];
        header.extend((0..c).map(|k| format!("pred_{k}")));
        let rows: Vec<Vec<String>> = self
            .confusion
            .iter()
            .enumerate()
            .map(|(y, r)| std::iter::once(y.to_string()).chain(r.iter().map(|v| v.to_string())).collect())
            .collect();
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        crate::io::csv_string(&h, &rows)
    }
}

pub fn ensemble_error(probe: &LinearProbe, f: &Mat, world: &WorldModel) -> Result<ProbeResult> {
    if f.nrows() != world.aug_points() {
        return Err(Error::dimension("features", format!("{} rows", world.aug_points()), f.nrows()));
    }
    let c = world.classes();
    if probe.weights().ncols() != c {
        return Err(Error::dimension("probe", format!("{c} classes"), probe.weights().ncols()));
    }
    let h = probe.predict(f)?;
    let k = world.kernel();
    let mut instance_predictions = Vec::with_capacity(world.instances());
    for i in 0..world.instances() {
        let mut votes = vec![0.0; c];
        for (x, &hx) in h.iter().enumerate() {
            votes[hx] += k[[i, x]];
        }
        instance_predictions.push(argmax(votes.into_iter()));
    }
    let mut confusion = Array2::zeros((c, c));
    let mut epsilon = 0.0;
    for i in 0..world.instances() {
        for y in 0..c {
            let mass = world.joint()[[i, y]];
            confusion[[y, instance_predictions[i]]] += mass;
            if instance_predictions[i] != y {
                epsilon += mass;
            }
        }
    }
    Ok(ProbeResult { epsilon, aug_predictions: h, instance_predictions, confusion: mat_to_rows(&confusion) })
}

/// Fit the probe and score it in one go.
pub fn probe_error(f: &Mat, world: &WorldModel, ridge: f64) -> Result<ProbeResult> {
    let probe = fit_linear_probe(f, world, ridge)?;
    ensemble_error(&probe, f, world)
}
