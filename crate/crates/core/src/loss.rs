//! The weak spectral contrastive objective.
//!
//! Population form, with G = f fᵀ and D = α P(x) + β s'(x):
//!
//!   L(f) = -2α L1 - 2β L2 + α² L3 + β² L4 + 2αβ L5
//!        = -2 Σ A∘G + Σ D_x D_x' G²_xx'
//!
//! where A = α w^u + β w^wl and s'(x) = Σ_{x̃,q} P(x̃,q) A(x|x̃) S(x̃)[:,q]·P(y).
//! The minibatch estimators and the trainer live here as well.

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::graph::{self, NormalizedGraph, PerturbationConfig};
use crate::recovery::RecoveryMap;
use crate::rng;
use crate::spectral;
use crate::world::{sample_augmented_views, sample_weak_dataset, ViewBatch, WeakDataset, WeakWorld};
use crate::{Error, Mat, Result, Vector};

/// Prior entries within this of 1/c count as uniform.
pub const UNIFORM_TOL: f64 = 1e-12;
/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub l5: f64,
    pub total: f64,
    /// -2α L1 - 2β L2 + (α + β/c)² L3, reported when the class prior is uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collapsed: Option<f64>,
}

/// Everything the objective needs, precomputed on the augmentation space.
#[derive(Debug, Clone)]
pub struct WscObjective {
    alpha: f64,
    beta: f64,
    classes: usize,
    wu: Mat,
    wwl: Mat,
    p_aug: Vector,
    s_prime: Vector,
    uniform_prior: bool,
}

impl WscObjective {
    /// Objective under the world's own distribution.
    pub fn population(ww: &WeakWorld, s: &RecoveryMap, cfg: &PerturbationConfig) -> Result<Self> {
        let w = ww.world();
        Self::assemble(ww, s, cfg, w.instance_marginal(), &ww.weak_joint())
    }

    /// Objective under the empirical distribution of a sample: instance
    /// frequencies over all draws, weak-label frequencies over the labeled
    /// draws, expectation over augmentations kept exact.
    pub fn empirical(ww: &WeakWorld, data: &WeakDataset, s: &RecoveryMap, cfg: &PerturbationConfig) -> Result<Self> {
        let m = ww.world().instances();
        let v = ww.weak_labels();
        let total = data.labeled.len() + data.unlabeled.len();
        if total == 0 {
            return Err(Error::invalid("dataset", "no samples"));
        }
        let mut pi = Vector::zeros(m);
        let mut omega = Array2::zeros((m, v));
        for l in &data.labeled {
            if l.instance >= m || l.weak >= v {
                return Err(Error::invalid("dataset.labeled", "index out of range"));
            }
            pi[l.instance] += 1.0 / total as f64;
            omega[[l.instance, l.weak]] += 1.0 / data.labeled.len() as f64;
        }
        for &i in &data.unlabeled {
            if i >= m {
                return Err(Error::invalid("dataset.unlabeled", "index out of range"));
            }
            pi[i] += 1.0 / total as f64;
        }
        Self::assemble(ww, s, cfg, &pi, &omega)
    }

    fn assemble(ww: &WeakWorld, s: &RecoveryMap, cfg: &PerturbationConfig, pi: &Vector, omega: &Mat) -> Result<Self> {
        cfg.validate()?;
        s.check_against(ww)?;
        let w = ww.world();
        let k = w.kernel();
        let mut scaled = k.clone();
        for (i, mut row) in scaled.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| v * pi[i]);
        }
        let wu = k.t().dot(&scaled);
        let wu = (&wu + &wu.t()) * 0.5;
        // u(x̃) = Σ_q ω(x̃, q) S(x̃)[:, q]
        let mut u = Array2::zeros((w.instances(), w.classes()));
        for i in 0..w.instances() {
            u.row_mut(i).assign(&s.matrix_for(i).dot(&omega.row(i)));
        }
        let lifted = k.t().dot(&u);
        let wwl = lifted.dot(&lifted.t());
        let wwl = (&wwl + &wwl.t()) * 0.5;
        let p_aug = k.t().dot(pi);
        let s_prime = lifted.dot(w.class_prior());
        Ok(WscObjective {
            alpha: cfg.alpha,
            beta: cfg.beta,
            classes: w.classes(),
            wu,
            wwl,
            p_aug,
            s_prime,
            uniform_prior: w.has_uniform_prior(UNIFORM_TOL),
        })
    }

    pub fn n(&self) -> usize {
        self.wu.nrows()
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn self_supervised_weights(&self) -> &Mat {
        &self.wu
    }
    pub fn weak_weights(&self) -> &Mat {
        &self.wwl
    }
    /// P(x) under the objective's instance distribution.
    pub fn aug_marginal(&self) -> &Vector {
        &self.p_aug
    }
    pub fn s_prime(&self) -> &Vector {
        &self.s_prime
    }

    /// α w^u + β w^wl.
    pub fn adjacency(&self) -> Mat {
        &self.wu * self.alpha + &self.wwl * self.beta
    }

    /// D_x = α P(x) + β s'(x). Equal to the graph degrees for an exact map.
    pub fn loss_degrees(&self) -> Vector {
        &self.p_aug * self.alpha + &self.s_prime * self.beta
    }

    fn check(&self, f: &Mat) -> Result<()> {
        if f.nrows() != self.n() {
            return Err(Error::dimension("features", format!("{} rows", self.n()), f.nrows()));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature value".into()));
        }
        Ok(())
    }

    pub fn evaluate(&self, f: &Mat) -> Result<LossBreakdown> {
        self.check(f)?;
        let g = f.dot(&f.t());
        let h = g.mapv(|v| v * v);
        let l1 = (&self.wu * &g).sum();
        let l2 = (&self.wwl * &g).sum();
        let hp = h.dot(&self.p_aug);
        let hs = h.dot(&self.s_prime);
        let l3 = self.p_aug.dot(&hp);
        let l4 = self.s_prime.dot(&hs);
        let l5 = self.s_prime.dot(&hp);
        let (a, b) = (self.alpha, self.beta);
        let total = -2.0 * a * l1 - 2.0 * b * l2 + a * a * l3 + b * b * l4 + 2.0 * a * b * l5;
        let collapsed = self.uniform_prior.then(|| {
            let k = a + b / self.classes as f64;
            -2.0 * a * l1 - 2.0 * b * l2 + k * k * l3
        });
        Ok(LossBreakdown { l1, l2, l3, l4, l5, total, collapsed })
    }

    pub fn value(&self, f: &Mat) -> Result<f64> {
        self.check(f)?;
        let d = self.loss_degrees();
        let g = f.dot(&f.t());
        let a = self.adjacency();
        let mut total = 0.0;
        for ((i, j), &gij) in g.indexed_iter() {
            total += -2.0 * a[[i, j]] * gij + d[i] * d[j] * gij * gij;
        }
        Ok(total)
    }

    /// ∂L/∂f_x = -4 Σ A_xx' f_x' + 4 D_x Σ D_x' (f_x·f_x') f_x'.
    pub fn gradient(&self, f: &Mat) -> Result<Mat> {
        self.check(f)?;
        let d = self.loss_degrees();
        let mut m = f.dot(&f.t());
        for ((i, j), v) in m.indexed_iter_mut() {
            *v *= d[i] * d[j];
        }
        Ok((m - self.adjacency()).dot(f) * 4.0)
    }
}

pub fn population_loss(f: &Mat, ww: &WeakWorld, s: &RecoveryMap, cfg: &PerturbationConfig) -> Result<LossBreakdown> {
    WscObjective::population(ww, s, cfg)?.evaluate(f)
}

pub fn population_gradient(f: &Mat, ww: &WeakWorld, s: &RecoveryMap, cfg: &PerturbationConfig) -> Result<Mat> {
    WscObjective::population(ww, s, cfg)?.gradient(f)
}

/// ‖Ã - F Fᵀ‖²_F with F_x = sqrt(A_x) f_x.
pub fn matrix_factorization_objective(norm: &NormalizedGraph, f: &Mat) -> Result<f64> {
    let e = spectral::features_to_embedding(f, norm.degrees())?;
    Ok(crate::linalg::frobenius_sq(&(norm.matrix() - &e.dot(&e.t()))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Uniform class prior: the L3/L4/L5 terms fold into one.
    Uniform,
    #[default]
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchVariant {
    /// Average over all pairs, diagonal included.
    #[default]
    Verbatim,
    /// Drop the i = j pairs so each term is unbiased.
    UStatistic,
}

/// Feature rows for a minibatch: first and second views of the labeled
/// samples, then of the unlabeled ones.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchFeatures {
    pub q1: Mat,
    pub q2: Mat,
    pub u1: Mat,
    pub u2: Mat,
}

impl BatchFeatures {
    pub fn gather(f: &Mat, batch: &ViewBatch) -> Self {
        let take = |samples: &[crate::world::ViewSample], view: usize| {
            let mut m = Array2::zeros((samples.len(), f.ncols()));
            for (r, smp) in samples.iter().enumerate() {
                m.row_mut(r).assign(&f.row(smp.views[view]));
            }
            m
        };
        BatchFeatures {
            q1: take(&batch.labeled, 0),
            q2: take(&batch.labeled, 1),
            u1: take(&batch.unlabeled, 0),
            u2: take(&batch.unlabeled, 1),
        }
    }

    pub fn labeled(&self) -> usize {
        self.q1.nrows()
    }
    pub fn unlabeled(&self) -> usize {
        self.u1.nrows()
    }

    fn zeros_like(&self) -> Self {
        BatchFeatures {
            q1: Array2::zeros(self.q1.dim()),
            q2: Array2::zeros(self.q2.dim()),
            u1: Array2::zeros(self.u1.dim()),
            u2: Array2::zeros(self.u2.dim()),
        }
    }
}

/// Column i is S(x̃_i)[:, q_i] for the i-th labeled sample.
pub fn recovery_columns(s: &RecoveryMap, batch: &ViewBatch) -> Result<Mat> {
    let mut out = Array2::zeros((s.classes(), batch.labeled.len()));
    for (i, smp) in batch.labeled.iter().enumerate() {
        let q = smp.weak.ok_or_else(|| Error::invalid(format!("labeled[{i}]"), "missing weak label"))?;
        if q >= s.weak_labels() {
            return Err(Error::invalid(format!("labeled[{i}]"), "weak label out of range"));
        }
        out.column_mut(i).assign(&s.matrix_for(smp.instance).column(q));
    }
    Ok(out)
}

/// Σ_{i,j} c_ij (a_i·b_j)^power, optionally skipping i = j, with gradient
/// contributions `scale * ∂/∂a` and `scale * ∂/∂b` added to `grad`.
fn pair_term(
    a: &Mat,
    b: &Mat,
    coef: impl Fn(usize, usize) -> f64,
    skip_diag: bool,
    power: i32,
    grad: Option<(&mut Mat, &mut Mat, f64)>,
) -> f64 {
    let p = a.dot(&b.t());
    let mut c = Array2::zeros(p.dim());
    let mut value = 0.0;
    for ((i, j), &pij) in p.indexed_iter() {
        if skip_diag && i == j {
            continue;
        }
        let w = coef(i, j);
        if power == 1 {
            value += w * pij;
            c[[i, j]] = w;
        } else {
            value += w * pij * pij;
            c[[i, j]] = 2.0 * w * pij;
        }
    }
    if let Some((ga, gb, scale)) = grad {
        ga.scaled_add(scale, &c.dot(b));
        gb.scaled_add(scale, &c.t().dot(a));
    }
    value
}

fn pairs(n: usize, variant: BatchVariant) -> f64 {
    match variant {
        BatchVariant::Verbatim => (n * n) as f64,
        BatchVariant::UStatistic => (n * n.saturating_sub(1)) as f64,
    }
}

/// Per-term batch estimates, with the assembled loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchTerms {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub l5: f64,
    pub total: f64,
}

/// Weight that sits under an elementwise square root. Negatives down to -1e-12
/// are rounding noise and become zero; anything below is a domain error.
fn sqrt_weight(v: f64, row: usize, col: usize) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v >= -1e-12 {
        Ok(0.0)
    } else {
        Err(Error::Domain { row, col, value: v })
    }
}

/// Minibatch estimate of the loss and, if asked, its gradient with respect to
/// the batch feature rows. `prior` selects the general estimator; `None`
/// selects the uniform-prior one with `classes` classes.
pub fn batch_objective(
    x: &BatchFeatures,
    s_cols: &Mat,
    prior: Option<&Vector>,
    classes: usize,
    cfg: &PerturbationConfig,
    variant: BatchVariant,
    want_grad: bool,
) -> Result<(BatchTerms, Option<BatchFeatures>)> {
    cfg.validate()?;
    let (bq, bu) = (x.labeled(), x.unlabeled());
    let (alpha, beta) = (cfg.alpha, cfg.beta);
    if s_cols.ncols() != bq {
        return Err(Error::dimension("recovery columns", format!("{bq} columns"), s_cols.ncols()));
    }
    if bq + bu == 0 {
        return Err(Error::invalid("batch", "empty batch"));
    }
    if beta > 0.0 && bq == 0 {
        return Err(Error::invalid("batch", "beta > 0 needs at least one weakly labeled sample"));
    }
    if beta > 0.0 && variant == BatchVariant::UStatistic && bq < 2 {
        return Err(Error::invalid("batch", "the U-statistic needs at least two weakly labeled samples"));
    }
    let ustat = variant == BatchVariant::UStatistic;
    let mut grad = want_grad.then(|| x.zeros_like());
    let b = (bq + bu) as f64;

    // L1: matched views over the whole batch
    let l1 = {
        let mut v = 0.0;
        for i in 0..bq {
            v += x.q1.row(i).dot(&x.q2.row(i));
        }
        for i in 0..bu {
            v += x.u1.row(i).dot(&x.u2.row(i));
        }
        if let Some(g) = grad.as_mut() {
            let sc = -2.0 * alpha / b;
            g.q1.scaled_add(sc, &x.q2);
            g.q2.scaled_add(sc, &x.q1);
            g.u1.scaled_add(sc, &x.u2);
            g.u2.scaled_add(sc, &x.u1);
        }
        v / b
    };

    // L2: recovered class overlap between labeled pairs
    let l2 = if bq > 0 && (beta > 0.0 || !want_grad) {
        let w = s_cols.t().dot(s_cols);
        let n2 = pairs(bq, variant);
        let sc = -2.0 * beta / n2;
        let gr = grad.as_mut().map(|g| (&mut g.q1, &mut g.q2, sc));
        if n2 > 0.0 {
            pair_term(&x.q1, &x.q2, |i, j| w[[i, j]], ustat, 1, gr) / n2
        } else {
            0.0
        }
    } else {
        0.0
    };

    let (l3, l4, l5, total);
    match prior {
        None => {
            let k = alpha + beta / classes as f64;
            let x1 = concatenate![Axis(0), x.q1, x.u1];
            let x2 = concatenate![Axis(0), x.q2, x.u2];
            let n3 = pairs(bq + bu, variant);
            let (mut g1, mut g2) = (Array2::zeros(x1.dim()), Array2::zeros(x2.dim()));
            let gr = grad.is_some().then_some((&mut g1, &mut g2, k * k / n3));
            l3 = if n3 > 0.0 { pair_term(&x1, &x2, |_, _| 1.0, ustat, 2, gr) / n3 } else { 0.0 };
            if let Some(g) = grad.as_mut() {
                g.q1 += &g1.slice(s![..bq, ..]);
                g.u1 += &g1.slice(s![bq.., ..]);
                g.q2 += &g2.slice(s![..bq, ..]);
                g.u2 += &g2.slice(s![bq.., ..]);
            }
            l4 = l3 / (classes * classes) as f64;
            l5 = l3 / classes as f64;
            total = -2.0 * alpha * l1 - 2.0 * beta * l2 + k * k * l3;
        }
        Some(py) => {
            if py.len() != s_cols.nrows() {
                return Err(Error::dimension("prior", format!("{} entries", s_cols.nrows()), py.len()));
            }
            let sp: Vector = s_cols.t().dot(py);
            let n3 = pairs(bq, variant) + pairs(bu, variant);
            l3 = if n3 > 0.0 {
                let sc = alpha * alpha / n3;
                let a = {
                    let gr = grad.as_mut().map(|g| (&mut g.q1, &mut g.q2, sc));
                    pair_term(&x.q1, &x.q2, |_, _| 1.0, ustat, 2, gr)
                };
                let c = {
                    let gr = grad.as_mut().map(|g| (&mut g.u1, &mut g.u2, sc));
                    pair_term(&x.u1, &x.u2, |_, _| 1.0, ustat, 2, gr)
                };
                (a + c) / n3
            } else {
                0.0
            };
            l4 = if bq > 0 {
                let mut w = Array2::zeros((bq, bq));
                for i in 0..bq {
                    for j in 0..bq {
                        w[[i, j]] = sqrt_weight(sp[i] * sp[j], i, j)?;
                    }
                }
                let n4 = pairs(bq, variant);
                if n4 > 0.0 {
                    let gr = grad.as_mut().map(|g| (&mut g.q1, &mut g.q2, beta * beta / n4));
                    pair_term(&x.q1, &x.q2, |i, j| w[[i, j]], ustat, 2, gr) / n4
                } else {
                    0.0
                }
            } else {
                0.0
            };
            l5 = if bq > 0 && bu > 0 {
                let mut dup = Vector::zeros(2 * bq);
                for i in 0..bq {
                    let v = sqrt_weight(sp[i], i, i)?;
                    dup[i] = v;
                    dup[bq + i] = v;
                }
                let xq = concatenate![Axis(0), x.q1, x.q2];
                let xu = concatenate![Axis(0), x.u1, x.u2];
                let n5 = (4 * bq * bu) as f64;
                let (mut gq, mut gu) = (Array2::zeros(xq.dim()), Array2::zeros(xu.dim()));
                let gr = grad.is_some().then_some((&mut gq, &mut gu, 2.0 * alpha * beta / n5));
                let v = pair_term(&xq, &xu, |a, _| dup[a], false, 2, gr) / n5;
                if let Some(g) = grad.as_mut() {
                    g.q1 += &gq.slice(s![..bq, ..]);
                    g.q2 += &gq.slice(s![bq.., ..]);
                    g.u1 += &gu.slice(s![..bu, ..]);
                    g.u2 += &gu.slice(s![bu.., ..]);
                }
                v
            } else if alpha > 0.0 && beta > 0.0 {
                return Err(Error::invalid(
                    "batch",
                    "the cross term needs both weakly labeled and unlabeled samples",
                ));
            } else {
                0.0
            };
            total = -2.0 * alpha * l1 - 2.0 * beta * l2
                + alpha * alpha * l3
                + beta * beta * l4
                + 2.0 * alpha * beta * l5;
        }
    }
    Ok((BatchTerms { l1, l2, l3, l4, l5, total }, grad))
}

/// Minibatch loss under a uniform class prior.
pub fn batch_loss_uniform(
    x: &BatchFeatures,
    s_cols: &Mat,
    cfg: &PerturbationConfig,
    classes: usize,
    variant: BatchVariant,
) -> Result<f64> {
    Ok(batch_objective(x, s_cols, None, classes, cfg, variant, false)?.0.total)
}

/// Minibatch loss for an arbitrary class prior.
pub fn batch_loss_general(
    x: &BatchFeatures,
    s_cols: &Mat,
    prior: &Vector,
    cfg: &PerturbationConfig,
    variant: BatchVariant,
) -> Result<f64> {
    Ok(batch_objective(x, s_cols, Some(prior), prior.len(), cfg, variant, false)?.0.total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Full gradient of the exact objective with a backtracking line search.
    #[default]
    Population,
    /// Fixed-step descent on minibatch estimates.
    Minibatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub d: usize,
    pub step_size: f64,
    pub max_steps: usize,
    pub batch_q: usize,
    pub batch_u: usize,
    pub mode: TrainMode,
    pub seed: u64,
    pub init_scale: f64,
    pub estimator: Estimator,
    pub variant: BatchVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 4,
            step_size: 0.5,
            max_steps: 20_000,
            batch_q: 32,
            batch_u: 32,
            mode: TrainMode::Population,
            seed: 0,
            init_scale: 0.1,
            estimator: Estimator::General,
            variant: BatchVariant::Verbatim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub final_features: Mat,
    pub trajectory: Vec<TrainStep>,
    pub converged: bool,
    pub steps_used: usize,
    /// Smallest reachable loss, when the loss degrees are all positive.
    pub optimum: Option<f64>,
}

impl TrainResult {
    pub fn loss_trajectory(&self) -> Vec<f64> {
        self.trajectory.iter().map(|s| s.loss).collect()
    }

    pub fn final_loss(&self) -> f64 {
        self.trajectory.last().map_or(f64::NAN, |s| s.loss)
    }

    pub fn trajectory_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .trajectory
            .iter()
            .map(|s| vec![s.step.to_string(), s.loss.to_string(), s.grad_norm.to_string()])
            .collect();
        crate::io::csv_string(&["step", "loss", "grad_norm"], &rows)
    }
}

const GRAD_TOL: f64 = 1e-8;
const OPTIMUM_TOL: f64 = 1e-9;
const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;

/// Train features for a weak world and recovery map.
pub fn train_features(
    ww: &WeakWorld,
    s: &RecoveryMap,
    cfg: &PerturbationConfig,
    train: &TrainConfig,
) -> Result<TrainResult> {
    let obj = WscObjective::population(ww, s, cfg)?;
    match train.mode {
        TrainMode::Population => train_objective(&obj, train),
        TrainMode::Minibatch => train_minibatch(&obj, ww, s, cfg, train),
    }
}

/// Per-row preconditioner α P(x) + β |s'(x)|. Descent runs in the embedding
/// coordinates F_x = sqrt(p_x) f_x, which makes the trajectory of F the same
/// when α and β are scaled by a common factor.
fn preconditioner(obj: &WscObjective) -> Vector {
    &obj.p_aug * obj.alpha + &obj.s_prime.mapv(f64::abs) * obj.beta
}

fn initial_features(obj: &WscObjective, train: &TrainConfig) -> Result<Mat> {
    if train.d == 0 {
        return Err(Error::invalid("d", "embedding dimension must be positive"));
    }
    if !(train.init_scale > 0.0) {
        return Err(Error::invalid("init_scale", "must be positive"));
    }
    let p = preconditioner(obj);
    let mut r = rng::stream(train.seed, 0);
    let mut f = Array2::zeros((obj.n(), train.d));
    for x in 0..obj.n() {
        for k in 0..train.d {
            let v = rng::symmetric_uniform(&mut r, train.init_scale);
            if p[x] > 0.0 {
                f[[x, k]] = v / p[x].sqrt();
            }
        }
    }
    Ok(f)
}

/// Loss value at the optimum, -Σ_{i≤d} max(λ_i, 0)² of A/sqrt(D Dᵀ), if all
/// loss degrees are positive.
pub fn optimal_loss(obj: &WscObjective, d: usize) -> Result<Option<f64>> {
    let degrees = obj.loss_degrees();
    if degrees.iter().any(|&v| !(v > 0.0)) {
        return Ok(None);
    }
    let norm = graph::normalize_with_degrees(&obj.adjacency(), &degrees)?;
    let spec = spectral::eigendecompose(&norm)?;
    let kept: f64 = spec.eigenvalues().iter().take(d.min(spec.n())).map(|l| l.max(0.0).powi(2)).sum();
    Ok(Some(-kept))
}

/// Preconditioned gradient descent with Armijo backtracking on the exact
/// objective. The loss sequence is non-increasing by construction.
pub fn train_objective(obj: &WscObjective, train: &TrainConfig) -> Result<TrainResult> {
    if !(train.step_size > 0.0) {
        return Err(Error::invalid("step_size", "must be positive"));
    }
    let p = preconditioner(obj);
    let mut f = initial_features(obj, train)?;
    let optimum = optimal_loss(obj, train.d)?;
    let mut trajectory = Vec::new();
    let mut converged = false;
    let mut t = train.step_size;
    let mut loss = obj.value(&f)?;
    let mut step = 0;
    loop {
        let g = obj.gradient(&f)?;
        let mut dir = g.clone();
        let mut gn2 = 0.0;
        for (x, mut row) in dir.rows_mut().into_iter().enumerate() {
            if p[x] > 0.0 {
                gn2 += row.dot(&row) / p[x];
                row.mapv_inplace(|v| v / p[x]);
            } else {
                row.fill(0.0);
            }
        }
        let grad_norm = gn2.sqrt();
        trajectory.push(TrainStep { step, loss, grad_norm });
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step, loss });
        }
        if grad_norm < GRAD_TOL || optimum.is_some_and(|o| loss - o <= OPTIMUM_TOL) {
            converged = true;
            break;
        }
        if step == train.max_steps {
            break;
        }
        t = (2.0 * t).min(train.step_size * 1e3);
        let accepted = loop {
            let cand = &f - &(&dir * t);
            let lc = obj.value(&cand)?;
            if lc <= loss - ARMIJO_C1 * t * gn2 {
                break Some((cand, lc));
            }
            t *= BACKTRACK;
            if t < 1e-30 {
                break None;
            }
        };
        match accepted {
            Some((cand, lc)) => {
                f = cand;
                loss = lc;
            }
            None => {
                log::warn!("line search stalled at step {step}");
                break;
            }
        }
        step += 1;
    }
    Ok(TrainResult { final_features: f, steps_used: step, trajectory, converged, optimum })
}

fn train_minibatch(
    obj: &WscObjective,
    ww: &WeakWorld,
    s: &RecoveryMap,
    cfg: &PerturbationConfig,
    train: &TrainConfig,
) -> Result<TrainResult> {
    let mut f = initial_features(obj, train)?;
    let world = ww.world();
    let prior = world.class_prior();
    let mut trajectory = Vec::new();
    let mut converged = false;
    let mut step = 0;
    loop {
        let data = sample_weak_dataset(ww, train.batch_q, train.batch_u, rng::mix(train.seed, 2 * step as u64 + 1))?;
        let views = sample_augmented_views(world, &data, rng::mix(train.seed, 2 * step as u64 + 2))?;
        let x = BatchFeatures::gather(&f, &views);
        let cols = recovery_columns(s, &views)?;
        let pr = (train.estimator == Estimator::General).then_some(prior);
        let (terms, grad) = batch_objective(&x, &cols, pr, world.classes(), cfg, train.variant, true)?;
        let grad = grad.expect("gradient requested");
        let mut table = Array2::zeros(f.dim());
        let scatter = |table: &mut Mat, rows: &Mat, samples: &[crate::world::ViewSample], view: usize| {
            for (r, smp) in samples.iter().enumerate() {
                let mut dst = table.row_mut(smp.views[view]);
                dst += &rows.row(r);
            }
        };
        scatter(&mut table, &grad.q1, &views.labeled, 0);
        scatter(&mut table, &grad.q2, &views.labeled, 1);
        scatter(&mut table, &grad.u1, &views.unlabeled, 0);
        scatter(&mut table, &grad.u2, &views.unlabeled, 1);
        let grad_norm = table.iter().map(|v| v * v).sum::<f64>().sqrt();
        trajectory.push(TrainStep { step, loss: terms.total, grad_norm });
        if !terms.total.is_finite() || terms.total.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step, loss: terms.total });
        }
        if grad_norm < GRAD_TOL {
            converged = true;
            break;
        }
        if step == train.max_steps {
            break;
        }
        f.scaled_add(-train.step_size, &table);
        step += 1;
    }
    Ok(TrainResult { final_features: f, steps_used: step, trajectory, converged, optimum: None })
}
