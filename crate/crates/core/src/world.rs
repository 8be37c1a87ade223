//! Discrete worlds: the joint over natural instances and classes, the
//! augmentation kernel, and the weak-label channel on top of them.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::io::{mat_to_rows, rows_to_mat};
use crate::rng::{self, Categorical};
use crate::{Error, Mat, Result, Vector};

/// Slack allowed on probability sums before a description is rejected.
pub const SUM_TOL: f64 = 1e-9;
/// Candidate sets are bitmasks over classes, so this caps the class count.
pub const SCUI_MAX_CLASSES: usize = 12;

/// Raw world description as read from JSON.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WorldSpec {
    pub instances: usize,
    pub classes: usize,
    pub aug_points: usize,
    pub joint: Vec<Vec<f64>>,
    pub aug_kernel: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak: Option<WeakSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WeakSpec {
    Global { matrix: Vec<Vec<f64>> },
    PerInstance { matrices: Vec<Vec<Vec<f64>>> },
    Symmetric { rate: f64 },
    Asymmetric { rate: f64 },
    Scui { sigma: Vec<f64> },
}

fn exact_sum(s: f64) -> f64 {
    if (s - 1.0).abs() <= 1e-14 {
        1.0
    } else {
        s
    }
}

/// Validated world. `joint` is m×c and sums to one, `kernel` is m×n with
/// stochastic rows.
#[derive(Debug, Clone)]
pub struct WorldModel {
    joint: Mat,
    kernel: Mat,
    instance_marginal: Vector,
    class_prior: Vector,
    posterior: Mat,
    aug_marginal: Vector,
}

fn check_nonnegative(path: &str, m: &Mat) -> Result<()> {
    for ((i, j), &v) in m.indexed_iter() {
        if v < 0.0 {
            return Err(Error::invalid(format!("{path}[{i}][{j}]"), format!("negative probability {v}")));
        }
    }
    Ok(())
}

impl WorldModel {
    /// Validate and normalize. Sums within `SUM_TOL` of one are rescaled to
    /// one; sums already within rounding of one are left alone so that
    /// rebuilding a world from its own spec is bit-exact.
    pub fn new(joint: Mat, kernel: Mat) -> Result<Self> {
        let (m, c) = joint.dim();
        if m == 0 || c == 0 {
            return Err(Error::invalid("joint", "need at least one instance and one class"));
        }
        if kernel.nrows() != m {
            return Err(Error::dimension("aug_kernel", format!("{m} rows"), kernel.nrows()));
        }
        if kernel.ncols() == 0 {
            return Err(Error::invalid("aug_kernel", "need at least one augmentation point"));
        }
        check_nonnegative("joint", &joint)?;
        check_nonnegative("aug_kernel", &kernel)?;
        let total = joint.sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::Normalization { path: "joint".into(), sum: total });
        }
        let joint = joint / exact_sum(total);
        let mut kernel = kernel;
        for (i, mut row) in kernel.axis_iter_mut(Axis(0)).enumerate() {
            let s = row.sum();
            if (s - 1.0).abs() > SUM_TOL {
                return Err(Error::Normalization { path: format!("aug_kernel[{i}]"), sum: s });
            }
            let s = exact_sum(s);
            row.mapv_inplace(|v| v / s);
        }
        let instance_marginal = joint.sum_axis(Axis(1));
        if let Some(i) = instance_marginal.iter().position(|&p| p <= 0.0) {
            return Err(Error::invalid(format!("joint[{i}]"), "instance has zero probability"));
        }
        let class_prior = joint.sum_axis(Axis(0));
        if let Some(y) = class_prior.iter().position(|&p| p <= 0.0) {
            return Err(Error::invalid(format!("joint[*][{y}]"), "class has zero probability"));
        }
        let mut posterior = joint.clone();
        for (i, mut row) in posterior.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| v / instance_marginal[i]);
        }
        let aug_marginal = kernel.t().dot(&instance_marginal);
        if let Some(x) = aug_marginal.iter().position(|&p| p <= 0.0) {
            return Err(Error::invalid(format!("aug_kernel[*][{x}]"), "augmentation point is unreachable"));
        }
        Ok(WorldModel { joint, kernel, instance_marginal, class_prior, posterior, aug_marginal })
    }

    pub fn instances(&self) -> usize {
        self.joint.nrows()
    }
    pub fn classes(&self) -> usize {
        self.joint.ncols()
    }
    pub fn aug_points(&self) -> usize {
        self.kernel.ncols()
    }
    /// P(x̃, y), m×c.
    pub fn joint(&self) -> &Mat {
        &self.joint
    }
    /// A(x | x̃), m×n.
    pub fn kernel(&self) -> &Mat {
        &self.kernel
    }
    /// P(x̃).
    pub fn instance_marginal(&self) -> &Vector {
        &self.instance_marginal
    }
    /// P(y).
    pub fn class_prior(&self) -> &Vector {
        &self.class_prior
    }
    /// P(y | x̃), m×c.
    pub fn posterior(&self) -> &Mat {
        &self.posterior
    }
    /// P(x) = Σ P(x̃) A(x | x̃).
    pub fn aug_marginal(&self) -> &Vector {
        &self.aug_marginal
    }

    /// Mass of (augmentation point, class): Σ_x̃ P(x̃, y) A(x | x̃), n×c.
    pub fn aug_class_mass(&self) -> Mat {
        self.kernel.t().dot(&self.joint)
    }

    pub fn has_uniform_prior(&self, tol: f64) -> bool {
        let c = self.classes() as f64;
        self.class_prior.iter().all(|&p| (p - 1.0 / c).abs() <= tol)
    }

    pub fn to_spec(&self) -> WorldSpec {
        WorldSpec {
            instances: self.instances(),
            classes: self.classes(),
            aug_points: self.aug_points(),
            joint: mat_to_rows(&self.joint),
            aug_kernel: mat_to_rows(&self.kernel),
            weak: None,
        }
    }
}

/// Parse a raw description into a world. Errors name the JSON path of the
/// first offending entry.
pub fn build_world(spec: &WorldSpec) -> Result<WorldModel> {
    let joint = rows_to_mat("joint", &spec.joint, spec.instances, Some(spec.classes))?;
    let kernel = rows_to_mat("aug_kernel", &spec.aug_kernel, spec.instances, Some(spec.aug_points))?;
    WorldModel::new(joint, kernel)
}

/// Column-stochastic v×c matrix with entries T[q, y] = P(q | y).
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix(Mat);

impl TransitionMatrix {
    pub fn new(probs: Mat) -> Result<Self> {
        Self::with_path("transition", probs)
    }

    pub fn with_path(path: &str, probs: Mat) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::invalid(path, "empty transition matrix"));
        }
        check_nonnegative(path, &probs)?;
        let mut probs = probs;
        for (y, mut col) in probs.axis_iter_mut(Axis(1)).enumerate() {
            let s = col.sum();
            if (s - 1.0).abs() > SUM_TOL {
                return Err(Error::Normalization { path: format!("{path}[*][{y}]"), sum: s });
            }
            let s = exact_sum(s);
            col.mapv_inplace(|v| v / s);
        }
        Ok(TransitionMatrix(probs))
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }
    pub fn weak_labels(&self) -> usize {
        self.0.nrows()
    }
    pub fn classes(&self) -> usize {
        self.0.ncols()
    }
}

/// T[y, y] = 1 - rate, every other entry rate / (c - 1).
pub fn symmetric_noise_matrix(c: usize, rate: f64) -> Result<TransitionMatrix> {
    check_rate(c, rate)?;
    let off = rate / (c as f64 - 1.0);
    let t = Array2::from_shape_fn((c, c), |(q, y)| if q == y { 1.0 - rate } else { off });
    TransitionMatrix::new(t)
}

/// Each class flips to its successor (mod c) with probability `rate`.
pub fn asymmetric_pair_noise_matrix(c: usize, rate: f64) -> Result<TransitionMatrix> {
    check_rate(c, rate)?;
    let mut t = Array2::zeros((c, c));
    for y in 0..c {
        t[[y, y]] += 1.0 - rate;
        t[[(y + 1) % c, y]] += rate;
    }
    TransitionMatrix::new(t)
}

fn check_rate(c: usize, rate: f64) -> Result<()> {
    if c < 2 {
        return Err(Error::invalid("classes", format!("noise needs at least 2 classes, got {c}")));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("rate", format!("must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Per-class probabilities that a wrong class enters the candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScuiParams {
    pub sigma: Vec<f64>,
}

impl ScuiParams {
    pub fn new(sigma: Vec<f64>) -> Result<Self> {
        let c = sigma.len();
        if c == 0 || c > SCUI_MAX_CLASSES {
            return Err(Error::TooLarge { what: "candidate-set classes".into(), size: c, cap: SCUI_MAX_CLASSES });
        }
        for (y, &s) in sigma.iter().enumerate() {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::invalid(format!("sigma[{y}]"), format!("must lie in [0, 1), got {s}")));
            }
        }
        Ok(ScuiParams { sigma })
    }

    pub fn classes(&self) -> usize {
        self.sigma.len()
    }
}

/// Bitmask of the candidate set with weak index `q` (masks start at 1; the
/// empty set is not a weak label).
pub fn candidate_mask(q: usize) -> usize {
    q + 1
}

pub fn candidate_index(mask: usize) -> usize {
    mask - 1
}

pub fn candidate_contains(q: usize, y: usize) -> bool {
    candidate_mask(q) >> y & 1 == 1
}

/// Candidate-set channel: the true class is always in the set and each other
/// class joins independently with probability sigma_y.
pub fn scui_transition(params: &ScuiParams) -> Result<TransitionMatrix> {
    let c = params.classes();
    let v = (1usize << c) - 1;
    let mut t = Array2::zeros((v, c));
    for q in 0..v {
        for y in 0..c {
            if !candidate_contains(q, y) {
                continue;
            }
            let mut p = 1.0;
            for (k, &s) in params.sigma.iter().enumerate() {
                if k == y {
                    continue;
                }
                p *= if candidate_contains(q, k) { s } else { 1.0 - s };
            }
            t[[q, y]] = p;
        }
    }
    TransitionMatrix::new(t)
}

#[derive(Debug, Clone)]
pub enum Transition {
    Global(TransitionMatrix),
    PerInstance(Vec<TransitionMatrix>),
}

/// A world together with its weak-label channel.
#[derive(Debug, Clone)]
pub struct WeakWorld {
    world: WorldModel,
    transition: Transition,
    scui: Option<ScuiParams>,
    weak_posterior: Mat,
}

impl WeakWorld {
    pub fn new(world: WorldModel, transition: Transition) -> Result<Self> {
        let c = world.classes();
        let m = world.instances();
        let v = match &transition {
            Transition::Global(t) => {
                if t.classes() != c {
                    return Err(Error::dimension("weak.matrix", format!("{c} columns"), t.classes()));
                }
                t.weak_labels()
            }
            Transition::PerInstance(ts) => {
                if ts.len() != m {
                    return Err(Error::dimension("weak.matrices", format!("{m} matrices"), ts.len()));
                }
                let v = ts[0].weak_labels();
                for (i, t) in ts.iter().enumerate() {
                    if t.classes() != c || t.weak_labels() != v {
                        return Err(Error::dimension(
                            format!("weak.matrices[{i}]"),
                            format!("{v}x{c}"),
                            format!("{}x{}", t.weak_labels(), t.classes()),
                        ));
                    }
                }
                v
            }
        };
        let mut weak_posterior = Array2::zeros((m, v));
        for i in 0..m {
            let t = match &transition {
                Transition::Global(t) => t,
                Transition::PerInstance(ts) => &ts[i],
            };
            let row = t.matrix().dot(&world.posterior().row(i));
            weak_posterior.row_mut(i).assign(&row);
        }
        Ok(WeakWorld { world, transition, scui: None, weak_posterior })
    }

    pub fn with_scui(world: WorldModel, params: ScuiParams) -> Result<Self> {
        if params.classes() != world.classes() {
            return Err(Error::dimension("weak.sigma", format!("{} entries", world.classes()), params.classes()));
        }
        let t = scui_transition(&params)?;
        let mut ww = WeakWorld::new(world, Transition::Global(t))?;
        ww.scui = Some(params);
        Ok(ww)
    }

    pub fn world(&self) -> &WorldModel {
        &self.world
    }
    pub fn transition(&self) -> &Transition {
        &self.transition
    }
    /// SCUI parameters when the channel was built from them.
    pub fn scui(&self) -> Option<&ScuiParams> {
        self.scui.as_ref()
    }
    pub fn weak_labels(&self) -> usize {
        self.weak_posterior.ncols()
    }
    pub fn transition_for(&self, instance: usize) -> &TransitionMatrix {
        match &self.transition {
            Transition::Global(t) => t,
            Transition::PerInstance(ts) => &ts[instance],
        }
    }
    /// The shared matrix, if the channel does not depend on the instance.
    pub fn global_transition(&self) -> Option<&TransitionMatrix> {
        match &self.transition {
            Transition::Global(t) => Some(t),
            Transition::PerInstance(_) => None,
        }
    }
    /// P(q | x̃), m×v.
    pub fn weak_posterior(&self) -> &Mat {
        &self.weak_posterior
    }
    /// P(x̃, q), m×v.
    pub fn weak_joint(&self) -> Mat {
        let p = self.world.instance_marginal();
        let mut out = self.weak_posterior.clone();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| v * p[i]);
        }
        out
    }

    pub fn to_spec(&self) -> WorldSpec {
        let mut spec = self.world.to_spec();
        spec.weak = Some(match (&self.scui, &self.transition) {
            (Some(s), _) => WeakSpec::Scui { sigma: s.sigma.clone() },
            (None, Transition::Global(t)) => WeakSpec::Global { matrix: mat_to_rows(t.matrix()) },
            (None, Transition::PerInstance(ts)) => WeakSpec::PerInstance {
                matrices: ts.iter().map(|t| mat_to_rows(t.matrix())).collect(),
            },
        });
        spec
    }
}

/// Parse a description that carries a `weak` section.
pub fn build_weak_world(spec: &WorldSpec) -> Result<WeakWorld> {
    let world = build_world(spec)?;
    let c = spec.classes;
    let weak = spec.weak.as_ref().ok_or_else(|| Error::invalid("weak", "missing weak-label section"))?;
    match weak {
        WeakSpec::Global { matrix } => {
            let t = rows_to_mat("weak.matrix", matrix, matrix.len(), Some(c))?;
            WeakWorld::new(world, Transition::Global(TransitionMatrix::with_path("weak.matrix", t)?))
        }
        WeakSpec::PerInstance { matrices } => {
            if matrices.len() != spec.instances {
                return Err(Error::dimension("weak.matrices", format!("{} matrices", spec.instances), matrices.len()));
            }
            let mut ts = Vec::with_capacity(matrices.len());
            for (i, m) in matrices.iter().enumerate() {
                let path = format!("weak.matrices[{i}]");
                let t = rows_to_mat(&path, m, m.len(), Some(c))?;
                ts.push(TransitionMatrix::with_path(&path, t)?);
            }
            WeakWorld::new(world, Transition::PerInstance(ts))
        }
        WeakSpec::Symmetric { rate } => WeakWorld::new(world, Transition::Global(symmetric_noise_matrix(c, *rate)?)),
        WeakSpec::Asymmetric { rate } => {
            WeakWorld::new(world, Transition::Global(asymmetric_pair_noise_matrix(c, *rate)?))
        }
        WeakSpec::Scui { sigma } => WeakWorld::with_scui(world, ScuiParams::new(sigma.clone())?),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub instance: usize,
    pub weak: usize,
}

/// Draws of natural instances: weakly labeled ones with their weak label, and
/// unlabeled ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakDataset {
    pub seed: u64,
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<usize>,
}

/// x̃ ~ P(x̃) then q ~ P(q | x̃) for the labeled part, x̃ ~ P(x̃) for the rest.
pub fn sample_weak_dataset(ww: &WeakWorld, n_q: usize, n_u: usize, seed: u64) -> Result<WeakDataset> {
    let mut r = rng::seeded(seed);
    let inst = Categorical::new(ww.world().instance_marginal().as_slice().expect("contiguous"))?;
    let weak: Vec<Categorical> = ww
        .weak_posterior()
        .rows()
        .into_iter()
        .map(|row| Categorical::new(&row.to_vec()))
        .collect::<Result<_>>()?;
    let mut labeled = Vec::with_capacity(n_q);
    for _ in 0..n_q {
        let i = inst.sample(&mut r);
        let q = weak[i].sample(&mut r);
        labeled.push(LabeledSample { instance: i, weak: q });
    }
    let unlabeled = (0..n_u).map(|_| inst.sample(&mut r)).collect();
    Ok(WeakDataset { seed, labeled, unlabeled })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSample {
    pub instance: usize,
    pub views: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak: Option<usize>,
}

/// Two independent augmentations per sample, labeled samples first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewBatch {
    pub labeled: Vec<ViewSample>,
    pub unlabeled: Vec<ViewSample>,
}

pub fn sample_augmented_views(world: &WorldModel, data: &WeakDataset, seed: u64) -> Result<ViewBatch> {
    let mut r = rng::seeded(seed);
    let kernels: Vec<Categorical> = world
        .kernel()
        .rows()
        .into_iter()
        .map(|row| Categorical::new(&row.to_vec()))
        .collect::<Result<_>>()?;
    let m = world.instances();
    let mut draw = |i: usize, weak: Option<usize>| -> Result<ViewSample> {
        if i >= m {
            return Err(Error::invalid("dataset", format!("instance index {i} out of range")));
        }
        let a = kernels[i].sample(&mut r);
        let b = kernels[i].sample(&mut r);
        Ok(ViewSample { instance: i, views: [a, b], weak })
    };
    let labeled = data.labeled.iter().map(|s| draw(s.instance, Some(s.weak))).collect::<Result<Vec<_>>>()?;
    let unlabeled = data.unlabeled.iter().map(|&i| draw(i, None)).collect::<Result<Vec<_>>>()?;
    Ok(ViewBatch { labeled, unlabeled })
}

/// Class vector P(y | x̃) as an owned array, handy for tests and oracles.
pub fn posterior_row(world: &WorldModel, i: usize) -> Vector {
    Array1::from(world.posterior().row(i).to_vec())
}
