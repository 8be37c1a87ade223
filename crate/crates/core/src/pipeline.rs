//! Experiment driver and the auxiliary supervised losses of the joint
//! training recipe.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::PerturbationConfig;
use crate::loss::{self, TrainConfig, TrainMode, TrainResult, WscObjective};
use crate::metrics::{self, BoundOptions, BoundReport};
use crate::probe;
use crate::recovery::{self, PosteriorSetting, Provenance, RecoveryFile, RecoveryMap, RecoveryMode};
use crate::rng;
use crate::world::{
    build_weak_world, candidate_mask, sample_augmented_views, sample_weak_dataset, TransitionMatrix, WeakDataset,
    WeakWorld, WorldSpec,
};
use crate::{Error, Mat, Result, Vector};

/// Probabilities are clamped here before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardLoss {
    pub cross_entropy: f64,
    pub logdet: Option<f64>,
    pub total: f64,
    pub clamped: bool,
}

/// -log (T̂ g)[q] plus λ log det T̂. The determinant term is only defined for
/// square T̂ and is skipped otherwise.
pub fn supervised_forward_loss(g: &[f64], t_hat: &TransitionMatrix, q: usize, lambda: f64) -> Result<ForwardLoss> {
    let t = t_hat.matrix();
    if g.len() != t.ncols() {
        return Err(Error::dimension("g", format!("{} classes", t.ncols()), g.len()));
    }
    if q >= t.nrows() {
        return Err(Error::invalid("q", format!("weak label {q} out of range")));
    }
    let p: f64 = (0..g.len()).map(|y| t[[q, y]] * g[y]).sum();
    let clamped = p < LOG_CLAMP;
    let cross_entropy = -p.max(LOG_CLAMP).ln();
    let logdet = if t.nrows() == t.ncols() {
        let det = determinant(t)?;
        if !(det > 0.0) {
            return Err(Error::Numerical(format!("transition determinant {det} is not positive")));
        }
        Some(det.ln())
    } else {
        if lambda != 0.0 {
            log::warn!("log-determinant term skipped for a {}x{} transition", t.nrows(), t.ncols());
        }
        None
    };
    let total = cross_entropy + lambda * logdet.unwrap_or(0.0);
    Ok(ForwardLoss { cross_entropy, logdet, total, clamped })
}

fn determinant(a: &Mat) -> Result<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut det = 1.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[[x, col]].abs().total_cmp(&m[[y, col]].abs())).unwrap_or(col);
        if m[[piv, col]] == 0.0 {
            return Ok(0.0);
        }
        if piv != col {
            for k in 0..n {
                m.swap([piv, k], [col, k]);
            }
            det = -det;
        }
        det *= m[[col, col]];
        for r in (col + 1)..n {
            let f = m[[r, col]] / m[[col, col]];
            for k in col..n {
                m[[r, k]] -= f * m[[col, k]];
            }
        }
    }
    Ok(det)
}

/// (1/|q|) Σ_{i∈q} -log g_i for a candidate set given as a class bitmask.
pub fn average_partial_loss(g: &[f64], mask: usize) -> Result<(f64, bool)> {
    let members: Vec<usize> = (0..g.len()).filter(|&i| mask >> i & 1 == 1).collect();
    if members.is_empty() || mask >> g.len() != 0 {
        return Err(Error::invalid("q", format!("candidate mask {mask:#b} does not fit {} classes", g.len())));
    }
    let clamped = members.iter().any(|&i| g[i] < LOG_CLAMP);
    let v = members.iter().map(|&i| -g[i].max(LOG_CLAMP).ln()).sum::<f64>() / members.len() as f64;
    Ok((v, clamped))
}

/// Cross-entropy of the strong-view prediction against the weak-view target.
pub fn consistency_loss(g_strong: &[f64], g_weak: &[f64]) -> Result<(f64, bool)> {
    if g_strong.len() != g_weak.len() {
        return Err(Error::dimension("g_weak", format!("{} entries", g_strong.len()), g_weak.len()));
    }
    let mut clamped = false;
    let mut v = 0.0;
    for (s, w) in g_strong.iter().zip(g_weak) {
        if *w > 0.0 {
            clamped |= *s < LOG_CLAMP;
            v -= w * s.max(LOG_CLAMP).ln();
        }
    }
    Ok((v, clamped))
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub consistency_weight: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { steps: 300, learning_rate: 0.5, consistency_weight: 1.0 }
    }
}

/// Softmax head on frozen features, fit by full-batch gradient descent on
/// the weak-label loss of view one plus consistency between the two views.
/// Returns the class posterior averaged over each instance's augmentations.
pub fn fit_posterior_head(
    f: &Mat,
    ww: &WeakWorld,
    data: &WeakDataset,
    head: &HeadConfig,
    seed: u64,
) -> Result<Mat> {
    let world = ww.world();
    let c = world.classes();
    let d = f.ncols();
    let views = sample_augmented_views(world, data, seed)?;
    let pll = ww.scui().is_some();
    let mut w = Array2::<f64>::zeros((d, c));
    let mut b = Array1::<f64>::zeros(c);
    let total = (views.labeled.len() + views.unlabeled.len()).max(1) as f64;
    let logits = |w: &Mat, b: &Vector, x: usize| -> Vec<f64> { (f.row(x).dot(w) + b).to_vec() };
    for _ in 0..head.steps {
        let mut gw = Array2::<f64>::zeros((d, c));
        let mut gb = Array1::<f64>::zeros(c);
        let mut push = |x: usize, dz: &[f64]| {
            for k in 0..c {
                gb[k] += dz[k];
                for j in 0..d {
                    gw[[j, k]] += f[[x, j]] * dz[k];
                }
            }
        };
        for s in &views.labeled {
            let q = s.weak.expect("labeled sample");
            let p = softmax(&logits(&w, &b, s.views[0]));
            let dz: Vec<f64> = if pll {
                let mask = candidate_mask(q);
                let size = (0..c).filter(|&k| mask >> k & 1 == 1).count() as f64;
                (0..c).map(|k| p[k] - if mask >> k & 1 == 1 { 1.0 / size } else { 0.0 }).collect()
            } else {
                let t = ww.transition_for(s.instance).matrix();
                let r: f64 = (0..c).map(|y| t[[q, y]] * p[y]).sum::<f64>().max(LOG_CLAMP);
                (0..c).map(|k| p[k] - t[[q, k]] * p[k] / r).collect()
            };
            push(s.views[0], &dz);
        }
        if head.consistency_weight > 0.0 {
            for s in views.labeled.iter().chain(&views.unlabeled) {
                let target = softmax(&logits(&w, &b, s.views[0]));
                let p2 = softmax(&logits(&w, &b, s.views[1]));
                let dz: Vec<f64> = (0..c).map(|k| head.consistency_weight * (p2[k] - target[k])).collect();
                push(s.views[1], &dz);
            }
        }
        w.scaled_add(-head.learning_rate / total, &gw);
        b.scaled_add(-head.learning_rate / total, &gb);
    }
    let mut g = Array2::zeros((world.instances(), c));
    for i in 0..world.instances() {
        for x in 0..world.aug_points() {
            let a = world.kernel()[[i, x]];
            if a > 0.0 {
                let p = softmax(&logits(&w, &b, x));
                for k in 0..c {
                    g[[i, k]] += a * p[k];
                }
            }
        }
    }
    Ok(g)
}

/// Where the world description comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorldSource {
    Path { path: PathBuf },
    Inline(Box<WorldSpec>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Train on the exact population objective.
    #[default]
    World,
    /// Train on the objective of the sampled dataset.
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub enabled: bool,
    pub rho_max_i: Option<usize>,
    pub skip_partitions: bool,
    pub delta: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { enabled: true, rho_max_i: None, skip_partitions: false, delta: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldSource,
    #[serde(default = "default_recovery")]
    pub recovery: String,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    /// β values for the weakly supervised arms; empty means just `beta`.
    #[serde(default)]
    pub beta_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_n")]
    pub n_q: usize,
    #[serde(default = "default_n")]
    pub n_u: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub train_on: DataSource,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default)]
    pub corrupted_arm: bool,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

fn default_recovery() -> String {
    "exact".into()
}
fn one() -> f64 {
    1.0
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_n() -> usize {
    200
}
fn default_ridge() -> f64 {
    probe::DEFAULT_RIDGE
}

impl ExperimentConfig {
    pub fn betas(&self) -> Vec<f64> {
        if self.beta_grid.is_empty() {
            vec![self.beta]
        } else {
            self.beta_grid.clone()
        }
    }

    /// Weak world described by the config, resolving relative paths against
    /// `base_dir`.
    pub fn weak_world(&self, base_dir: &Path) -> Result<WeakWorld> {
        let spec = match &self.world {
            WorldSource::Inline(s) => (**s).clone(),
            WorldSource::Path { path } => crate::io::read_json(&base_dir.join(path))?,
        };
        build_weak_world(&spec)
    }
}

/// How to obtain the recovery map.
#[derive(Debug, Clone, PartialEq)]
pub enum RecoveryChoice {
    Exact,
    InverseTransition,
    Scui,
    Posterior,
    File(PathBuf),
}

impl RecoveryChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(RecoveryChoice::Exact),
            "inverse-t" => Ok(RecoveryChoice::InverseTransition),
            "scui" => Ok(RecoveryChoice::Scui),
            "posterior" => Ok(RecoveryChoice::Posterior),
            other => match other.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(RecoveryChoice::File(PathBuf::from(p))),
                _ => Err(Error::invalid(
                    "recovery",
                    format!("expected exact, inverse-t, scui, posterior or file:PATH, got '{other}'"),
                )),
            },
        }
    }
}

/// Recovery map for the choices that do not need trained features. The
/// posterior choice uses the supplied class posterior, or the world's own
/// when none is given.
pub fn recovery_for(
    choice: &RecoveryChoice,
    ww: &WeakWorld,
    posterior: Option<&Mat>,
    base_dir: &Path,
) -> Result<RecoveryMap> {
    match choice {
        RecoveryChoice::Exact => recovery::exact_recovery(ww),
        RecoveryChoice::InverseTransition => {
            let t = ww
                .global_transition()
                .ok_or_else(|| Error::invalid("recovery", "inverse-t needs a global transition matrix"))?;
            recovery::inverse_transition_recovery(t)
        }
        RecoveryChoice::Scui => {
            let p = ww.scui().ok_or_else(|| Error::invalid("recovery", "scui needs a candidate-set world"))?;
            recovery::scui_recovery(p)
        }
        RecoveryChoice::Posterior => {
            let g = posterior.unwrap_or_else(|| ww.world().posterior());
            recovery::posterior_recovery(g, ww, &posterior_setting(ww))
        }
        RecoveryChoice::File(p) => {
            let f: RecoveryFile = crate::io::read_json(&base_dir.join(p))?;
            let map = RecoveryMap::from_file(&f)?;
            map.check_against(ww)?;
            Ok(map)
        }
    }
}

pub fn posterior_setting(ww: &WeakWorld) -> PosteriorSetting {
    match ww.scui() {
        Some(p) => PosteriorSetting::PllScui(p.clone()),
        None => PosteriorSetting::Nll(None),
    }
}

/// Exact map with the class rows of every instance shuffled by a seeded
/// permutation (never the identity when c ≥ 2).
pub fn corrupted_recovery(ww: &WeakWorld, seed: u64) -> Result<RecoveryMap> {
    let exact = recovery::exact_recovery(ww)?;
    let c = ww.world().classes();
    let mut r = rng::seeded(seed);
    let mut ms = Vec::with_capacity(exact.matrices().len());
    for m in exact.matrices() {
        let mut perm: Vec<usize> = (0..c).collect();
        while c > 1 && perm.iter().enumerate().all(|(i, &p)| i == p) {
            perm.shuffle(&mut r);
        }
        let mut out = Array2::zeros(m.dim());
        for (y, &py) in perm.iter().enumerate() {
            out.row_mut(py).assign(&m.row(y));
        }
        ms.push(out);
    }
    RecoveryMap::new(RecoveryMode::PerInstance, Provenance::Custom, ms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub seed: u64,
    pub arm: String,
    pub beta: f64,
    pub epsilon: f64,
    pub delta_s: f64,
    pub final_loss: f64,
    pub converged: bool,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub beta: f64,
    pub median_epsilon: f64,
    pub mean_epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedBound {
    pub seed: u64,
    pub arm: String,
    pub report: BoundReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub recovery: String,
    pub alpha: f64,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub results: Vec<ArmResult>,
    pub summary: Vec<ArmSummary>,
    pub bounds: Vec<SeedBound>,
}

impl ExperimentReport {
    /// Flat table: seed, arm, beta, epsilon.
    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .results
            .iter()
            .map(|r| vec![r.seed.to_string(), r.arm.clone(), r.beta.to_string(), r.epsilon.to_string()])
            .collect();
        crate::io::csv_string(&["seed", "arm", "beta", "epsilon"], &rows)
    }

    pub fn median_epsilon(&self, arm: &str, beta: f64) -> Option<f64> {
        self.summary.iter().find(|s| s.arm == arm && s.beta == beta).map(|s| s.median_epsilon)
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

struct SeedContext<'a> {
    cfg: &'a ExperimentConfig,
    ww: &'a WeakWorld,
    data: WeakDataset,
    train: TrainConfig,
}

impl SeedContext<'_> {
    fn train(&self, s: &RecoveryMap, beta: f64) -> Result<TrainResult> {
        let pc = PerturbationConfig::new(self.cfg.alpha, beta)?;
        match (self.train.mode, self.cfg.train_on) {
            (TrainMode::Population, DataSource::World) => loss::train_features(self.ww, s, &pc, &self.train),
            (TrainMode::Population, DataSource::Dataset) => {
                let obj = WscObjective::empirical(self.ww, &self.data, s, &pc)?;
                loss::train_objective(&obj, &self.train)
            }
            (TrainMode::Minibatch, _) => loss::train_features(self.ww, s, &pc, &self.train),
        }
    }

    fn arm(&self, seed: u64, arm: &str, s: &RecoveryMap, beta: f64) -> Result<(ArmResult, TrainResult)> {
        let tr = self.train(s, beta)?;
        let pr = probe::probe_error(&tr.final_features, self.ww.world(), self.cfg.ridge)?;
        let res = ArmResult {
            seed,
            arm: arm.to_string(),
            beta,
            epsilon: pr.epsilon,
            delta_s: recovery::expected_bias(s, self.ww)?,
            final_loss: tr.final_loss(),
            converged: tr.converged,
            steps: tr.steps_used,
        };
        Ok((res, tr))
    }
}

fn run_seed(cfg: &ExperimentConfig, ww: &WeakWorld, choice: &RecoveryChoice, base_dir: &Path, seed: u64) -> Result<(Vec<ArmResult>, Option<SeedBound>)> {
    let data = sample_weak_dataset(ww, cfg.n_q, cfg.n_u, rng::mix(seed, 1))?;
    let mut train = cfg.train.clone();
    train.seed = rng::mix(seed, 2);
    let ctx = SeedContext { cfg, ww, data, train };
    let exact = recovery::exact_recovery(ww)?;
    let mut out = Vec::new();

    let (base, base_tr) = ctx.arm(seed, "self_supervised", &exact, 0.0)?;
    out.push(base);

    let weak_map = match choice {
        RecoveryChoice::Exact => None,
        RecoveryChoice::Posterior => {
            let g = fit_posterior_head(&base_tr.final_features, ww, &ctx.data, &cfg.head, rng::mix(seed, 3))?;
            Some(recovery::posterior_recovery(&g, ww, &posterior_setting(ww))?)
        }
        other => Some(recovery_for(other, ww, None, base_dir)?),
    };
    let corrupted = if cfg.corrupted_arm { Some(corrupted_recovery(ww, rng::mix(seed, 4))?) } else { None };

    let mut bound = None;
    for beta in cfg.betas() {
        if beta == 0.0 {
            continue;
        }
        let (r, tr) = ctx.arm(seed, "exact", &exact, beta)?;
        out.push(r);
        let mut primary = (exact.clone(), tr, "exact");
        if let Some(s) = &weak_map {
            let (r, tr) = ctx.arm(seed, "weak", s, beta)?;
            out.push(r);
            primary = (s.clone(), tr, "weak");
        }
        if let Some(s) = &corrupted {
            let (r, _) = ctx.arm(seed, "corrupted", s, beta)?;
            out.push(r);
        }
        if cfg.metrics.enabled && beta == cfg.beta {
            let pc = PerturbationConfig::new(cfg.alpha, beta)?;
            let opts = BoundOptions {
                d: cfg.train.d,
                n: cfg.n_q + cfg.n_u,
                n_q: cfg.n_q,
                delta: cfg.metrics.delta,
                rho_max_i: cfg.metrics.rho_max_i,
                skip_partitions: cfg.metrics.skip_partitions,
            };
            let report = metrics::bound_report(ww, &primary.0, &pc, &primary.1.final_features, &opts)?;
            bound = Some(SeedBound { seed, arm: primary.2.to_string(), report });
        }
    }
    Ok((out, bound))
}

/// One trained arm at `cfg.beta` with the configured recovery, seeded the
/// same way as the corresponding arm of `run_experiment`.
pub struct SingleArm {
    pub weak_world: WeakWorld,
    pub recovery: RecoveryMap,
    pub result: TrainResult,
}

pub fn train_single_arm(cfg: &ExperimentConfig, base_dir: &Path, seed: u64) -> Result<SingleArm> {
    let ww = cfg.weak_world(base_dir)?;
    let choice = RecoveryChoice::parse(&cfg.recovery)?;
    let data = sample_weak_dataset(&ww, cfg.n_q, cfg.n_u, rng::mix(seed, 1))?;
    let mut train = cfg.train.clone();
    train.seed = rng::mix(seed, 2);
    let ctx = SeedContext { cfg, ww: &ww, data, train };
    let s = match choice {
        RecoveryChoice::Posterior => {
            let base = ctx.train(&recovery::exact_recovery(&ww)?, 0.0)?;
            let g = fit_posterior_head(&base.final_features, &ww, &ctx.data, &cfg.head, rng::mix(seed, 3))?;
            recovery::posterior_recovery(&g, &ww, &posterior_setting(&ww))?
        }
        other => recovery_for(&other, &ww, None, base_dir)?,
    };
    let result = ctx.train(&s, cfg.beta)?;
    Ok(SingleArm { weak_world: ww, recovery: s, result })
}

/// Run every arm for every seed. Seeds run in parallel; the report is
/// assembled in seed order, so its JSON does not depend on the thread count.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &Path) -> Result<ExperimentReport> {
    let ww = cfg.weak_world(base_dir)?;
    let choice = RecoveryChoice::parse(&cfg.recovery)?;
    if cfg.seeds.is_empty() {
        return Err(Error::invalid("seeds", "need at least one seed"));
    }
    for (k, &b) in cfg.betas().iter().enumerate() {
        if !(b >= 0.0) || !b.is_finite() {
            return Err(Error::invalid(format!("beta_grid[{k}]"), "must be finite and non-negative"));
        }
    }
    let per_seed: Vec<Result<(Vec<ArmResult>, Option<SeedBound>)>> =
        cfg.seeds.par_iter().map(|&seed| run_seed(cfg, &ww, &choice, base_dir, seed)).collect();
    let mut results = Vec::new();
    let mut bounds = Vec::new();
    for r in per_seed {
        let (arms, bound) = r?;
        results.extend(arms);
        bounds.extend(bound);
    }
    let mut groups: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    let mut order: Vec<(String, u64)> = Vec::new();
    for r in &results {
        let key = (r.arm.clone(), r.beta.to_bits());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.epsilon);
    }
    let summary = order
        .into_iter()
        .map(|key| {
            let mut eps = groups[&key].clone();
            let mean = eps.iter().sum::<f64>() / eps.len() as f64;
            ArmSummary { arm: key.0.clone(), beta: f64::from_bits(key.1), median_epsilon: median(&mut eps), mean_epsilon: mean }
        })
        .collect();
    Ok(ExperimentReport {
        recovery: cfg.recovery.clone(),
        alpha: cfg.alpha,
        betas: cfg.betas(),
        seeds: cfg.seeds.clone(),
        results,
        summary,
        bounds,
    })
}
