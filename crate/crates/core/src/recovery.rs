//! Recovery maps S(x̃): c×v matrices that turn a weak-label distribution back
//! into a class distribution, with S(x̃) P(q|x̃) = P(y|x̃) when exact.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::io::{mat_to_rows, rows_to_mat};
use crate::linalg;
use crate::world::{candidate_contains, scui_transition, ScuiParams, TransitionMatrix, WeakWorld};
use crate::{Error, Mat, Result, Vector};

/// Singular values below this fraction of the largest are treated as zero.
pub const PINV_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    Shared,
    PerInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Exact,
    InverseTransition,
    Scui,
    Posterior,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryMap {
    mode: RecoveryMode,
    provenance: Provenance,
    matrices: Vec<Mat>,
    /// (instance, weak label) pairs whose posterior normalizer vanished and
    /// were replaced by a uniform column.
    flagged: Vec<(usize, usize)>,
}

impl RecoveryMap {
    pub fn new(mode: RecoveryMode, provenance: Provenance, matrices: Vec<Mat>) -> Result<Self> {
        let first = matrices.first().ok_or_else(|| Error::invalid("matrices", "no recovery matrix given"))?;
        let dim = first.dim();
        if mode == RecoveryMode::Shared && matrices.len() != 1 {
            return Err(Error::dimension("matrices", "1 matrix for shared mode", matrices.len()));
        }
        for (i, m) in matrices.iter().enumerate() {
            if m.dim() != dim {
                return Err(Error::dimension(
                    format!("matrices[{i}]"),
                    format!("{}x{}", dim.0, dim.1),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("matrices[{i}]"), "non-finite entry"));
            }
        }
        Ok(RecoveryMap { mode, provenance, matrices, flagged: Vec::new() })
    }

    pub fn shared(provenance: Provenance, s: Mat) -> Result<Self> {
        Self::new(RecoveryMode::Shared, provenance, vec![s])
    }

    pub fn mode(&self) -> RecoveryMode {
        self.mode
    }
    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
    pub fn matrices(&self) -> &[Mat] {
        &self.matrices
    }
    pub fn flagged(&self) -> &[(usize, usize)] {
        &self.flagged
    }
    pub fn classes(&self) -> usize {
        self.matrices[0].nrows()
    }
    pub fn weak_labels(&self) -> usize {
        self.matrices[0].ncols()
    }

    pub fn matrix_for(&self, instance: usize) -> &Mat {
        match self.mode {
            RecoveryMode::Shared => &self.matrices[0],
            RecoveryMode::PerInstance => &self.matrices[instance],
        }
    }

    pub fn check_against(&self, ww: &WeakWorld) -> Result<()> {
        let (c, v) = (ww.world().classes(), ww.weak_labels());
        if self.classes() != c || self.weak_labels() != v {
            return Err(Error::dimension(
                "recovery",
                format!("{c}x{v}"),
                format!("{}x{}", self.classes(), self.weak_labels()),
            ));
        }
        if self.mode == RecoveryMode::PerInstance && self.matrices.len() != ww.world().instances() {
            return Err(Error::dimension(
                "recovery.matrices",
                format!("{} matrices", ww.world().instances()),
                self.matrices.len(),
            ));
        }
        Ok(())
    }

    /// S(x̃) P(q|x̃) per instance, m×c.
    pub fn recovered_posterior(&self, ww: &WeakWorld) -> Result<Mat> {
        self.check_against(ww)?;
        let m = ww.world().instances();
        let mut out = Array2::zeros((m, self.classes()));
        for i in 0..m {
            let r = self.matrix_for(i).dot(&ww.weak_posterior().row(i));
            out.row_mut(i).assign(&r);
        }
        Ok(out)
    }

    /// Σ_q P(x̃, q) S(x̃)[:, q] per instance, m×c. Equals the class joint
    /// P(x̃, y) for an exact map.
    pub fn recovered_joint(&self, ww: &WeakWorld) -> Result<Mat> {
        let mut out = self.recovered_posterior(ww)?;
        let p = ww.world().instance_marginal();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| v * p[i]);
        }
        Ok(out)
    }

    pub fn to_file(&self) -> RecoveryFile {
        RecoveryFile {
            mode: self.mode,
            provenance: self.provenance,
            matrices: self.matrices.iter().map(mat_to_rows).collect(),
            flagged: self.flagged.clone(),
        }
    }

    pub fn from_file(f: &RecoveryFile) -> Result<Self> {
        let mut ms = Vec::with_capacity(f.matrices.len());
        for (i, rows) in f.matrices.iter().enumerate() {
            ms.push(rows_to_mat(&format!("matrices[{i}]"), rows, rows.len(), None)?);
        }
        let mut map = RecoveryMap::new(f.mode, f.provenance, ms)?;
        map.flagged = f.flagged.clone();
        Ok(map)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecoveryFile {
    pub mode: RecoveryMode,
    pub provenance: Provenance,
    pub matrices: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flagged: Vec<(usize, usize)>,
}

/// S(x̃) = P(y|x̃) P(q|x̃)ᵀ / ‖P(q|x̃)‖², which maps P(q|x̃) to P(y|x̃) exactly.
pub fn exact_recovery(ww: &WeakWorld) -> Result<RecoveryMap> {
    let w = ww.world();
    let mut ms = Vec::with_capacity(w.instances());
    for i in 0..w.instances() {
        let p = ww.weak_posterior().row(i);
        let norm2 = p.dot(&p);
        if norm2 == 0.0 {
            return Err(Error::Numerical(format!("weak posterior of instance {i} is zero")));
        }
        let y = w.posterior().row(i);
        ms.push(Array2::from_shape_fn((w.classes(), ww.weak_labels()), |(a, b)| y[a] * p[b] / norm2));
    }
    RecoveryMap::new(RecoveryMode::PerInstance, Provenance::Exact, ms)
}

/// Moore–Penrose pseudo-inverse of a transition estimate. Fails when the
/// condition number exceeds 1/PINV_CUTOFF.
pub fn inverse_transition_recovery(t: &TransitionMatrix) -> Result<RecoveryMap> {
    let (v, c) = t.matrix().dim();
    if v < c {
        return Err(Error::RankDeficient { smallest: 0.0, largest: 1.0 });
    }
    let dec = linalg::svd(t.matrix())?;
    let largest = dec.s.iter().fold(0.0_f64, |m, &x| m.max(x));
    let smallest = dec.s.iter().fold(f64::INFINITY, |m, &x| m.min(x));
    if largest == 0.0 || smallest < PINV_CUTOFF * largest {
        return Err(Error::RankDeficient { smallest, largest });
    }
    let mut s = Array2::zeros((c, v));
    for k in 0..c {
        let vk = dec.v.column(k);
        let uk = dec.u.column(k);
        for a in 0..c {
            for b in 0..v {
                s[[a, b]] += vk[a] * uk[b] / dec.s[k];
            }
        }
    }
    RecoveryMap::shared(Provenance::InverseTransition, s)
}

/// Closed-form left inverse of the candidate-set channel: 1 on members of
/// the set, -σ_y/(1-σ_y) for classes outside it.
pub fn scui_recovery(params: &ScuiParams) -> Result<RecoveryMap> {
    let c = params.classes();
    let v = (1usize << c) - 1;
    let s = Array2::from_shape_fn((c, v), |(y, q)| {
        if candidate_contains(q, y) {
            1.0
        } else {
            let sg = params.sigma[y];
            -sg / (1.0 - sg)
        }
    });
    RecoveryMap::shared(Provenance::Scui, s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conversion {
    SigmaToTheta,
    ThetaToSigma,
}

/// Switch between the per-class inclusion probability σ and the mixing
/// proportion θ of the positive-unlabeled view of one class:
/// θ = (c-1)σ / (1 + (c-1)σ).
pub fn sigma_theta_convert(value: f64, classes: usize, direction: Conversion) -> Result<f64> {
    if classes < 2 {
        return Err(Error::invalid("classes", format!("need at least 2 classes, got {classes}")));
    }
    if !(0.0..1.0).contains(&value) {
        return Err(Error::invalid("value", format!("must lie in [0, 1), got {value}")));
    }
    let k = classes as f64 - 1.0;
    Ok(match direction {
        Conversion::SigmaToTheta => k * value / (1.0 + k * value),
        Conversion::ThetaToSigma => value / (k * (1.0 - value)),
    })
}

/// Likelihood model for posterior-based recovery.
#[derive(Debug, Clone)]
pub enum PosteriorSetting {
    /// Noisy labels with the given transition estimate, or the world's own
    /// channel when `None`.
    Nll(Option<TransitionMatrix>),
    /// Candidate sets from the SCUI channel with these inclusion rates.
    PllScui(ScuiParams),
    /// Candidate sets where every member is equally plausible.
    PllUniform,
}

/// S(x̃)[y, q] = g_y L(q, y) / Σ_y' g_y' L(q, y') from a class posterior
/// estimate `g` (m×c). Columns whose normalizer is zero become uniform and
/// are listed in `flagged`.
pub fn posterior_recovery(g: &Mat, ww: &WeakWorld, setting: &PosteriorSetting) -> Result<RecoveryMap> {
    let w = ww.world();
    let (m, c, v) = (w.instances(), w.classes(), ww.weak_labels());
    if g.dim() != (m, c) {
        return Err(Error::dimension("posterior", format!("{m}x{c}"), format!("{}x{}", g.nrows(), g.ncols())));
    }
    for ((i, y), &val) in g.indexed_iter() {
        if !(val >= 0.0) || !val.is_finite() {
            return Err(Error::invalid(format!("posterior[{i}][{y}]"), "must be a finite non-negative number"));
        }
    }
    for (i, row) in g.rows().into_iter().enumerate() {
        let total = row.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Normalization { path: format!("posterior[{i}]"), sum: total });
        }
    }
    let shared_likelihood: Option<Mat> = match setting {
        PosteriorSetting::Nll(Some(t)) => Some(t.matrix().clone()),
        PosteriorSetting::Nll(None) => None,
        PosteriorSetting::PllScui(p) => Some(scui_transition(p)?.matrix().clone()),
        PosteriorSetting::PllUniform => {
            if c > crate::world::SCUI_MAX_CLASSES || v != (1usize << c) - 1 {
                return Err(Error::dimension("weak labels", format!("{} candidate sets", (1usize << c.min(62)) - 1), v));
            }
            Some(Array2::from_shape_fn((v, c), |(q, y)| if candidate_contains(q, y) { 1.0 } else { 0.0 }))
        }
    };
    if let Some(l) = &shared_likelihood {
        if l.dim() != (v, c) {
            return Err(Error::dimension("likelihood", format!("{v}x{c}"), format!("{}x{}", l.nrows(), l.ncols())));
        }
    }
    let mut ms = Vec::with_capacity(m);
    let mut flagged = Vec::new();
    for i in 0..m {
        let l = match &shared_likelihood {
            Some(l) => l,
            None => ww.transition_for(i).matrix(),
        };
        let gi = g.row(i);
        let mut s = Array2::zeros((c, v));
        for q in 0..v {
            let col: Vector = Array1::from_shape_fn(c, |y| gi[y] * l[[q, y]]);
            let z = col.sum();
            if z > 0.0 {
                s.column_mut(q).assign(&(col / z));
            } else {
                s.column_mut(q).fill(1.0 / c as f64);
                flagged.push((i, q));
            }
        }
        ms.push(s);
    }
    let mut map = RecoveryMap::new(RecoveryMode::PerInstance, Provenance::Posterior, ms)?;
    map.flagged = flagged;
    Ok(map)
}

/// Δ(S) = Σ_x̃ P(x̃) ‖P(y|x̃) - S(x̃) P(q|x̃)‖₁.
pub fn expected_bias(s: &RecoveryMap, ww: &WeakWorld) -> Result<f64> {
    let rec = s.recovered_posterior(ww)?;
    let w = ww.world();
    let mut total = 0.0;
    for i in 0..w.instances() {
        let gap: f64 = (&w.posterior().row(i) - &rec.row(i)).iter().map(|v| v.abs()).sum();
        total += w.instance_marginal()[i] * gap;
    }
    Ok(total)
}

/// sup over instances of ‖S(x̃)ᵀ S(x̃)‖_∞ (largest absolute row sum).
pub fn recovery_magnitude(s: &RecoveryMap) -> f64 {
    s.matrices()
        .iter()
        .map(|m| {
            let g = m.t().dot(m);
            g.rows().into_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}
