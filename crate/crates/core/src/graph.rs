//! Augmentation graphs over the finite augmentation space.

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::io::{mat_to_rows, rows_to_mat};
use crate::recovery::RecoveryMap;
use crate::world::{WeakWorld, WorldModel};
use crate::{Error, Mat, Result, Vector};

/// Default cap on the number of augmentation points for the command line.
pub const MAX_GRAPH_NODES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    SelfSup,
    Supervised,
    Weak,
    Perturbation,
}

impl GraphKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GraphKind::SelfSup => "self_sup",
            GraphKind::Supervised => "supervised",
            GraphKind::Weak => "weak",
            GraphKind::Perturbation => "perturbation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "self_sup" => Ok(GraphKind::SelfSup),
            "supervised" => Ok(GraphKind::Supervised),
            "weak" => Ok(GraphKind::Weak),
            "perturbation" => Ok(GraphKind::Perturbation),
            other => Err(Error::invalid("kind", format!("unknown graph kind '{other}'"))),
        }
    }
}

/// Symmetric weight matrix with its row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    weights: Mat,
    degrees: Vector,
    kind: GraphKind,
}

impl Graph {
    /// The weights are symmetrized as (W + Wᵀ)/2 after a check that they are
    /// symmetric to 1e-10 of their scale.
    pub fn new(weights: Mat, kind: GraphKind) -> Result<Self> {
        crate::linalg::require_square(&weights, "weights")?;
        let scale = crate::linalg::max_abs(&weights).max(1.0);
        let (i, j, gap) = crate::linalg::asymmetry(&weights);
        if gap > 1e-10 * scale {
            return Err(Error::NotSymmetric { i, j, gap });
        }
        let weights = (&weights + &weights.t()) * 0.5;
        let degrees = weights.sum_axis(Axis(1));
        Ok(Graph { weights, degrees, kind })
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }
    pub fn degrees(&self) -> &Vector {
        &self.degrees
    }
    pub fn kind(&self) -> GraphKind {
        self.kind
    }
    pub fn n(&self) -> usize {
        self.weights.nrows()
    }
    pub fn total_weight(&self) -> f64 {
        self.weights.sum()
    }
}

/// Kᵀ R Rᵀ K for an m×k matrix R of per-instance vectors: the weight of
/// (x, x') is Σ_{x̃, x̃'} A(x|x̃) A(x'|x̃') r(x̃)·r(x̃').
fn kernel_gram(kernel: &Mat, r: &Mat) -> Mat {
    let lifted = kernel.t().dot(r);
    lifted.dot(&lifted.t())
}

/// w^u(x, x') = Σ_x̃ P(x̃) A(x|x̃) A(x'|x̃).
pub fn self_supervised_graph(world: &WorldModel) -> Result<Graph> {
    let k = world.kernel();
    let p = world.instance_marginal();
    let mut scaled = k.clone();
    for (i, mut row) in scaled.axis_iter_mut(Axis(0)).enumerate() {
        row.mapv_inplace(|v| v * p[i]);
    }
    Graph::new(k.t().dot(&scaled), GraphKind::SelfSup)
}

/// w^l(x, x') = Σ_y [Σ_x̃ P(x̃,y) A(x|x̃)] [Σ_x̃' P(x̃',y) A(x'|x̃')].
pub fn supervised_graph(world: &WorldModel) -> Result<Graph> {
    Graph::new(kernel_gram(world.kernel(), world.joint()), GraphKind::Supervised)
}

/// Weak graph through a recovery map: each instance contributes the vector
/// Σ_q P(x̃, q) S(x̃)[:, q] in place of its class joint.
pub fn weak_supervised_graph(ww: &WeakWorld, s: &RecoveryMap) -> Result<Graph> {
    let recovered = s.recovered_joint(ww)?;
    Graph::new(kernel_gram(ww.world().kernel(), &recovered), GraphKind::Weak)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl PerturbationConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let cfg = PerturbationConfig { alpha, beta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::invalid("alpha/beta", "weights must be finite and non-negative"));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::invalid("alpha/beta", "alpha + beta must be positive"));
        }
        Ok(())
    }
}

/// α w^u + β w^wl.
pub fn perturbation_graph(gu: &Graph, gwl: &Graph, cfg: &PerturbationConfig) -> Result<Graph> {
    cfg.validate()?;
    if gu.kind() != GraphKind::SelfSup {
        return Err(Error::invalid("gu", format!("expected a self_sup graph, got {}", gu.kind().as_str())));
    }
    if gu.n() != gwl.n() {
        return Err(Error::dimension("gwl", format!("{} nodes", gu.n()), gwl.n()));
    }
    let w = gu.weights() * cfg.alpha + gwl.weights() * cfg.beta;
    Graph::new(w, GraphKind::Perturbation)
}

/// Perturbation graph straight from a weak world and a recovery map.
pub fn build_perturbation_graph(ww: &WeakWorld, s: &RecoveryMap, cfg: &PerturbationConfig) -> Result<Graph> {
    let gu = self_supervised_graph(ww.world())?;
    let gwl = weak_supervised_graph(ww, s)?;
    perturbation_graph(&gu, &gwl, cfg)
}

/// Ã(x, x') = A(x, x') / sqrt(A_x A_x').
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGraph {
    matrix: Mat,
    degrees: Vector,
}

impl NormalizedGraph {
    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }
    pub fn degrees(&self) -> &Vector {
        &self.degrees
    }
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }
}

pub fn normalize(g: &Graph) -> Result<NormalizedGraph> {
    normalize_with_degrees(g.weights(), g.degrees())
}

/// Normalize `w` by an arbitrary positive degree vector.
pub fn normalize_with_degrees(w: &Mat, degrees: &Vector) -> Result<NormalizedGraph> {
    for (i, &d) in degrees.iter().enumerate() {
        if d == 0.0 {
            return Err(Error::ZeroDegree(i));
        }
        if d < 0.0 || !d.is_finite() {
            return Err(Error::NegativeDegree { index: i, value: d });
        }
    }
    let root: Vector = degrees.mapv(f64::sqrt);
    let matrix = Mat::from_shape_fn(w.dim(), |(i, j)| w[[i, j]] / (root[i] * root[j]));
    Ok(NormalizedGraph { matrix, degrees: degrees.clone() })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GraphFile {
    pub kind: GraphKind,
    pub n: usize,
    pub weights: Vec<Vec<f64>>,
    pub degrees: Vec<f64>,
}

impl Graph {
    pub fn to_file(&self) -> GraphFile {
        GraphFile {
            kind: self.kind,
            n: self.n(),
            weights: mat_to_rows(&self.weights),
            degrees: self.degrees.to_vec(),
        }
    }

    pub fn from_file(f: &GraphFile) -> Result<Self> {
        let w = rows_to_mat("weights", &f.weights, f.n, Some(f.n))?;
        Graph::new(w, f.kind)
    }

    pub fn to_json(&self) -> Result<String> {
        crate::io::to_json_pretty(&self.to_file())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Graph::from_file(&serde_json::from_str(s)?)
    }

    /// Header `n,kind`, one line with those values, then the weight rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("n,kind\n{},{}\n", self.n(), self.kind.as_str());
        for row in self.weights.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(s: &str) -> Result<Self> {
        let mut lines = s.lines();
        let header = lines.next().unwrap_or_default();
        if header.trim() != "n,kind" {
            return Err(Error::invalid("csv", "expected header 'n,kind'"));
        }
        let meta = lines.next().unwrap_or_default();
        let (n, kind) = meta
            .split_once(',')
            .ok_or_else(|| Error::invalid("csv line 2", "expected 'n,kind'"))?;
        let n: usize = n.trim().parse().map_err(|_| Error::invalid("csv line 2", "bad node count"))?;
        let kind = GraphKind::parse(kind.trim())?;
        let mut rows = Vec::with_capacity(n);
        for (r, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let row = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::invalid(format!("weights[{r}]"), "bad number"))?;
            rows.push(row);
        }
        Graph::new(rows_to_mat("weights", &rows, n, Some(n))?, kind)
    }
}

/// ‖W‖ row sums, exposed for tests that check degree identities.
pub fn row_sums(w: &Mat) -> Vector {
    Array1::from_iter(w.rows().into_iter().map(|r| r.sum()))
}
