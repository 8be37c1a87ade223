//! Graph and hypothesis-class quantities that appear in the error bound.
//! Several of them are computed by brute force and carry hard size caps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::{self, Graph, PerturbationConfig};
use crate::recovery::{self, RecoveryMap};
use crate::spectral;
use crate::world::{WeakWorld, WorldModel};
use crate::{Error, Mat, Result};

pub const PARTITION_CAP: usize = 12;
pub const LABELER_CAP: usize = 8;
pub const RADEMACHER_CAP: usize = 20;
pub const SAMPLE_TUPLE_CAP: usize = 1_000_000;

fn membership(n: usize, subset: &[usize]) -> Result<Vec<bool>> {
    if subset.is_empty() {
        return Err(Error::invalid("subset", "empty subset"));
    }
    let mut inside = vec![false; n];
    for &x in subset {
        if x >= n {
            return Err(Error::invalid("subset", format!("node {x} out of range")));
        }
        if inside[x] {
            return Err(Error::invalid("subset", format!("node {x} listed twice")));
        }
        inside[x] = true;
    }
    Ok(inside)
}

/// Φ(Ω) = Σ_{x∈Ω, x'∉Ω} w(x, x') / Σ_{x∈Ω} A_x.
pub fn dirichlet_conductance(g: &Graph, subset: &[usize]) -> Result<f64> {
    let inside = membership(g.n(), subset)?;
    let w = g.weights();
    let mut cut = 0.0;
    let mut vol = 0.0;
    for &x in subset {
        vol += g.degrees()[x];
        for (y, &inn) in inside.iter().enumerate() {
            if !inn {
                cut += w[[x, y]];
            }
        }
    }
    if !(vol > 0.0) {
        return Err(Error::Numerical(format!("subset volume {vol} is not positive")));
    }
    Ok(cut / vol)
}

/// α Φ_u(Ω) + (β/c) Φ_l(Ω), which equals the conductance of the
/// perturbation graph with an exact map when the class prior is uniform and
/// α + β/c = 1.
pub fn decomposed_conductance(world: &WorldModel, cfg: &PerturbationConfig, subset: &[usize]) -> Result<f64> {
    cfg.validate()?;
    let c = world.classes() as f64;
    if !world.has_uniform_prior(1e-12) {
        return Err(Error::invalid("world", "conductance decomposition needs a uniform class prior"));
    }
    if (cfg.alpha + cfg.beta / c - 1.0).abs() > 1e-12 {
        return Err(Error::invalid("alpha/beta", "conductance decomposition needs alpha + beta/c = 1"));
    }
    let gu = graph::self_supervised_graph(world)?;
    let gl = graph::supervised_graph(world)?;
    let mut total = 0.0;
    if cfg.alpha > 0.0 {
        total += cfg.alpha * dirichlet_conductance(&gu, subset)?;
    }
    if cfg.beta > 0.0 {
        total += cfg.beta / c * dirichlet_conductance(&gl, subset)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// max over blocks of the block conductance, minimized.
    pub rho: f64,
    pub blocks: Vec<Vec<usize>>,
}

struct PartitionSearch<'a> {
    w: &'a Mat,
    deg: Vec<f64>,
    n: usize,
    k: usize,
    assign: Vec<usize>,
    vol: Vec<f64>,
    internal: Vec<f64>,
    best: f64,
    best_assign: Vec<usize>,
}

impl PartitionSearch<'_> {
    fn place(&mut self, v: usize, b: usize) {
        let mut add = self.w[[v, v]];
        for u in 0..v {
            if self.assign[u] == b {
                add += 2.0 * self.w[[u, v]];
            }
        }
        self.assign[v] = b;
        self.vol[b] += self.deg[v];
        self.internal[b] += add;
    }

    fn unplace(&mut self, v: usize, b: usize) {
        let mut add = self.w[[v, v]];
        for u in 0..v {
            if self.assign[u] == b {
                add += 2.0 * self.w[[u, v]];
            }
        }
        self.vol[b] -= self.deg[v];
        self.internal[b] -= add;
    }

    // restricted growth strings with exactly k blocks
    fn walk(&mut self, v: usize, used: usize) {
        if v == self.n {
            let mut worst = 0.0_f64;
            for b in 0..self.k {
                worst = worst.max((self.vol[b] - self.internal[b]) / self.vol[b]);
            }
            if worst < self.best {
                self.best = worst;
                self.best_assign = self.assign.clone();
            }
            return;
        }
        let remaining = self.n - v;
        if used + remaining > self.k {
            for b in 0..used {
                self.place(v, b);
                self.walk(v + 1, used);
                self.unplace(v, b);
            }
        }
        if used < self.k {
            self.place(v, used);
            self.walk(v + 1, used + 1);
            self.unplace(v, used);
        }
    }
}

/// ρ_k: the smallest, over partitions into exactly k non-empty blocks, of
/// the largest block conductance. Exhaustive, so n is capped at 12.
pub fn sparsest_partition(g: &Graph, k: usize) -> Result<Partition> {
    let n = g.n();
    if n > PARTITION_CAP {
        return Err(Error::TooLarge { what: "partition search nodes".into(), size: n, cap: PARTITION_CAP });
    }
    if k == 0 || k > n {
        return Err(Error::invalid("i", format!("block count must lie in 1..={n}, got {k}")));
    }
    for (x, &d) in g.degrees().iter().enumerate() {
        if d == 0.0 {
            return Err(Error::ZeroDegree(x));
        }
        if d < 0.0 {
            return Err(Error::NegativeDegree { index: x, value: d });
        }
    }
    let mut search = PartitionSearch {
        w: g.weights(),
        deg: g.degrees().to_vec(),
        n,
        k,
        assign: vec![0; n],
        vol: vec![0.0; k],
        internal: vec![0.0; k],
        best: f64::INFINITY,
        best_assign: Vec::new(),
    };
    search.walk(0, 0);
    let mut blocks = vec![Vec::new(); k];
    for (x, &b) in search.best_assign.iter().enumerate() {
        blocks[b].push(x);
    }
    // the running sums can leave -0.0 or tiny negatives for a zero cut
    Ok(Partition { rho: search.best.max(0.0), blocks })
}

/// ρ_i for i = 1..=max_i.
pub fn rho_profile(g: &Graph, max_i: usize) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for i in 1..=max_i.min(g.n()) {
        out.insert(i, sparsest_partition(g, i)?.rho);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    /// Smallest probability that a labeling of augmentation points disagrees
    /// with the class of the instance it came from.
    pub gamma: f64,
    /// Minimizing labeler, the heaviest class at each point (lowest on ties).
    pub labeler: Vec<usize>,
}

/// γ* = Σ_x (P(x) - max_y Σ_x̃ P(x̃, y) A(x|x̃)).
pub fn gamma_consistency(world: &WorldModel) -> Consistency {
    let mass = world.aug_class_mass();
    let mut gamma = 0.0;
    let mut labeler = Vec::with_capacity(world.aug_points());
    for (x, row) in mass.rows().into_iter().enumerate() {
        let mut best = 0;
        for y in 1..row.len() {
            if row[y] > row[best] {
                best = y;
            }
        }
        labeler.push(best);
        gamma += world.aug_marginal()[x] - row[best];
    }
    Consistency { gamma: gamma.max(0.0), labeler }
}

/// Disagreement of a fixed labeler, Σ_{x̃,y,x} P(x̃,y) A(x|x̃) 1[ŷ(x) ≠ y].
pub fn labeler_error(world: &WorldModel, labeler: &[usize]) -> Result<f64> {
    if labeler.len() != world.aug_points() {
        return Err(Error::dimension("labeler", format!("{} entries", world.aug_points()), labeler.len()));
    }
    let mass = world.aug_class_mass();
    let mut err = 0.0;
    for (x, &l) in labeler.iter().enumerate() {
        for y in 0..world.classes() {
            if y != l {
                err += mass[[x, y]];
            }
        }
    }
    Ok(err)
}

/// Finite hypothesis class given by its values on a sample (or a domain):
/// `values[f][j]` is the output of hypothesis f at point j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisTable {
    pub values: Vec<Vec<f64>>,
}

impl HypothesisTable {
    fn width(&self) -> Result<usize> {
        let w = self.values.first().map(|r| r.len()).ok_or_else(|| Error::invalid("values", "empty class"))?;
        for (f, r) in self.values.iter().enumerate() {
            if r.len() != w {
                return Err(Error::dimension(format!("values[{f}]"), format!("{w} entries"), r.len()));
            }
        }
        Ok(w)
    }
}

fn sup_correlation(values: &[Vec<f64>], columns: &[usize], signs: u32) -> f64 {
    values
        .iter()
        .map(|f| {
            columns
                .iter()
                .enumerate()
                .map(|(j, &c)| if signs >> j & 1 == 1 { f[c] } else { -f[c] })
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn expected_sup(values: &[Vec<f64>], columns: &[usize]) -> f64 {
    let n = columns.len();
    let total: f64 = (0..1u32 << n).map(|s| sup_correlation(values, columns, s)).sum();
    total / (1u64 << n) as f64
}

/// E_σ sup_f Σ_j σ_j f(x_j) over all 2^n sign vectors, with the sample given
/// by the table's columns.
pub fn rademacher_complexity(table: &HypothesisTable) -> Result<f64> {
    let n = table.width()?;
    if n > RADEMACHER_CAP {
        return Err(Error::TooLarge { what: "Rademacher sample size".into(), size: n, cap: RADEMACHER_CAP });
    }
    let cols: Vec<usize> = (0..n).collect();
    Ok(expected_sup(&table.values, &cols))
}

/// Largest empirical complexity over all n-tuples drawn from the domain the
/// table's columns describe. Needs |X|^n ≤ 10^6.
pub fn max_rademacher_over_samples(table: &HypothesisTable, n: usize) -> Result<f64> {
    let domain = table.width()?;
    if n > RADEMACHER_CAP {
        return Err(Error::TooLarge { what: "Rademacher sample size".into(), size: n, cap: RADEMACHER_CAP });
    }
    let tuples = (domain as f64).powi(n as i32);
    if tuples > SAMPLE_TUPLE_CAP as f64 {
        return Err(Error::TooLarge { what: "sample tuples".into(), size: tuples as usize, cap: SAMPLE_TUPLE_CAP });
    }
    let mut idx = vec![0usize; n];
    let mut best = f64::NEG_INFINITY;
    loop {
        best = best.max(expected_sup(&table.values, &idx));
        let mut pos = 0;
        loop {
            if pos == n {
                return Ok(best);
            }
            idx[pos] += 1;
            if idx[pos] < domain {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Constants and measured quantities that enter the error bound. Nothing
/// here claims the bound holds; `bound_asserted` is always false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub classes: usize,
    pub d: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub rho_u: Option<BTreeMap<usize, f64>>,
    pub rho: Option<BTreeMap<usize, f64>>,
    pub alpha_star: f64,
    pub beta_star: f64,
    pub delta_lambda: Option<f64>,
    pub delta_s: f64,
    pub s_magnitude: f64,
    pub kappa: f64,
    pub eta0: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub eta4: f64,
    pub n: usize,
    pub n_q: usize,
    pub delta: f64,
    pub eta_n_delta: f64,
    pub eta_nq_delta: f64,
    pub bound_asserted: bool,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct BoundOptions {
    pub d: usize,
    pub n: usize,
    pub n_q: usize,
    pub delta: f64,
    /// Largest block count for the ρ profiles; defaults to d.
    pub rho_max_i: Option<usize>,
    pub skip_partitions: bool,
}

/// √(ln(2/δ)/n) + δ/2.
pub fn eta_n_delta(n: usize, delta: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n", "sample size must be positive"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid("delta", format!("must lie in (0, 1), got {delta}")));
    }
    Ok(((2.0 / delta).ln() / n as f64).sqrt() + delta / 2.0)
}

/// (η0, η1, η2, η3, η4) as functions of κ and d.
pub fn eta_constants(kappa: f64, d: usize) -> [f64; 5] {
    let d = d as f64;
    let k2 = kappa * kappa;
    [
        64.0 * (kappa * d + k2 * d * d),
        8.0 * k2 * d + 2.0 * k2 * k2 * d * d,
        64.0 * kappa * d,
        8.0 * k2 * d,
        24.0 * k2 * d,
    ]
}

pub fn bound_report(
    ww: &WeakWorld,
    s_hat: &RecoveryMap,
    cfg: &PerturbationConfig,
    features: &Mat,
    opts: &BoundOptions,
) -> Result<BoundReport> {
    cfg.validate()?;
    let world = ww.world();
    let c = world.classes();
    let n_aug = world.aug_points();
    if features.nrows() != n_aug {
        return Err(Error::dimension("features", format!("{n_aug} rows"), features.nrows()));
    }
    let mut skipped = Vec::new();
    let gamma = gamma_consistency(world).gamma;
    let gu = graph::self_supervised_graph(world)?;
    let gwl = graph::weak_supervised_graph(ww, s_hat)?;
    let gp = graph::perturbation_graph(&gu, &gwl, cfg)?;
    let max_i = opts.rho_max_i.unwrap_or(opts.d).min(n_aug);
    let (rho_u, rho) = if opts.skip_partitions {
        skipped.push("rho_u, rho: partition search disabled".to_string());
        (None, None)
    } else if n_aug > PARTITION_CAP {
        skipped.push(format!("rho_u, rho: {n_aug} augmentation points exceed the cap of {PARTITION_CAP}"));
        (None, None)
    } else {
        let ru = rho_profile(&gu, max_i)?;
        let rp = match rho_profile(&gp, max_i) {
            Ok(r) => Some(r),
            Err(e) => {
                skipped.push(format!("rho: {e}"));
                None
            }
        };
        (Some(ru), rp)
    };
    let mix = cfg.alpha + cfg.beta / c as f64;
    let delta_lambda = match graph::normalize(&gp).and_then(|ng| spectral::eigendecompose(&ng)) {
        Ok(spec) => match spectral::eigengap(&spec, opts.d) {
            Ok(v) => Some(v),
            Err(e) => {
                skipped.push(format!("delta_lambda: {e}"));
                None
            }
        },
        Err(e) => {
            skipped.push(format!("delta_lambda: {e}"));
            None
        }
    };
    let kappa = features.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let eta = eta_constants(kappa, opts.d);
    Ok(BoundReport {
        classes: c,
        d: opts.d,
        alpha: cfg.alpha,
        beta: cfg.beta,
        gamma,
        rho_u,
        rho,
        alpha_star: cfg.alpha / mix,
        beta_star: cfg.beta / c as f64 / mix,
        delta_lambda,
        delta_s: recovery::expected_bias(s_hat, ww)?,
        s_magnitude: recovery::recovery_magnitude(s_hat),
        kappa,
        eta0: eta[0],
        eta1: eta[1],
        eta2: eta[2],
        eta3: eta[3],
        eta4: eta[4],
        n: opts.n,
        n_q: opts.n_q,
        delta: opts.delta,
        eta_n_delta: eta_n_delta(opts.n, opts.delta)?,
        eta_nq_delta: eta_n_delta(opts.n_q.max(1), opts.delta)?,
        bound_asserted: false,
        skipped,
    })
}
