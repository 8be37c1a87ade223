//! Self-checks of the identities the library relies on, run over seeded
//! random worlds. Each check reports its worst residual against a fixed
//! tolerance.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::fixtures;
use crate::graph::{self, PerturbationConfig};
use crate::linalg;
use crate::loss::{self, TrainConfig, WscObjective};
use crate::metrics;
use crate::pipeline::corrupted_recovery;
use crate::recovery::{self, Conversion, RecoveryMap};
use crate::rng::{self, WscRng};
use crate::spectral;
use crate::world::{scui_transition, ScuiParams, WeakWorld};
use crate::{Error, Result};

pub const CHECKS: &[&str] =
    &["prop21", "prop22", "collapse", "degrees", "conductance", "recovery", "gradient", "spectral", "partition", "scaling"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyScope {
    /// Run only these checks; empty runs all.
    pub only: Vec<String>,
    /// Replace exact recovery maps by corrupted ones. The graph and loss
    /// identities must then fail; used as a negative control.
    pub corrupt_recovery: bool,
    pub worlds: usize,
    pub seed: u64,
}

impl Default for VerifyScope {
    fn default() -> Self {
        VerifyScope { only: Vec::new(), corrupt_recovery: false, worlds: 20, seed: 2024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub worst_residual: f64,
    pub tolerance: f64,
    pub cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

struct Ctx {
    scope: VerifyScope,
}

impl Ctx {
    fn rng(&self, check: u64, case: usize) -> WscRng {
        rng::stream(rng::mix(self.scope.seed, check), case as u64)
    }

    fn weak_world(&self, r: &mut WscRng, uniform: bool) -> Result<WeakWorld> {
        let m = 2 + (rng::splitmix64(r.next_u64_value()) % 5) as usize;
        let c = 2 + (r.next_u64_value() % 3) as usize;
        let n = 2 + (r.next_u64_value() % 7) as usize;
        let v = 2 + (r.next_u64_value() % 6) as usize;
        let per = r.next_u64_value() % 2 == 0;
        fixtures::random_weak_world(r, m, c, n, v, uniform, per)
    }

    fn map(&self, ww: &WeakWorld, case: usize) -> Result<RecoveryMap> {
        if self.scope.corrupt_recovery {
            corrupted_recovery(ww, case as u64)
        } else {
            recovery::exact_recovery(ww)
        }
    }
}

trait NextU64 {
    fn next_u64_value(&mut self) -> u64;
}

impl NextU64 for WscRng {
    fn next_u64_value(&mut self) -> u64 {
        use rand::RngCore;
        self.next_u64()
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn check(name: &str, tol: f64, cases: usize, worst: f64) -> CheckResult {
    CheckResult { name: name.into(), passed: worst <= tol && worst.is_finite(), worst_residual: worst, tolerance: tol, cases }
}

fn prop21(ctx: &Ctx) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    for case in 0..ctx.scope.worlds {
        let mut r = ctx.rng(1, case);
        let ww = ctx.weak_world(&mut r, false)?;
        let s = ctx.map(&ww, case)?;
        let gwl = graph::weak_supervised_graph(&ww, &s)?;
        let gl = graph::supervised_graph(ww.world())?;
        worst = worst.max(linalg::max_abs(&(gwl.weights() - gl.weights())));
    }
    Ok(check("prop21", 1e-10, ctx.scope.worlds, worst))
}

fn prop22(ctx: &Ctx) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    let mut cases = 0;
    for case in 0..ctx.scope.worlds {
        let mut r = ctx.rng(2, case);
        let ww = ctx.weak_world(&mut r, false)?;
        let s = ctx.map(&ww, case)?;
        let cfg = PerturbationConfig::new(0.5 + rng::symmetric_uniform(&mut r, 0.4), 1.0)?;
        let g = graph::build_perturbation_graph(&ww, &s, &cfg)?;
        let norm = graph::normalize(&g)?;
        let obj = WscObjective::population(&ww, &s, &cfg)?;
        let a2 = linalg::frobenius_sq(norm.matrix());
        for _ in 0..5 {
            let f = fixtures::random_features(&mut r, g.n(), 3, 1.0);
            let lhs = obj.value(&f)? + a2;
            let rhs = loss::matrix_factorization_objective(&norm, &f)?;
            worst = worst.max(rel(lhs, rhs));
            cases += 1;
        }
    }
    Ok(check("prop22", 1e-8, cases, worst))
}

fn collapse(ctx: &Ctx) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    for case in 0..ctx.scope.worlds {
        let mut r = ctx.rng(3, case);
        let ww = ctx.weak_world(&mut r, true)?;
        let s = ctx.map(&ww, case)?;
        let c = ww.world().classes() as f64;
        let cfg = PerturbationConfig::new(1.0, 2.0)?;
        let f = fixtures::random_features(&mut r, ww.world().aug_points(), 3, 1.0);
        let b = loss::population_loss(&f, &ww, &s, &cfg)?;
        let collapsed = b.collapsed.ok_or_else(|| Error::Numerical("prior not uniform".into()))?;
        worst = worst.max(rel(collapsed, b.total)).max(rel(b.l4, b.l3 / (c * c))).max(rel(b.l5, b.l3 / c));
    }
    Ok(check("collapse", 1e-10, ctx.scope.worlds, worst))
}

fn degrees(ctx: &Ctx) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    for case in 0..ctx.scope.worlds {
        let mut r = ctx.rng(4, case);
        let ww = ctx.weak_world(&mut r, true)?;
        let s = ctx.map(&ww, case)?;
        let w = ww.world();
        let c = w.classes() as f64;
        let gu = graph::self_supervised_graph(w)?;
        let cfg = PerturbationConfig::new(0.7, 1.9)?;
        let gp = graph::build_perturbation_graph(&ww, &s, &cfg)?;
        for x in 0..w.aug_points() {
            let px = w.aug_marginal()[x];
            worst = worst.max((gu.degrees()[x] - px).abs());
            worst = worst.max((gp.degrees()[x] - (cfg.alpha + cfg.beta / c) * px).abs());
        }
    }
    Ok(check("degrees", 1e-12, ctx.scope.worlds, worst))
}

fn conductance(ctx: &Ctx) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    let mut cases = 0;
    for case in 0..ctx.scope.worlds.min(10) {
        let mut r = ctx.rng(5, case);
        let ww = ctx.weak_world(&mut r, true)?;
        let s = ctx.map(&ww, case)?;
        let w = ww.world();
        let c = w.classes() as f64;
        let beta = 1.3;
        let cfg = PerturbationConfig::new(1.0 - beta / c, beta)?;
        let gp = graph::build_perturbation_graph(&ww, &s, &cfg)?;
        let n = w.aug_points();
        for mask in 1u32..(1 << n) {
            let subset: Vec<usize> = (0..n).filter(|&x| mask >> x & 1 == 1).collect();
            let direct = metrics::dirichlet_conductance(&gp, &subset)?;
            let split = metrics::decomposed_conductance(w, &cfg, &subset)?;
            worst = worst.max((direct - split).abs());
            cases += 1;
        }
    }
    Ok(check("conductance", 1e-12, cases, worst))
}

fn recovery_check(ctx: &Ctx) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    let mut cases = 0;
    for case in 0..ctx.scope.worlds {
        let mut r = ctx.rng(6, case);
        let c = 2 + case % 4;
        let t = fixtures::random_transition(&mut r, c + case % 3, c)?;
        let s = recovery::inverse_transition_recovery(&t)?;
        let st = s.matrix_for(0).dot(t.matrix());
        worst = worst.max(linalg::max_abs(&(st - Array2::<f64>::eye(c))));
        let sigma: Vec<f64> = (0..c).map(|_| 0.05 + 0.6 * rng::symmetric_uniform(&mut r, 0.5).abs()).collect();
        let p = ScuiParams::new(sigma.clone())?;
        let st = recovery::scui_recovery(&p)?.matrix_for(0).dot(scui_transition(&p)?.matrix());
        worst = worst.max(linalg::max_abs(&(st - Array2::<f64>::eye(c))));
        for &sg in &sigma {
            let th = recovery::sigma_theta_convert(sg, c, Conversion::SigmaToTheta)?;
            let back = recovery::sigma_theta_convert(th, c, Conversion::ThetaToSigma)?;
            worst = worst.max((back - sg).abs() * 1e4);
        }
        let ww = ctx.weak_world(&mut r, false)?;
        let s = ctx.map(&ww, case)?;
        worst = worst.max(recovery::expected_bias(&s, &ww)?);
        cases += 1;
    }
    Ok(check("recovery", 1e-10, cases, worst))
}

fn gradient(ctx: &Ctx) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    for case in 0..ctx.scope.worlds {
        let mut r = ctx.rng(7, case);
        let ww = ctx.weak_world(&mut r, false)?;
        let s = ctx.map(&ww, case)?;
        let cfg = PerturbationConfig::new(1.0, 0.5 + case as f64 * 0.1)?;
        let obj = WscObjective::population(&ww, &s, &cfg)?;
        let f = fixtures::random_features(&mut r, obj.n(), 2, 1.0);
        let g = obj.gradient(&f)?;
        let h = 1e-5;
        let mut diff = 0.0;
        for idx in ndarray::indices(f.dim()) {
            let mut p = f.clone();
            let mut m = f.clone();
            p[idx] += h;
            m[idx] -= h;
            let fd = (obj.value(&p)? - obj.value(&m)?) / (2.0 * h);
            diff += (fd - g[idx]).powi(2);
        }
        let norm = linalg::frobenius_sq(&g).sqrt().max(1e-12);
        worst = worst.max(diff.sqrt() / norm);
    }
    Ok(check("gradient", 1e-5, ctx.scope.worlds, worst))
}

fn spectral_check(ctx: &Ctx) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    for case in 0..ctx.scope.worlds {
        let mut r = ctx.rng(8, case);
        let ww = ctx.weak_world(&mut r, false)?;
        let s = ctx.map(&ww, case)?;
        let g = graph::build_perturbation_graph(&ww, &s, &PerturbationConfig::new(1.0, 1.0)?)?;
        let norm = match graph::normalize(&g) {
            Ok(n) => n,
            Err(_) => continue,
        };
        let sp = spectral::eigendecompose(&norm)?;
        let v = sp.eigenvectors();
        let resid = norm.matrix().dot(v) - v * sp.eigenvalues();
        worst = worst.max(linalg::max_abs(&resid) * 10.0);
        worst = worst.max(linalg::max_abs(&(v.t().dot(v) - Array2::<f64>::eye(g.n()))));
    }
    Ok(check("spectral", 1e-9, ctx.scope.worlds, worst))
}

fn partition(ctx: &Ctx) -> Result<CheckResult> {
    // worst violation of ρ_i ≤ ρ_{i+1} and of ρ^l_d ≥ 1 - c/d
    let mut worst = 0.0_f64;
    let cases = ctx.scope.worlds.min(8);
    for case in 0..cases {
        let mut r = ctx.rng(9, case);
        let c = 2 + case % 2;
        let n = 3 + case % 4;
        let w = fixtures::random_world(&mut r, 2 + case % 3, c, n, true)?;
        let gu = graph::self_supervised_graph(&w)?;
        let gl = graph::supervised_graph(&w)?;
        let ru = metrics::rho_profile(&gu, n)?;
        let rl = metrics::rho_profile(&gl, n)?;
        for i in 1..n {
            worst = worst.max(ru[&i] - ru[&(i + 1)]);
        }
        for (&d, &v) in &rl {
            worst = worst.max(1.0 - c as f64 / d as f64 - v);
        }
    }
    Ok(check("partition", 1e-10, cases, worst))
}

fn scaling(ctx: &Ctx) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    let cases = ctx.scope.worlds.min(3);
    for case in 0..cases {
        let mut r = ctx.rng(10, case);
        let ww = fixtures::random_weak_world(&mut r, 4, 2, 6, 2, false, false)?;
        let s = ctx.map(&ww, case)?;
        let train = TrainConfig { d: 2, max_steps: 300, seed: case as u64, ..TrainConfig::default() };
        let base = PerturbationConfig::new(1.0, 1.0)?;
        let f0 = loss::train_features(&ww, &s, &base, &train)?;
        let o0 = WscObjective::population(&ww, &s, &base)?;
        let e0 = scaled(&f0.final_features, &o0);
        for eta in [0.5, 2.0, 10.0] {
            let cfg = PerturbationConfig::new(eta, eta)?;
            let f = loss::train_features(&ww, &s, &cfg, &train)?;
            let o = WscObjective::population(&ww, &s, &cfg)?;
            worst = worst.max(linalg::max_abs(&(scaled(&f.final_features, &o) - &e0)));
        }
    }
    Ok(check("scaling", 1e-8, cases, worst))
}

fn scaled(f: &crate::Mat, obj: &WscObjective) -> crate::Mat {
    let p = obj.loss_degrees();
    let mut e = f.clone();
    for (x, mut row) in e.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v * p[x].abs().sqrt());
    }
    e
}

pub fn verify_invariants(scope: &VerifyScope) -> Result<VerificationReport> {
    for name in &scope.only {
        if !CHECKS.contains(&name.as_str()) {
            return Err(Error::invalid("only", format!("unknown check '{name}', expected one of {}", CHECKS.join(", "))));
        }
    }
    let ctx = Ctx { scope: scope.clone() };
    let mut checks = Vec::new();
    for &name in CHECKS {
        if !scope.only.is_empty() && !scope.only.iter().any(|o| o == name) {
            continue;
        }
        let res = match name {
            "prop21" => prop21(&ctx),
            "prop22" => prop22(&ctx),
            "collapse" => collapse(&ctx),
            "degrees" => degrees(&ctx),
            "conductance" => conductance(&ctx),
            "recovery" => recovery_check(&ctx),
            "gradient" => gradient(&ctx),
            "spectral" => spectral_check(&ctx),
            "partition" => partition(&ctx),
            _ => scaling(&ctx),
        };
        // a numerical failure inside a check counts as that check failing
        checks.push(res.unwrap_or_else(|e| {
            log::warn!("check {name} aborted: {e}");
            CheckResult { name: name.into(), passed: false, worst_residual: f64::INFINITY, tolerance: 0.0, cases: 0 }
        }));
    }
    Ok(VerificationReport { passed: checks.iter().all(|c| c.passed), checks })
}
