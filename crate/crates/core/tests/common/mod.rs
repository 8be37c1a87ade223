//! Brute-force oracles written straight from the definitions, with plain
//! loops and no shared code paths with the library.
#![allow(dead_code)]

use ndarray::Array2;
use wsc_core::graph::PerturbationConfig;
use wsc_core::recovery::RecoveryMap;
use wsc_core::world::{WeakWorld, WorldModel};
use wsc_core::Mat;

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(f: &Mat, x: usize, y: usize) -> f64 {
    (0..f.ncols()).map(|k| f[[x, k]] * f[[y, k]]).sum()
}

/// w^u[x][x'] = Σ_i P(i) A(x|i) A(x'|i).
pub fn wu(w: &WorldModel) -> Mat {
    let (m, n, c) = (w.instances(), w.aug_points(), w.classes());
    let mut out = Array2::zeros((n, n));
    for i in 0..m {
        let pi: f64 = (0..c).map(|y| w.joint()[[i, y]]).sum();
        for x in 0..n {
            for xp in 0..n {
                out[[x, xp]] += pi * w.kernel()[[i, x]] * w.kernel()[[i, xp]];
            }
        }
    }
    out
}

/// w^l[x][x'] = Σ_{(i,y),(j,y')} P(i,y) P(j,y') 1[y=y'] A(x|i) A(x'|j).
pub fn wl(w: &WorldModel) -> Mat {
    let (m, n, c) = (w.instances(), w.aug_points(), w.classes());
    let mut out = Array2::zeros((n, n));
    for i in 0..m {
        for j in 0..m {
            for y in 0..c {
                let p = w.joint()[[i, y]] * w.joint()[[j, y]];
                if p == 0.0 {
                    continue;
                }
                for x in 0..n {
                    for xp in 0..n {
                        out[[x, xp]] += p * w.kernel()[[i, x]] * w.kernel()[[j, xp]];
                    }
                }
            }
        }
    }
    out
}

/// P(i, q) = Σ_y P(i, y) T_i[q][y].
pub fn weak_joint(ww: &WeakWorld) -> Mat {
    let w = ww.world();
    let (m, c, v) = (w.instances(), w.classes(), ww.weak_labels());
    let mut out = Array2::zeros((m, v));
    for i in 0..m {
        let t = ww.transition_for(i).matrix();
        for q in 0..v {
            for y in 0..c {
                out[[i, q]] += w.joint()[[i, y]] * t[[q, y]];
            }
        }
    }
    out
}

/// S((i,q),(j,q')) = S_i[:,q] · S_j[:,q'].
fn similarity(s: &RecoveryMap, i: usize, q: usize, j: usize, qp: usize) -> f64 {
    let (a, b) = (s.matrix_for(i), s.matrix_for(j));
    (0..a.nrows()).map(|y| a[[y, q]] * b[[y, qp]]).sum()
}

pub fn wwl(ww: &WeakWorld, s: &RecoveryMap) -> Mat {
    let w = ww.world();
    let (m, n, v) = (w.instances(), w.aug_points(), ww.weak_labels());
    let pq = weak_joint(ww);
    let mut out = Array2::zeros((n, n));
    for i in 0..m {
        for q in 0..v {
            for j in 0..m {
                for qp in 0..v {
                    let p = pq[[i, q]] * pq[[j, qp]] * similarity(s, i, q, j, qp);
                    if p == 0.0 {
                        continue;
                    }
                    for x in 0..n {
                        for xp in 0..n {
                            out[[x, xp]] += p * w.kernel()[[i, x]] * w.kernel()[[j, xp]];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn class_prior(w: &WorldModel) -> Vec<f64> {
    (0..w.classes()).map(|y| (0..w.instances()).map(|i| w.joint()[[i, y]]).sum()).collect()
}

pub fn aug_marginal(w: &WorldModel) -> Vec<f64> {
    let mut p = vec![0.0; w.aug_points()];
    for i in 0..w.instances() {
        let pi: f64 = (0..w.classes()).map(|y| w.joint()[[i, y]]).sum();
        for (x, px) in p.iter_mut().enumerate() {
            *px += pi * w.kernel()[[i, x]];
        }
    }
    p
}

/// The five expectations of the loss, each evaluated by enumerating the
/// joint draws it is defined over.
pub fn loss_terms(f: &Mat, ww: &WeakWorld, s: &RecoveryMap) -> [f64; 5] {
    let w = ww.world();
    let (m, n, v, c) = (w.instances(), w.aug_points(), ww.weak_labels(), w.classes());
    let prior = class_prior(w);
    let pq = weak_joint(ww);
    let px = aug_marginal(w);
    let k = w.kernel();
    let pi: Vec<f64> = (0..m).map(|i| (0..c).map(|y| w.joint()[[i, y]]).sum()).collect();

    let mut l1 = 0.0;
    for i in 0..m {
        for x in 0..n {
            for xp in 0..n {
                l1 += pi[i] * k[[i, x]] * k[[i, xp]] * dot(f, x, xp);
            }
        }
    }
    let mut l2 = 0.0;
    for i in 0..m {
        for q in 0..v {
            for j in 0..m {
                for qp in 0..v {
                    let p = pq[[i, q]] * pq[[j, qp]] * similarity(s, i, q, j, qp);
                    for x in 0..n {
                        for xp in 0..n {
                            l2 += p * k[[i, x]] * k[[j, xp]] * dot(f, x, xp);
                        }
                    }
                }
            }
        }
    }
    let mut l3 = 0.0;
    for x in 0..n {
        for xp in 0..n {
            l3 += px[x] * px[xp] * dot(f, x, xp).powi(2);
        }
    }
    // S'(i, q) = S_i[:, q] · P(y)
    let sp = |i: usize, q: usize| -> f64 { (0..c).map(|y| s.matrix_for(i)[[y, q]] * prior[y]).sum() };
    let mut l4 = 0.0;
    let mut l5 = 0.0;
    for i in 0..m {
        for q in 0..v {
            let a = pq[[i, q]] * sp(i, q);
            for x in 0..n {
                for xp in 0..n {
                    l5 += a * k[[i, x]] * px[xp] * dot(f, x, xp).powi(2);
                }
            }
            for j in 0..m {
                for qp in 0..v {
                    let b = pq[[j, qp]] * sp(j, qp);
                    for x in 0..n {
                        for xp in 0..n {
                            l4 += a * b * k[[i, x]] * k[[j, xp]] * dot(f, x, xp).powi(2);
                        }
                    }
                }
            }
        }
    }
    [l1, l2, l3, l4, l5]
}

pub fn loss_total(t: &[f64; 5], cfg: &PerturbationConfig) -> f64 {
    let (a, b) = (cfg.alpha, cfg.beta);
    -2.0 * a * t[0] - 2.0 * b * t[1] + a * a * t[2] + b * b * t[3] + 2.0 * a * b * t[4]
}

/// Σ_{x∈Ω,x'∉Ω} w / Σ_{x∈Ω} deg.
pub fn conductance(w: &Mat, subset: &[usize]) -> f64 {
    let n = w.nrows();
    let inside = |x: usize| subset.contains(&x);
    let mut cut = 0.0;
    let mut vol = 0.0;
    for &x in subset {
        for xp in 0..n {
            vol += w[[x, xp]];
            if !inside(xp) {
                cut += w[[x, xp]];
            }
        }
    }
    cut / vol
}

/// ρ_k by enumerating every assignment of the n nodes to k labels that uses
/// all labels.
pub fn sparsest(w: &Mat, k: usize) -> f64 {
    let n = w.nrows();
    let total = k.pow(n as u32);
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    for code in 0..total {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        let blocks: Vec<Vec<usize>> = (0..k).map(|b| (0..n).filter(|&x| labels[x] == b).collect()).collect();
        if blocks.iter().any(Vec::is_empty) {
            continue;
        }
        let worst = blocks.iter().map(|b| conductance(w, b)).fold(0.0, f64::max);
        best = best.min(worst);
    }
    best
}

/// Projector onto the column span of `a`, via Gram-Schmidt.
pub fn projector(a: &Mat) -> Mat {
    let n = a.nrows();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for col in a.columns() {
        let mut v = col.to_vec();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= p * bi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut p = Array2::zeros((n, n));
    for b in &basis {
        for i in 0..n {
            for j in 0..n {
                p[[i, j]] += b[i] * b[j];
            }
        }
    }
    p
}
