//! Small dense kernels: Jacobi eigensolver, one-sided Jacobi SVD, pivoted
//! Gaussian elimination. Everything here is sized for a few hundred rows.

use ndarray::{Array1, Array2};

use crate::{Error, Mat, Result, Vector};

const MAX_SWEEPS: usize = 100;

pub fn identity(n: usize) -> Mat {
    Array2::eye(n)
}

pub fn frobenius_sq(a: &Mat) -> f64 {
    a.iter().map(|v| v * v).sum()
}

pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Largest asymmetry |a_ij - a_ji| with its location.
pub fn asymmetry(a: &Mat) -> (usize, usize, f64) {
    let n = a.nrows();
    let mut worst = (0, 0, 0.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (a[[i, j]] - a[[j, i]]).abs();
            if gap > worst.2 {
                worst = (i, j, gap);
            }
        }
    }
    worst
}

pub fn require_square(a: &Mat, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::dimension(
            what,
            format!("square matrix"),
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    Ok(())
}

/// Cyclic Jacobi on a symmetric matrix. Returns unsorted eigenvalues and the
/// matrix whose columns are the matching eigenvectors. Sweeps stop once the
/// off-diagonal Frobenius mass is below `tol` times the total mass.
pub fn jacobi_eigh(a: &Mat, tol: f64) -> Result<(Vector, Mat)> {
    let n = a.nrows();
    let mut m: Vec<f64> = a.iter().copied().collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut converged = n < 2 || total == 0.0;
    let mut sweep = 0;
    while !converged {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += 2.0 * m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= tol * total {
            break;
        }
        if sweep == MAX_SWEEPS {
            return Err(Error::Numerical(format!(
                "Jacobi did not converge after {MAX_SWEEPS} sweeps (off-diagonal mass {:e})",
                off.sqrt()
            )));
        }
        sweep += 1;
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                // skip rotations that no longer change anything in floating point
                if apq.abs() < f64::EPSILON * 1e-3 * (app.abs() + aqq.abs()) {
                    m[p * n + q] = 0.0;
                    m[q * n + p] = 0.0;
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let g = m[k * n + p];
                    let h = m[k * n + q];
                    let kp = g - s * (h + g * tau);
                    let kq = h + s * (g - h * tau);
                    m[k * n + p] = kp;
                    m[p * n + k] = kp;
                    m[k * n + q] = kq;
                    m[q * n + k] = kq;
                }
                for k in 0..n {
                    let g = v[k * n + p];
                    let h = v[k * n + q];
                    v[k * n + p] = g - s * (h + g * tau);
                    v[k * n + q] = h + s * (g - h * tau);
                }
            }
        }
        converged = !rotated;
    }
    let values = Array1::from_iter((0..n).map(|i| m[i * n + i]));
    let vectors = Array2::from_shape_vec((n, n), v).expect("shape");
    Ok((values, vectors))
}

/// Thin SVD `a = u diag(s) vᵀ` by one-sided Jacobi on the columns of `a`.
/// `u` is m×k, `s` has k entries, `v` is k×k with k = a.ncols(). Columns of
/// `u` belonging to zero singular values are left at zero.
pub struct Svd {
    pub u: Mat,
    pub s: Vector,
    pub v: Mat,
}

pub fn svd(a: &Mat) -> Result<Svd> {
    let (rows, cols) = a.dim();
    let mut u = a.clone();
    let mut v: Mat = identity(cols);
    for sweep in 0..=MAX_SWEEPS {
        if sweep == MAX_SWEEPS {
            return Err(Error::Numerical("one-sided Jacobi SVD did not converge".into()));
        }
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for k in 0..rows {
                    alpha += u[[k, p]] * u[[k, p]];
                    beta += u[[k, q]] * u[[k, q]];
                    gamma += u[[k, p]] * u[[k, q]];
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let up = u[[k, p]];
                    let uq = u[[k, q]];
                    u[[k, p]] = c * up - s * uq;
                    u[[k, q]] = s * up + c * uq;
                }
                for k in 0..cols {
                    let vp = v[[k, p]];
                    let vq = v[[k, q]];
                    v[[k, p]] = c * vp - s * vq;
                    v[[k, q]] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s = Array1::zeros(cols);
    for j in 0..cols {
        let norm = u.column(j).iter().map(|x| x * x).sum::<f64>().sqrt();
        s[j] = norm;
        if norm > 0.0 {
            u.column_mut(j).mapv_inplace(|x| x / norm);
        }
    }
    Ok(Svd { u, s, v })
}

/// Solve `a x = b` by Gaussian elimination with partial pivoting. A pivot
/// below `1e-14 * max|a|` counts as singular.
pub fn solve(a: &Mat, b: &Mat) -> Result<Mat> {
    require_square(a, "system matrix")?;
    let n = a.nrows();
    if b.nrows() != n {
        return Err(Error::dimension("right-hand side", format!("{n} rows"), b.nrows()));
    }
    let scale = max_abs(a);
    if n > 0 && scale == 0.0 {
        return Err(Error::Singular("system matrix is zero".into()));
    }
    let mut m = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let (piv, pval) = (col..n)
            .map(|r| (r, m[[r, col]].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pval <= 1e-14 * scale {
            return Err(Error::Singular(format!("pivot {pval:e} in column {col}")));
        }
        if piv != col {
            for k in 0..n {
                m.swap([piv, k], [col, k]);
            }
            for k in 0..x.ncols() {
                x.swap([piv, k], [col, k]);
            }
        }
        let d = m[[col, col]];
        for r in (col + 1)..n {
            let f = m[[r, col]] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[[r, k]] -= f * m[[col, k]];
            }
            for k in 0..x.ncols() {
                x[[r, k]] -= f * x[[col, k]];
            }
        }
    }
    for col in (0..n).rev() {
        let d = m[[col, col]];
        for k in 0..x.ncols() {
            let mut acc = x[[col, k]];
            for j in (col + 1)..n {
                acc -= m[[col, j]] * x[[j, k]];
            }
            x[[col, k]] = acc / d;
        }
    }
    Ok(x)
}

/// Orthogonal projector onto the column span of `a`, plus the numerical rank.
/// Directions with singular value below `1e-12 * s_max` are dropped.
pub fn column_projector(a: &Mat) -> Result<(Mat, usize)> {
    let n = a.nrows();
    let dec = svd(a)?;
    let smax = dec.s.iter().fold(0.0_f64, |m, &x| m.max(x));
    let mut p = Array2::zeros((n, n));
    let mut rank = 0;
    for j in 0..dec.s.len() {
        if smax > 0.0 && dec.s[j] > 1e-12 * smax {
            rank += 1;
            let col = dec.u.column(j);
            for r in 0..n {
                for c in 0..n {
                    p[[r, c]] += col[r] * col[c];
                }
            }
        }
    }
    Ok((p, rank))
}
