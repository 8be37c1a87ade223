//! Eigendecomposition of the normalized adjacency and the optimal embeddings
//! it induces.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::graph::NormalizedGraph;
use crate::io::mat_to_rows;
use crate::linalg;
use crate::{Error, Mat, Result, Vector};

pub const JACOBI_TOL: f64 = 1e-12;
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalues closer than this are ordered by their eigenvectors.
pub const TIE_TOL: f64 = 1e-10;

/// Eigenvalues in descending order with unit eigenvectors as columns. Each
/// eigenvector's first entry above 1e-12 in magnitude is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    eigenvalues: Vector,
    eigenvectors: Mat,
}

impl Spectrum {
    pub fn eigenvalues(&self) -> &Vector {
        &self.eigenvalues
    }
    pub fn eigenvectors(&self) -> &Mat {
        &self.eigenvectors
    }
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }
}

pub fn eigendecompose(norm: &NormalizedGraph) -> Result<Spectrum> {
    eigendecompose_matrix(norm.matrix())
}

fn canonical_sign(v: &mut [f64]) {
    if let Some(&lead) = v.iter().find(|x| x.abs() > 1e-12) {
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn lex_desc(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match y.total_cmp(x) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

pub fn eigendecompose_matrix(a: &Mat) -> Result<Spectrum> {
    linalg::require_square(a, "matrix")?;
    let (i, j, gap) = linalg::asymmetry(a);
    if gap > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { i, j, gap });
    }
    let sym = (a + &a.t()) * 0.5;
    let (vals, vecs) = linalg::jacobi_eigh(&sym, JACOBI_TOL)?;
    let n = vals.len();
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|k| {
            let mut v = vecs.column(k).to_vec();
            canonical_sign(&mut v);
            (vals[k], v)
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    // order runs of near-equal eigenvalues by their eigenvectors
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (pairs[start].0 - pairs[end].0).abs() <= TIE_TOL * pairs[start].0.abs().max(1.0) {
            end += 1;
        }
        if end - start > 1 {
            pairs[start..end].sort_by(|a, b| lex_desc(&a.1, &b.1));
        }
        start = end;
    }
    let eigenvalues = Array1::from_iter(pairs.iter().map(|p| p.0));
    let mut eigenvectors = Array2::zeros((n, n));
    for (k, (_, v)) in pairs.iter().enumerate() {
        for r in 0..n {
            eigenvectors[[r, k]] = v[r];
        }
    }
    Ok(Spectrum { eigenvalues, eigenvectors })
}

fn check_dim(spec: &Spectrum, d: usize) -> Result<()> {
    if d == 0 || d > spec.n() {
        return Err(Error::invalid("d", format!("embedding dimension must lie in 1..={}, got {d}", spec.n())));
    }
    Ok(())
}

/// F*[:, i] = sqrt(max(λ_i, 0)) v_i for the top d eigenpairs.
pub fn optimal_embedding(spec: &Spectrum, d: usize) -> Result<Mat> {
    check_dim(spec, d)?;
    let n = spec.n();
    Ok(Array2::from_shape_fn((n, d), |(r, i)| spec.eigenvalues[i].max(0.0).sqrt() * spec.eigenvectors[[r, i]]))
}

/// Smallest value of ‖Ã - F Fᵀ‖²_F over n×d matrices F.
pub fn optimal_objective(spec: &Spectrum, d: usize) -> Result<f64> {
    check_dim(spec, d)?;
    let total: f64 = spec.eigenvalues.iter().map(|l| l * l).sum();
    let kept: f64 = spec.eigenvalues.iter().take(d).map(|l| l.max(0.0).powi(2)).sum();
    Ok(total - kept)
}

/// f_x = F_x / sqrt(A_x).
pub fn embedding_to_features(f: &Mat, degrees: &Vector) -> Result<Mat> {
    scale_rows(f, degrees, true)
}

/// F_x = sqrt(A_x) f_x.
pub fn features_to_embedding(f: &Mat, degrees: &Vector) -> Result<Mat> {
    scale_rows(f, degrees, false)
}

fn scale_rows(f: &Mat, degrees: &Vector, divide: bool) -> Result<Mat> {
    if f.nrows() != degrees.len() {
        return Err(Error::dimension("features", format!("{} rows", degrees.len()), f.nrows()));
    }
    let mut out = f.clone();
    for (x, mut row) in out.rows_mut().into_iter().enumerate() {
        let d = degrees[x];
        if d <= 0.0 {
            return Err(if d == 0.0 { Error::ZeroDegree(x) } else { Error::NegativeDegree { index: x, value: d } });
        }
        let s = if divide { 1.0 / d.sqrt() } else { d.sqrt() };
        row.mapv_inplace(|v| v * s);
    }
    Ok(out)
}

/// λ_{⌊3d/4⌋} - λ_d with 1-based indices into the descending spectrum.
pub fn eigengap(spec: &Spectrum, d: usize) -> Result<f64> {
    check_dim(spec, d)?;
    let k = 3 * d / 4;
    if k == 0 {
        return Err(Error::invalid("d", "eigengap needs d >= 2"));
    }
    Ok(spec.eigenvalues[k - 1] - spec.eigenvalues[d - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubspaceDistance {
    pub distance: f64,
    pub rank_first: usize,
    pub rank_second: usize,
    pub rank_deficient: bool,
}

/// ‖P₁ - P₂‖_F between the projectors onto the column spans of the two
/// embeddings sqrt(A_x) f_x.
pub fn subspace_distance(f1: &Mat, f2: &Mat, degrees: &Vector) -> Result<SubspaceDistance> {
    let e1 = features_to_embedding(f1, degrees)?;
    let e2 = features_to_embedding(f2, degrees)?;
    embedding_distance(&e1, &e2)
}

pub fn embedding_distance(e1: &Mat, e2: &Mat) -> Result<SubspaceDistance> {
    let (p1, r1) = linalg::column_projector(e1)?;
    let (p2, r2) = linalg::column_projector(e2)?;
    Ok(SubspaceDistance {
        distance: linalg::frobenius_sq(&(p1 - p2)).sqrt(),
        rank_first: r1,
        rank_second: r2,
        rank_deficient: r1 < e1.ncols() || r2 < e2.ncols(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpectrumFile {
    pub eigenvalues: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigenvectors: Option<Vec<Vec<f64>>>,
}

impl Spectrum {
    pub fn to_file(&self, with_vectors: bool) -> SpectrumFile {
        SpectrumFile {
            eigenvalues: self.eigenvalues.to_vec(),
            eigenvectors: with_vectors.then(|| mat_to_rows(&self.eigenvectors)),
        }
    }
}
