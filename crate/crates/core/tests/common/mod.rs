//! Reference implementations used to check the engine. Everything here is
//! written from scratch with plain loops so it shares no code path with the
//! library under test.
#![allow(dead_code, clippy::needless_range_loop)]

use lag_core::{LayerId, LayerLibrary, LibraryTag, Matrix, RawAdapter, TokenVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Dense = Vec<Vec<f64>>;

pub fn dense(m: &Matrix) -> Dense {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|t| row[t] * b[t][j]).sum())
                .collect()
        })
        .collect()
}

pub fn matvec(a: &Dense, x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn frobenius(a: &Dense) -> f64 {
    a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn sub(a: &Dense, b: &Dense) -> Dense {
    a.iter()
        .zip(b)
        .map(|(p, q)| p.iter().zip(q).map(|(x, y)| x - y).collect())
        .collect()
}

/// `B A` for a raw adapter, in `f64`.
pub fn product(raw: &RawAdapter) -> Dense {
    matmul(&dense(&raw.b), &dense(&raw.a))
}

pub struct DenseSvd {
    /// Descending.
    pub s: Vec<f64>,
    /// `v[j]` is the right singular vector for `s[j]`.
    pub v: Vec<Vec<f64>>,
}

/// One-sided (Hestenes) Jacobi SVD. Slow and accurate.
pub fn jacobi_svd(a: &Dense) -> DenseSvd {
    let m = a.len();
    let n = a[0].len();
    let mut w = a.clone();
    let mut v: Dense = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    alpha += w[i][p] * w[i][p];
                    beta += w[i][q] * w[i][q];
                    gamma += w[i][p] * w[i][q];
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for row in w.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| {
            let s = (0..m).map(|i| w[i][j] * w[i][j]).sum::<f64>().sqrt();
            (s, (0..n).map(|i| v[i][j]).collect())
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    DenseSvd {
        s: pairs.iter().map(|p| p.0).collect(),
        v: pairs.into_iter().map(|p| p.1).collect(),
    }
}

/// Right singular vectors whose singular value exceeds `tol · σ₁`.
pub fn row_basis(svd: &DenseSvd, tol: f64) -> Vec<Vec<f64>> {
    let top = svd.s.first().copied().unwrap_or(0.0);
    svd.s
        .iter()
        .zip(&svd.v)
        .filter(|(s, _)| **s > 0.0 && **s > tol * top)
        .map(|(_, v)| v.clone())
        .collect()
}

/// Orthogonal projector onto the span of orthonormal `basis`.
pub fn projector(basis: &[Vec<f64>], n: usize) -> Dense {
    (0..n)
        .map(|i| (0..n).map(|j| basis.iter().map(|b| b[i] * b[j]).sum()).collect())
        .collect()
}

/// Sine of the largest principal angle between two equal-dimension
/// subspaces, given orthonormal bases.
pub fn max_principal_angle_sin(p: &[Vec<f64>], q: &[Vec<f64>], n: usize) -> f64 {
    // ‖P_p − P_q‖₂ = sin θ_max; bound it by the Frobenius norm over √2
    frobenius(&sub(&projector(p, n), &projector(q, n))) / 2f64.sqrt()
}

pub fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let scale = 1.0 / (cols as f32).sqrt();
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f32 = StandardNormal.sample(rng);
        z * scale
    })
}

pub fn random_raw<R: Rng>(
    id: &str,
    layer: &str,
    tag: LibraryTag,
    m: usize,
    n: usize,
    r: usize,
    rng: &mut R,
) -> RawAdapter {
    let b = gaussian_matrix(m, r, rng);
    let a = gaussian_matrix(r, n, rng);
    RawAdapter::new(id.to_string(), LayerId::from(layer), tag, b, a).unwrap()
}

pub fn random_unit<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let len = norm(&v);
        if len > 1e-3 {
            return v.into_iter().map(|x| x / len).collect();
        }
    }
}

pub fn token<R: Rng>(n: usize, rng: &mut R) -> TokenVector {
    TokenVector::new(random_unit(n, rng).into_iter().map(|v| v as f32).collect()).unwrap()
}

fn dot_seq(a: &[f32], x: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (p, q) in a.iter().zip(x) {
        acc += f64::from(*p) * f64::from(*q);
    }
    acc
}

/// Index of the adapter with the largest `|arrow · x|`, lowest index on ties.
pub fn oracle_arrow_argmax(layer: &LayerLibrary, x: &TokenVector) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, a) in layer.adapters().iter().enumerate() {
        let s = dot_seq(a.a_star.row(0), x.as_slice()).abs();
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

pub fn oracle_spectr_score(layer: &LayerLibrary, i: usize, x: &TokenVector) -> f64 {
    let a = &layer.adapters()[i].a_star;
    let mut acc = 0.0f64;
    for row in 0..a.rows() {
        let d = dot_seq(a.row(row), x.as_slice());
        acc += d * d;
    }
    acc.sqrt()
}

/// Largest `‖A* x‖` among `candidates`, lowest library index on ties.
pub fn oracle_spectr_argmax(layer: &LayerLibrary, x: &TokenVector, candidates: &[usize]) -> usize {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for i in sorted {
        let s = oracle_spectr_score(layer, i, x);
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Top-k by arrow score via a full stable sort.
pub fn oracle_arrow_topk(layer: &LayerLibrary, x: &TokenVector, k: usize) -> Vec<usize> {
    let scores: Vec<f64> = layer
        .adapters()
        .iter()
        .map(|a| dot_seq(a.a_star.row(0), x.as_slice()).abs())
        .collect();
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Two-stage decision computed from scratch.
pub fn oracle_lag(layer: &LayerLibrary, x: &TokenVector, k: usize) -> usize {
    oracle_spectr_argmax(layer, x, &oracle_arrow_topk(layer, x, k))
}

/// `‖P x‖` where `P` projects onto the row space of the raw product `BA`,
/// computed without any aligned factors.
pub fn raw_spectr_score(raw: &RawAdapter, x: &TokenVector, tol: f64) -> f64 {
    let basis = row_basis(&jacobi_svd(&product(raw)), tol);
    let xs: Vec<f64> = x.as_slice().iter().map(|&v| f64::from(v)).collect();
    basis
        .iter()
        .map(|b| {
            let d: f64 = b.iter().zip(&xs).map(|(p, q)| p * q).sum();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}
