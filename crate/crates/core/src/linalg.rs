//! Low-rank SVD of an adapter product and spectral alignment.
//!
//! `BA` is never materialized. With thin QR factorizations `B = Q_B R_B`
//! and `Aᵀ = Q_A R_A` we get `BA = Q_B (R_B R_Aᵀ) Q_Aᵀ`, so the SVD of the
//! `r×r` core gives `U = Q_B U_c`, `V = Q_A V_c` with the core's singular
//! values. Cost is `O((m + n) r² + r³)`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::types::{AdapterLibrary, AlignedAdapter, LibraryTag, Matrix, RawAdapter, RoutingConfig};

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m×r_eff`, orthonormal columns
    pub u: DMatrix<f64>,
    /// descending, all positive
    pub s: Vec<f64>,
    /// `n×r_eff`, orthonormal columns
    pub v: DMatrix<f64>,
}

impl SvdResult {
    pub fn r_eff(&self) -> usize {
        self.s.len()
    }
}

fn to_dmatrix(m: &Matrix, transpose: bool) -> DMatrix<f64> {
    if transpose {
        DMatrix::from_fn(m.cols(), m.rows(), |i, j| f64::from(m.get(j, i)))
    } else {
        DMatrix::from_fn(m.rows(), m.cols(), |i, j| f64::from(m.get(i, j)))
    }
}

/// Top-`r_eff` SVD of `B·A` for `B: m×r`, `A: r×n`. Singular values at or
/// below `tol·σ₁` are truncated; a zero product yields `r_eff = 0`.
pub fn svd_rank_r(b: &Matrix, a: &Matrix, tol: f64) -> Result<SvdResult> {
    if b.cols() != a.rows() {
        return Err(Error::Shape(format!(
            "B is {}x{} but A is {}x{}",
            b.rows(),
            b.cols(),
            a.rows(),
            a.cols()
        )));
    }
    if !(tol >= 0.0) {
        return Err(Error::Usage(format!("tolerance must be nonnegative, got {tol}")));
    }
    if !b.is_finite() {
        return Err(Error::NumericInput("B".into()));
    }
    if !a.is_finite() {
        return Err(Error::NumericInput("A".into()));
    }
    let (m, n) = (b.rows(), a.cols());
    let empty = || SvdResult {
        u: DMatrix::zeros(m, 0),
        s: Vec::new(),
        v: DMatrix::zeros(n, 0),
    };
    if b.cols() == 0 || m == 0 || n == 0 {
        return Ok(empty());
    }

    let qr_b = to_dmatrix(b, false).qr();
    let qr_a = to_dmatrix(a, true).qr();
    let (q_b, r_b) = (qr_b.q(), qr_b.r());
    let (q_a, r_a) = (qr_a.q(), qr_a.r());
    let core = &r_b * r_a.transpose();

    let svd = core.svd(true, true);
    let u_c = svd.u.expect("requested U");
    let v_c = svd.v_t.expect("requested Vᵀ").transpose();

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sigma_max = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| {
            let s = svd.singular_values[i];
            s > 0.0 && s > tol * sigma_max
        })
        .collect();
    if keep.is_empty() {
        return Ok(empty());
    }

    let u_core = DMatrix::from_fn(u_c.nrows(), keep.len(), |i, j| u_c[(i, keep[j])]);
    let v_core = DMatrix::from_fn(v_c.nrows(), keep.len(), |i, j| v_c[(i, keep[j])]);
    Ok(SvdResult {
        u: q_b * u_core,
        s: keep.iter().map(|&i| svd.singular_values[i]).collect(),
        v: q_a * v_core,
    })
}

/// Rewrites `(B, A)` as `(B*, A*) = (U S, Vᵀ)`.
///
/// Each `A*` row is signed so that its largest-magnitude entry is positive
/// (the matching `B*` column flips with it). A zero product produces a
/// degenerate adapter with `r_eff = 0`.
pub fn align(adapter: &RawAdapter, cfg: &RoutingConfig) -> Result<AlignedAdapter> {
    let svd = svd_rank_r(&adapter.b, &adapter.a, cfg.svd_tolerance)
        .map_err(|e| match e {
            Error::NumericInput(what) => Error::NumericInput(format!("adapter `{}` {what}", adapter.id)),
            other => other,
        })?;
    let dims = adapter.dims();
    let r_eff = svd.r_eff();

    let mut a_star = Matrix::zeros(r_eff, dims.n);
    let mut b_star = Matrix::zeros(dims.m, r_eff);
    for j in 0..r_eff {
        let v = svd.v.column(j);
        let mut pivot = 0;
        for i in 1..v.len() {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dims.n {
            a_star.set(j, i, (sign * v[i]) as f32);
        }
        let scale = sign * svd.s[j];
        for i in 0..dims.m {
            b_star.set(i, j, (scale * svd.u[(i, j)]) as f32);
        }
    }

    Ok(AlignedAdapter {
        id: adapter.id.clone(),
        layer: adapter.layer.clone(),
        tag: adapter.tag,
        a_star,
        b_star,
        singular_values: svd.s.iter().map(|&s| s as f32).collect(),
    })
}

/// Aligns a batch of adapters into a library. Degenerate adapters end up in
/// the library's skip report.
pub fn align_library(
    tag: LibraryTag,
    adapters: &[RawAdapter],
    cfg: &RoutingConfig,
) -> Result<AdapterLibrary> {
    align_library_with(tag, adapters, cfg, Exec::default())
}

pub fn align_library_with(
    tag: LibraryTag,
    adapters: &[RawAdapter],
    cfg: &RoutingConfig,
    exec: Exec,
) -> Result<AdapterLibrary> {
    cfg.validate()?;
    let mut layer_n = std::collections::BTreeMap::new();
    for a in adapters {
        if a.tag != tag {
            return Err(Error::Usage(format!(
                "adapter `{}` is tagged {} in a {tag} library",
                a.id, a.tag
            )));
        }
        let n = a.dims().n;
        if let Some(&prev) = layer_n.get(&a.layer) {
            if prev != n {
                return Err(Error::Shape(format!(
                    "adapter `{}` on layer `{}` has input dimension {n}, expected {prev}",
                    a.id, a.layer
                )));
            }
        } else {
            layer_n.insert(a.layer.clone(), n);
        }
    }
    let aligned = exec.try_map(adapters, |a| align(a, cfg))?;
    AdapterLibrary::from_aligned(tag, aligned, Vec::new())
}

/// Max absolute deviation of `A* A*ᵀ` from the identity.
pub fn row_gram_deviation(a_star: &Matrix) -> f64 {
    let r = a_star.rows();
    let mut worst = 0.0f64;
    for i in 0..r {
        for j in i..r {
            let g = crate::types::dot(a_star.row(i), a_star.row(j));
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g - target).abs());
        }
    }
    worst
}

/// `‖B*A* − BA‖_F / ‖BA‖_F` (absolute error when `BA = 0`).
pub fn reconstruction_error(raw: &RawAdapter, aligned: &AlignedAdapter) -> Result<f64> {
    let reference = raw.b.matmul_f64(&raw.a)?;
    let rebuilt = if aligned.is_degenerate() {
        vec![0.0; reference.len()]
    } else {
        aligned.b_star.matmul_f64(&aligned.a_star)?
    };
    if rebuilt.len() != reference.len() {
        return Err(Error::Shape("aligned adapter shape differs from source".into()));
    }
    let diff: f64 = reference
        .iter()
        .zip(&rebuilt)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = reference.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(if norm > 0.0 { diff / norm } else { diff })
}
