//! Domain types shared by every stage of the router.
//!
//! Shape convention: for an adapter on a layer `W: m×n`, `A` is `r×n` (acts
//! on the input first) and `B` is `m×r`, so the update `BA` is `m×n`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f32` matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · x` with `f64` accumulation.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "vector of length {} against {}x{} matrix",
                x.len(),
                self.rows,
                self.cols
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `self · y` for an `f64` vector.
    pub fn matvec_f64(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.cols {
            return Err(Error::Shape(format!(
                "vector of length {} against {}x{} matrix",
                y.len(),
                self.rows,
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(y)
                    .map(|(&a, &b)| f64::from(a) * b)
                    .sum()
            })
            .collect())
    }

    /// Dense product in `f64`, returned row-major.
    pub fn matmul_f64(&self, other: &Matrix) -> Result<Vec<f64>> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0f64; self.rows * other.cols];
        for i in 0..self.rows {
            for t in 0..self.cols {
                let a = f64::from(self.get(i, t));
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(t);
                let dst = &mut out[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * f64::from(b);
                }
            }
        }
        Ok(out)
    }
}

/// Dot product of two `f32` slices accumulated in `f64`. Every product is
/// exact in `f64`, so results depend only on summation order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LibraryTag {
    Task,
    Knowledge,
}

impl LibraryTag {
    pub fn as_str(self) -> &'static str {
        match self {
            LibraryTag::Task => "task",
            LibraryTag::Knowledge => "knowledge",
        }
    }
}

impl fmt::Display for LibraryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LibraryTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task" => Ok(LibraryTag::Task),
            "knowledge" => Ok(LibraryTag::Knowledge),
            other => Err(Error::Usage(format!("unknown library tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(pub String);

impl LayerId {
    pub fn new(s: impl Into<String>) -> Self {
        LayerId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LayerId {
    fn from(s: &str) -> Self {
        LayerId(s.to_owned())
    }
}

/// Adapter dimensions: `m` outputs, `n` inputs, rank `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub m: usize,
    pub n: usize,
    pub r: usize,
}

impl Dims {
    pub fn new(m: usize, n: usize, r: usize) -> Result<Self> {
        if m == 0 || n == 0 || r == 0 {
            return Err(Error::Shape(format!("dimensions must be positive, got m={m} n={n} r={r}")));
        }
        if r > m.min(n) {
            return Err(Error::Shape(format!("rank {r} exceeds min(m, n) = {}", m.min(n))));
        }
        Ok(Dims { m, n, r })
    }

    /// Hidden size of a square layer.
    pub fn h(&self) -> Option<usize> {
        (self.m == self.n).then_some(self.n)
    }
}

/// A `(B, A)` pair as trained.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAdapter {
    pub id: String,
    pub layer: LayerId,
    pub tag: LibraryTag,
    /// `r×n`
    pub a: Matrix,
    /// `m×r`
    pub b: Matrix,
}

impl RawAdapter {
    pub fn new(
        id: impl Into<String>,
        layer: impl Into<LayerId>,
        tag: LibraryTag,
        b: Matrix,
        a: Matrix,
    ) -> Result<Self> {
        let id = id.into();
        if b.cols() != a.rows() {
            return Err(Error::Shape(format!(
                "adapter `{id}`: B is {}x{} but A is {}x{}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        Dims::new(b.rows(), a.cols(), a.rows())
            .map_err(|e| Error::Shape(format!("adapter `{id}`: {e}")))?;
        Ok(RawAdapter {
            id,
            layer: layer.into(),
            tag,
            a,
            b,
        })
    }

    pub fn dims(&self) -> Dims {
        Dims {
            m: self.b.rows(),
            n: self.a.cols(),
            r: self.a.rows(),
        }
    }
}

/// Spectrally aligned adapter: `B* = U S`, `A* = Vᵀ`.
///
/// Rows of `a_star` are orthonormal and sorted by descending singular value,
/// so row 0 is the arrow vector. A degenerate adapter (`r_eff == 0`) has
/// empty factors and no arrow.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedAdapter {
    pub id: String,
    pub layer: LayerId,
    pub tag: LibraryTag,
    /// `r_eff×n`, orthonormal rows
    pub a_star: Matrix,
    /// `m×r_eff`, column j has norm `singular_values[j]`
    pub b_star: Matrix,
    pub singular_values: Vec<f32>,
}

impl AlignedAdapter {
    pub fn r_eff(&self) -> usize {
        self.singular_values.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.r_eff() == 0
    }

    pub fn arrow(&self) -> Option<&[f32]> {
        (!self.is_degenerate()).then(|| self.a_star.row(0))
    }

    pub fn m(&self) -> usize {
        self.b_star.rows()
    }

    pub fn n(&self) -> usize {
        self.a_star.cols()
    }
}

/// An adapter left out of a library, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedAdapter {
    pub id: String,
    pub layer: LayerId,
    pub m: usize,
    pub n: usize,
    pub reason: String,
}

/// All routable adapters attached to one layer, plus the packed arrow
/// matrix whose row `i` is adapter `i`'s arrow.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLibrary {
    adapters: Vec<AlignedAdapter>,
    arrows: Matrix,
}

impl LayerLibrary {
    fn new(adapters: Vec<AlignedAdapter>) -> Result<Self> {
        let n = adapters.first().map_or(0, AlignedAdapter::n);
        let mut packed = Vec::with_capacity(adapters.len() * n);
        for a in &adapters {
            if a.n() != n {
                return Err(Error::Shape(format!(
                    "adapter `{}` on layer `{}` has input dimension {} but the layer has {n}",
                    a.id,
                    a.layer,
                    a.n()
                )));
            }
            let arrow = a
                .arrow()
                .ok_or_else(|| Error::Internal(format!("degenerate adapter `{}` in layer", a.id)))?;
            packed.extend_from_slice(arrow);
        }
        let arrows = Matrix::from_vec(adapters.len(), n, packed)?;
        Ok(LayerLibrary { adapters, arrows })
    }

    pub fn adapters(&self) -> &[AlignedAdapter] {
        &self.adapters
    }

    pub fn arrows(&self) -> &Matrix {
        &self.arrows
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Input dimension shared by every adapter on the layer.
    pub fn n(&self) -> usize {
        self.arrows.cols()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.adapters.iter().position(|a| a.id == id)
    }
}

/// A task or knowledge library, keyed by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLibrary {
    pub tag: LibraryTag,
    layers: BTreeMap<LayerId, LayerLibrary>,
    skipped: Vec<SkippedAdapter>,
}

impl AdapterLibrary {
    pub fn empty(tag: LibraryTag) -> Self {
        AdapterLibrary {
            tag,
            layers: BTreeMap::new(),
            skipped: Vec::new(),
        }
    }

    /// Builds a library from aligned adapters. Degenerate adapters are moved
    /// to the skip report; per-layer order follows input order.
    pub fn from_aligned(
        tag: LibraryTag,
        adapters: Vec<AlignedAdapter>,
        mut skipped: Vec<SkippedAdapter>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &skipped {
            if !seen.insert(s.id.clone()) {
                return Err(Error::Usage(format!("duplicate adapter id `{}`", s.id)));
            }
        }
        let mut per_layer: BTreeMap<LayerId, Vec<AlignedAdapter>> = BTreeMap::new();
        for a in adapters {
            if a.tag != tag {
                return Err(Error::Usage(format!(
                    "adapter `{}` is tagged {} but the library is {tag}",
                    a.id, a.tag
                )));
            }
            if !seen.insert(a.id.clone()) {
                return Err(Error::Usage(format!("duplicate adapter id `{}`", a.id)));
            }
            if a.is_degenerate() {
                skipped.push(SkippedAdapter {
                    id: a.id.clone(),
                    layer: a.layer.clone(),
                    m: a.m(),
                    n: a.n(),
                    reason: "zero effective rank".into(),
                });
                continue;
            }
            per_layer.entry(a.layer.clone()).or_default().push(a);
        }
        let layers = per_layer
            .into_iter()
            .map(|(id, list)| LayerLibrary::new(list).map(|l| (id, l)))
            .collect::<Result<_>>()?;
        Ok(AdapterLibrary {
            tag,
            layers,
            skipped,
        })
    }

    pub fn layer(&self, id: &LayerId) -> Option<&LayerLibrary> {
        self.layers.get(id).filter(|l| !l.is_empty())
    }

    pub fn layers(&self) -> impl Iterator<Item = (&LayerId, &LayerLibrary)> {
        self.layers.iter()
    }

    pub fn skipped(&self) -> &[SkippedAdapter] {
        &self.skipped
    }

    /// Number of routable adapters across all layers.
    pub fn len(&self) -> usize {
        self.layers.values().map(LayerLibrary::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn adapters(&self) -> impl Iterator<Item = &AlignedAdapter> {
        self.layers.values().flat_map(|l| l.adapters().iter())
    }
}

/// Input representation of one position to one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenVector(Vec<f32>);

impl TokenVector {
    pub fn new(x: Vec<f32>) -> Result<Self> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericInput("token vector".into()));
        }
        Ok(TokenVector(x))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    /// Exact ties go to the lowest library index.
    #[default]
    LowestIndex,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingConfig {
    /// Width of the arrow filter.
    pub k: usize,
    pub tie_break: TieBreak,
    /// Singular values at or below `svd_tolerance · σ₁` are dropped.
    pub svd_tolerance: f64,
}

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_SVD_TOLERANCE: f64 = 1e-7;

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            k: DEFAULT_K,
            tie_break: TieBreak::LowestIndex,
            svd_tolerance: DEFAULT_SVD_TOLERANCE,
        }
    }
}

impl RoutingConfig {
    pub fn with_k(k: usize) -> Result<Self> {
        let cfg = RoutingConfig {
            k,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Usage("k must be at least 1".into()));
        }
        if !(self.svd_tolerance >= 0.0) {
            return Err(Error::Usage("svd tolerance must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Which libraries target a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Targets {
    pub task: bool,
    pub knowledge: bool,
}

impl Targets {
    pub fn covers(&self, tag: LibraryTag) -> bool {
        match tag {
            LibraryTag::Task => self.task,
            LibraryTag::Knowledge => self.knowledge,
        }
    }
}

/// A frozen linear layer `W: m×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: LayerId,
    pub weight: Matrix,
    pub targets: Targets,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aligned(id: &str, layer: &str, n: usize, sv: Vec<f32>) -> AlignedAdapter {
        let r = sv.len();
        AlignedAdapter {
            id: id.into(),
            layer: layer.into(),
            tag: LibraryTag::Task,
            a_star: Matrix::from_fn(r, n, |i, j| if i == j { 1.0 } else { 0.0 }),
            b_star: Matrix::from_fn(n, r, |i, j| if i == j { sv[j] } else { 0.0 }),
            singular_values: sv,
        }
    }

    #[test]
    fn dims_reject_rank_above_min_dim() {
        assert!(Dims::new(4, 3, 4).is_err());
        assert!(Dims::new(4, 3, 0).is_err());
        let d = Dims::new(8, 8, 2).unwrap();
        assert_eq!(d.h(), Some(8));
        assert_eq!(Dims::new(8, 4, 2).unwrap().h(), None);
    }

    #[test]
    fn raw_adapter_checks_inner_dimension() {
        let b = Matrix::zeros(4, 2);
        let a = Matrix::zeros(3, 4);
        assert!(matches!(
            RawAdapter::new("x", "l0", LibraryTag::Task, b, a),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn library_packs_arrows_and_skips_degenerate() {
        let lib = AdapterLibrary::from_aligned(
            LibraryTag::Task,
            vec![
                aligned("a", "l0", 4, vec![2.0, 1.0]),
                aligned("z", "l0", 4, vec![]),
                aligned("b", "l0", 4, vec![3.0]),
            ],
            vec![],
        )
        .unwrap();
        let layer = lib.layer(&"l0".into()).unwrap();
        assert_eq!(layer.len(), 2);
        assert_eq!(layer.arrows().row(1), layer.adapters()[1].arrow().unwrap());
        assert_eq!(lib.skipped().len(), 1);
        assert_eq!(lib.skipped()[0].id, "z");
    }

    #[test]
    fn library_rejects_mixed_n_and_duplicate_ids() {
        let err = AdapterLibrary::from_aligned(
            LibraryTag::Task,
            vec![aligned("a", "l0", 4, vec![1.0]), aligned("b", "l0", 5, vec![1.0])],
            vec![],
        );
        assert!(matches!(err, Err(Error::Shape(_))));
        let err = AdapterLibrary::from_aligned(
            LibraryTag::Task,
            vec![aligned("a", "l0", 4, vec![1.0]), aligned("a", "l1", 4, vec![1.0])],
            vec![],
        );
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn token_vector_rejects_nan() {
        assert!(TokenVector::new(vec![1.0, f32::NAN]).is_err());
        assert!(RoutingConfig::with_k(0).is_err());
    }
}
