//! Dense real vectors and client-stacked matrices.
//!
//! A [`StackedMat`] holds one row per client. The only non-trivial weight
//! matrices needed by the analysis are `s·I` and `a·I + b·P`, where
//! `P = I − (1/N)𝟙𝟙ᵀ` is the centering projection, so [`WeightSpec`] covers
//! exactly that two-parameter family. `P` is its own pseudoinverse, which lets
//! every weighted norm be evaluated in `O(N·n)` without forming an `N×N` matrix.

use std::fmt;
use std::ops::{Add, Deref, Mul, Sub};

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{FedError, Result};

/// Model parameter vector of fixed length `n ≥ 1`.
#[derive(Clone, PartialEq)]
pub struct ModelVec(Array1<f64>);

impl ModelVec {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        Self::from_array(Array1::from(entries))
    }

    pub fn from_array(entries: Array1<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(FedError::dim("model vector must have at least one entry"));
        }
        if let Some(bad) = entries.iter().find(|v| !v.is_finite()) {
            return Err(FedError::Input(format!("non-finite entry {bad}")));
        }
        Ok(ModelVec(entries))
    }

    /// Wraps arithmetic results produced inside the crate; finiteness of those
    /// is policed by the divergence guards instead.
    pub(crate) fn from_array_unchecked(entries: Array1<f64>) -> Self {
        ModelVec(entries)
    }

    pub fn zeros(n: usize) -> Self {
        ModelVec(Array1::zeros(n))
    }

    pub fn from_view(v: ArrayView1<'_, f64>) -> Self {
        ModelVec(v.to_owned())
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.0.dot(&self.0).sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        max_abs(self.0.iter())
    }

    pub fn distance(&self, other: &ModelVec) -> f64 {
        (&self.0 - &other.0).dot(&(&self.0 - &other.0)).sqrt()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.to_vec()
    }
}

impl Deref for ModelVec {
    type Target = Array1<f64>;

    fn deref(&self) -> &Array1<f64> {
        &self.0
    }
}

impl fmt::Debug for ModelVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("ModelVec").field(&self.0.to_vec()).finish()
    }
}

/// `N × n` matrix whose row `i` is client `i`'s vector.
#[derive(Clone, PartialEq)]
pub struct StackedMat(Array2<f64>);

impl StackedMat {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(FedError::dim(format!(
                "stacked matrix must be non-empty, got {}x{}",
                rows.nrows(),
                rows.ncols()
            )));
        }
        if let Some(bad) = rows.iter().find(|v| !v.is_finite()) {
            return Err(FedError::Input(format!("non-finite entry {bad}")));
        }
        Ok(StackedMat(rows))
    }

    pub fn from_rows(rows: &[ModelVec]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| FedError::dim("stacked matrix needs at least one row"))?;
        let n = first.len();
        let mut out = Array2::zeros((rows.len(), n));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(FedError::dim(format!(
                    "row {i} has length {}, expected {n}",
                    r.len()
                )));
            }
            out.row_mut(i).assign(r.as_array());
        }
        Self::new(out)
    }

    pub(crate) fn from_array_unchecked(rows: Array2<f64>) -> Self {
        StackedMat(rows)
    }

    pub fn zeros(num_rows: usize, num_cols: usize) -> Self {
        StackedMat(Array2::zeros((num_rows, num_cols)))
    }

    /// Every row equal to `v`.
    pub fn broadcast(v: &ModelVec, num_rows: usize) -> Self {
        let mut out = Array2::zeros((num_rows, v.len()));
        for mut row in out.rows_mut() {
            row.assign(v.as_array());
        }
        StackedMat(out)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn row_vec(&self, i: usize) -> ModelVec {
        ModelVec(self.0.row(i).to_owned())
    }

    /// Per-column mean over clients, summed in client order `0..N`.
    pub fn column_mean(&self) -> ModelVec {
        let mut acc = Array1::zeros(self.0.ncols());
        for row in self.0.rows() {
            acc += &row;
        }
        acc /= self.0.nrows() as f64;
        ModelVec(acc)
    }

    pub fn frob_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(self.0.iter())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &StackedMat) -> bool {
        self.0.dim() == other.0.dim()
    }

    /// Largest entrywise deviation, `‖self − other‖∞`.
    pub fn max_abs_diff(&self, other: &StackedMat) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl Deref for StackedMat {
    type Target = Array2<f64>;

    fn deref(&self) -> &Array2<f64> {
        &self.0
    }
}

impl fmt::Debug for StackedMat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StackedMat({:?})", self.0)
    }
}

impl Add for &StackedMat {
    type Output = StackedMat;

    fn add(self, rhs: &StackedMat) -> StackedMat {
        StackedMat(&self.0 + &rhs.0)
    }
}

impl Sub for &StackedMat {
    type Output = StackedMat;

    fn sub(self, rhs: &StackedMat) -> StackedMat {
        StackedMat(&self.0 - &rhs.0)
    }
}

impl Mul<&StackedMat> for f64 {
    type Output = StackedMat;

    fn mul(self, rhs: &StackedMat) -> StackedMat {
        StackedMat(&rhs.0 * self)
    }
}

fn max_abs<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    values.fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Weight matrix `Q` of a weighted Frobenius inner product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightSpec {
    /// `Q = s·I`.
    IdentityScaled { s: f64 },
    /// `Q = a·I + b·(I − (1/N)𝟙𝟙ᵀ)`. Eigenvalue `a` on span(𝟙), `a + b` on
    /// the centered subspace.
    Centering { a: f64, b: f64 },
}

impl WeightSpec {
    pub fn identity() -> Self {
        WeightSpec::IdentityScaled { s: 1.0 }
    }

    pub fn identity_scaled(s: f64) -> Result<Self> {
        if !(s.is_finite() && s > 0.0) {
            return Err(FedError::Input(format!(
                "identity scale must be > 0, got {s}"
            )));
        }
        Ok(WeightSpec::IdentityScaled { s })
    }

    pub fn centering(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || a < 0.0 || a + b < 0.0 {
            return Err(FedError::Input(format!(
                "centering weight needs a >= 0 and a + b >= 0, got a={a}, b={b}"
            )));
        }
        Ok(WeightSpec::Centering { a, b })
    }

    /// Eigenvalue of `Q` on the centered subspace (range of the projection).
    pub fn centered_eigenvalue(&self) -> f64 {
        match *self {
            WeightSpec::IdentityScaled { s } => s,
            WeightSpec::Centering { a, b } => a + b,
        }
    }
}

fn plain_inner(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `⟨A, B⟩_Q = tr(Aᵀ Q B)`.
pub fn frob_inner(a: &StackedMat, b: &StackedMat, q: WeightSpec) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(FedError::dim(format!(
            "inner product of {:?} and {:?} matrices",
            a.dim(),
            b.dim()
        )));
    }
    Ok(match q {
        WeightSpec::IdentityScaled { s } => s * plain_inner(a, b),
        WeightSpec::Centering { a: wa, b: wb } => {
            let pb = center_project(b);
            wa * plain_inner(a, b) + wb * plain_inner(a, &pb)
        }
    })
}

/// `‖A‖²_Q`. Rejects results below `−1e−12`, which only an invalid `Q` can produce.
pub fn weighted_norm_sq(a: &StackedMat, q: WeightSpec) -> Result<f64> {
    let v = frob_inner(a, a, q)?;
    if v < -1e-12 {
        return Err(FedError::Invariant(format!(
            "weighted squared norm is negative ({v:e}); weight {q:?} is not PSD here"
        )));
    }
    Ok(v.max(0.0))
}

/// `(I − (1/N)𝟙𝟙ᵀ) A`: subtracts the client mean from every row.
pub fn center_project(a: &StackedMat) -> StackedMat {
    let mean = a.column_mean();
    let mut out = a.0.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        row -= mean.as_array();
    }
    StackedMat(out)
}
