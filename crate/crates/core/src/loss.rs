//! Client loss functions and the federated objective `f(x) = (1/N) Σ f_i(x)`.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1};

use crate::error::{FedError, Result};
use crate::linalg::{ModelVec, StackedMat};

/// Smoothness `L` and strong-convexity `μ` with `0 < μ ≤ L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConstants {
    smoothness: f64,
    strong_convexity: f64,
}

impl LossConstants {
    pub fn new(smoothness: f64, strong_convexity: f64) -> Result<Self> {
        let ok = smoothness.is_finite()
            && strong_convexity.is_finite()
            && strong_convexity > 0.0
            && strong_convexity <= smoothness;
        if !ok {
            return Err(FedError::config(format!(
                "need 0 < mu <= L, got L={smoothness}, mu={strong_convexity}"
            )));
        }
        Ok(LossConstants {
            smoothness,
            strong_convexity,
        })
    }

    /// `L`.
    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    /// `μ`.
    pub fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }
}

/// A client's local objective `f_i`: `L`-smooth and `μ`-strongly convex.
pub trait ClientLoss: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn value(&self, x: ArrayView1<'_, f64>) -> f64;

    /// Writes `∇f_i(x)` into `out`.
    fn gradient_into(&self, x: ArrayView1<'_, f64>, out: ArrayViewMut1<'_, f64>);

    fn constants(&self) -> LossConstants;

    fn as_quadratic_risk(&self) -> Option<&QuadraticRisk> {
        None
    }
}

/// Regularized least squares with identity measurement matrix:
/// `f_i(x) = (1/n_i) Σ_j ‖x − b_ij‖² + ‖x‖²`.
///
/// The Hessian is `4I`, so `L = μ = 4`, and `∇f_i(x) = 4x − 2·b̄_i`.
#[derive(Debug, Clone)]
pub struct QuadraticRisk {
    samples: Array2<f64>,
    sample_mean: Array1<f64>,
}

impl QuadraticRisk {
    /// `samples` holds one target `b_ij` per row.
    pub fn new(samples: Array2<f64>) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(FedError::dim(
                "quadratic risk needs at least one sample of dimension >= 1",
            ));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(FedError::Input("non-finite sample".into()));
        }
        let mut sample_mean = Array1::zeros(samples.ncols());
        for row in samples.rows() {
            sample_mean += &row;
        }
        sample_mean /= samples.nrows() as f64;
        Ok(QuadraticRisk {
            samples,
            sample_mean,
        })
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    /// `b̄_i`.
    pub fn sample_mean(&self) -> &Array1<f64> {
        &self.sample_mean
    }
}

impl ClientLoss for QuadraticRisk {
    fn dim(&self) -> usize {
        self.samples.ncols()
    }

    fn value(&self, x: ArrayView1<'_, f64>) -> f64 {
        let fit: f64 = self
            .samples
            .rows()
            .into_iter()
            .map(|b| {
                b.iter()
                    .zip(x.iter())
                    .map(|(bj, xj)| (xj - bj).powi(2))
                    .sum::<f64>()
            })
            .sum();
        fit / self.samples.nrows() as f64 + x.dot(&x)
    }

    fn gradient_into(&self, x: ArrayView1<'_, f64>, mut out: ArrayViewMut1<'_, f64>) {
        for ((o, xj), bj) in out.iter_mut().zip(x.iter()).zip(self.sample_mean.iter()) {
            *o = 4.0 * xj - 2.0 * bj;
        }
    }

    fn constants(&self) -> LossConstants {
        LossConstants {
            smoothness: 4.0,
            strong_convexity: 4.0,
        }
    }

    fn as_quadratic_risk(&self) -> Option<&QuadraticRisk> {
        Some(self)
    }
}

/// Separable quadratic `f_i(x) = ½ Σ_k h_k (x_k − m_k)²` with per-coordinate
/// curvature `h_k > 0`. Clients with different curvature have different
/// Hessians, which is what makes local-update methods drift.
#[derive(Debug, Clone)]
pub struct DiagonalQuadratic {
    curvature: Array1<f64>,
    center: Array1<f64>,
    constants: LossConstants,
}

impl DiagonalQuadratic {
    pub fn new(curvature: Vec<f64>, center: Vec<f64>) -> Result<Self> {
        let lo = curvature.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = curvature.iter().cloned().fold(0.0, f64::max);
        Self::with_constants(curvature, center, LossConstants::new(hi, lo)?)
    }

    /// Uses declared constants, which must bound the actual curvature.
    pub fn with_constants(
        curvature: Vec<f64>,
        center: Vec<f64>,
        declared: LossConstants,
    ) -> Result<Self> {
        if curvature.is_empty() || curvature.len() != center.len() {
            return Err(FedError::dim(format!(
                "curvature has {} entries, center {}",
                curvature.len(),
                center.len()
            )));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(FedError::Input("non-finite center".into()));
        }
        let fits = curvature.iter().all(|&h| {
            h.is_finite() && h >= declared.strong_convexity() && h <= declared.smoothness()
        });
        if !fits {
            return Err(FedError::config(format!(
                "curvature {curvature:?} outside declared [mu, L] = [{}, {}]",
                declared.strong_convexity(),
                declared.smoothness()
            )));
        }
        Ok(DiagonalQuadratic {
            curvature: Array1::from(curvature),
            center: Array1::from(center),
            constants: declared,
        })
    }

    pub fn curvature(&self) -> &Array1<f64> {
        &self.curvature
    }

    pub fn center(&self) -> &Array1<f64> {
        &self.center
    }
}

impl ClientLoss for DiagonalQuadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: ArrayView1<'_, f64>) -> f64 {
        0.5 * x
            .iter()
            .zip(self.center.iter())
            .zip(self.curvature.iter())
            .map(|((xk, mk), hk)| hk * (xk - mk).powi(2))
            .sum::<f64>()
    }

    fn gradient_into(&self, x: ArrayView1<'_, f64>, mut out: ArrayViewMut1<'_, f64>) {
        for (((o, xk), mk), hk) in out
            .iter_mut()
            .zip(x.iter())
            .zip(self.center.iter())
            .zip(self.curvature.iter())
        {
            *o = hk * (xk - mk);
        }
    }

    fn constants(&self) -> LossConstants {
        self.constants
    }
}

/// `∇f_i(x)` with input validation.
pub fn gradient(loss: &dyn ClientLoss, x: &ModelVec) -> Result<ModelVec> {
    if x.len() != loss.dim() {
        return Err(FedError::dim(format!(
            "x has length {}, loss expects {}",
            x.len(),
            loss.dim()
        )));
    }
    if !x.is_finite() {
        return Err(FedError::Input(
            "gradient requested at a non-finite point".into(),
        ));
    }
    let mut out = Array1::zeros(x.len());
    loss.gradient_into(x.view(), out.view_mut());
    Ok(ModelVec::from_array_unchecked(out))
}

/// Central-difference approximation of `∇f_i(x)`.
pub fn fd_gradient(loss: &dyn ClientLoss, x: &ModelVec, step: f64) -> ModelVec {
    let mut probe = x.as_array().clone();
    let mut out = Array1::zeros(x.len());
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + step;
        let up = loss.value(probe.view());
        probe[k] = orig - step;
        let down = loss.value(probe.view());
        probe[k] = orig;
        out[k] = (up - down) / (2.0 * step);
    }
    ModelVec::from_array_unchecked(out)
}

/// Relative error `‖∇f − ∇̃f‖ / max(1, ‖∇f‖)` of the analytic gradient against
/// central differences with step `1e−5`.
pub fn fd_relative_error(loss: &dyn ClientLoss, x: &ModelVec) -> Result<f64> {
    let exact = gradient(loss, x)?;
    let approx = fd_gradient(loss, x, 1e-5);
    Ok(exact.distance(&approx) / exact.norm().max(1.0))
}

/// `N` client losses over a shared model dimension.
#[derive(Debug, Clone)]
pub struct FederatedProblem {
    losses: Vec<Arc<dyn ClientLoss>>,
    dim: usize,
}

impl FederatedProblem {
    pub fn new(losses: Vec<Arc<dyn ClientLoss>>) -> Result<Self> {
        let dim = losses
            .first()
            .ok_or_else(|| FedError::dim("a federated problem needs at least one client"))?
            .dim();
        if let Some((i, l)) = losses.iter().enumerate().find(|(_, l)| l.dim() != dim) {
            return Err(FedError::dim(format!(
                "client {i} has dimension {}, expected {dim}",
                l.dim()
            )));
        }
        Ok(FederatedProblem { losses, dim })
    }

    pub fn from_quadratic_risks(risks: Vec<QuadraticRisk>) -> Result<Self> {
        Self::new(
            risks
                .into_iter()
                .map(|r| Arc::new(r) as Arc<dyn ClientLoss>)
                .collect(),
        )
    }

    pub fn num_clients(&self) -> usize {
        self.losses.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn loss(&self, i: usize) -> &dyn ClientLoss {
        self.losses[i].as_ref()
    }

    pub fn losses(&self) -> impl Iterator<Item = &dyn ClientLoss> {
        self.losses.iter().map(|l| l.as_ref())
    }

    /// Largest client `L` and smallest client `μ`.
    pub fn constants(&self) -> LossConstants {
        let (l, mu) = self
            .losses
            .iter()
            .fold((0.0_f64, f64::INFINITY), |(l, mu), loss| {
                let c = loss.constants();
                (l.max(c.smoothness()), mu.min(c.strong_convexity()))
            });
        LossConstants {
            smoothness: l,
            strong_convexity: mu,
        }
    }

    pub fn value(&self, x: &ModelVec) -> f64 {
        self.losses.iter().map(|l| l.value(x.view())).sum::<f64>() / self.num_clients() as f64
    }

    /// `∇f(x) = (1/N) Σ ∇f_i(x)`, summed in client order.
    pub fn global_gradient(&self, x: &ModelVec) -> ModelVec {
        let mut acc = Array1::zeros(self.dim);
        let mut g = Array1::zeros(self.dim);
        for loss in &self.losses {
            loss.gradient_into(x.view(), g.view_mut());
            acc += &g;
        }
        acc /= self.num_clients() as f64;
        ModelVec::from_array_unchecked(acc)
    }

    /// Row `i` of the result is `∇f_i` at row `i` of `x`.
    pub fn stacked_gradient(&self, x: &StackedMat) -> Result<StackedMat> {
        if x.nrows() != self.num_clients() || x.ncols() != self.dim {
            return Err(FedError::dim(format!(
                "stacked iterate is {}x{}, problem is {}x{}",
                x.nrows(),
                x.ncols(),
                self.num_clients(),
                self.dim
            )));
        }
        Ok(StackedMat::from_array_unchecked(
            self.stacked_gradient_raw(x.as_array()),
        ))
    }

    pub(crate) fn stacked_gradient_raw(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.dim());
        for (i, loss) in self.losses.iter().enumerate() {
            loss.gradient_into(x.row(i), out.row_mut(i));
        }
        out
    }

    /// `x* = (1/(2N)) Σ b̄_i`, the stationary point of the quadratic-risk objective.
    pub fn closed_form_optimum(&self) -> Result<ModelVec> {
        let mut acc = Array1::zeros(self.dim);
        for (i, loss) in self.losses.iter().enumerate() {
            let q = loss.as_quadratic_risk().ok_or_else(|| {
                FedError::Unsupported(format!(
                    "client {i} is not a quadratic risk; no closed form"
                ))
            })?;
            acc += q.sample_mean();
        }
        acc /= 2.0 * self.num_clients() as f64;
        Ok(ModelVec::from_array_unchecked(acc))
    }

    /// Gradient descent with step `1/L` on the global objective until
    /// `‖∇f(x)‖ ≤ tol·(1 + ‖x‖)` or `max_iters` is reached.
    pub fn numerical_optimum(&self, max_iters: usize, tol: f64) -> ModelVec {
        let step = 1.0 / self.constants().smoothness();
        let mut x = ModelVec::zeros(self.dim);
        for _ in 0..max_iters {
            let g = self.global_gradient(&x);
            if g.norm() <= tol * (1.0 + x.norm()) {
                break;
            }
            x = ModelVec::from_array_unchecked(x.as_array() - &(g.as_array() * step));
        }
        x
    }

    /// Closed form when every client is a quadratic risk, otherwise a long
    /// gradient-descent solve.
    pub fn optimum(&self) -> ModelVec {
        match self.closed_form_optimum() {
            Ok(x) => x,
            Err(_) => self.numerical_optimum(1_000_000, 1e-15),
        }
    }
}
