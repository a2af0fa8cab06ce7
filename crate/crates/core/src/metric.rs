//! Running control cost `C(q, u) = σ/2 ⟨𝒦_q u, u⟩` for the supported control metrics.
//!
//! * `euclidean`: `𝒦 = Id`.
//! * `dualkernel`: `𝒦 = K_x`, the landmark kernel matrix (bending energy).
//! * `measure`: `𝒦 = (G(x) + jitter·Id)⁻¹` where
//!   `G(x) = n⁻² (∂²K_W/∂z∂z'(x_i, x_j))_ij` comes from representing the landmarks as an
//!   empirical measure in the dual of a second RKHS with kernel `K_W`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::dynamics::{dot, gradients_raw, PhaseState, RunningCost};
use crate::error::{check_len, Error, Result};
use crate::kernels::{hess12_kernel, kernel_matrix, GaussianKernel, Kernel, SharedKernel};
use crate::registry::Registry;

/// Linear operator `𝒦_q` of a control metric at one configuration.
pub enum MetricOperator {
    Identity(usize),
    Dense(DMatrix<f64>),
    /// `𝒦 = A⁻¹`, kept as the Cholesky factor of `A`.
    InverseOf(Cholesky<f64, Dyn>),
}

impl MetricOperator {
    pub fn dim(&self) -> usize {
        match self {
            MetricOperator::Identity(n) => *n,
            MetricOperator::Dense(m) => m.nrows(),
            MetricOperator::InverseOf(c) => c.l_dirty().nrows(),
        }
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        match self {
            MetricOperator::Identity(_) => u.to_vec(),
            MetricOperator::Dense(m) => (m * DVector::from_column_slice(u)).as_slice().to_vec(),
            MetricOperator::InverseOf(c) => c.solve(&DVector::from_column_slice(u)).as_slice().to_vec(),
        }
    }

    /// Dense symmetric matrix of the operator. For the inverse form this solves against
    /// the identity; meant for diagnostics.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            MetricOperator::Identity(n) => DMatrix::identity(*n, *n),
            MetricOperator::Dense(m) => m.clone(),
            MetricOperator::InverseOf(c) => {
                let n = self.dim();
                let inv = c.solve(&DMatrix::identity(n, n));
                // symmetrize rounding noise
                (&inv + inv.transpose()) * 0.5
            }
        }
    }
}

impl fmt::Debug for MetricOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricOperator::Identity(n) => write!(f, "Identity({n})"),
            MetricOperator::Dense(m) => write!(f, "Dense({}x{})", m.nrows(), m.ncols()),
            MetricOperator::InverseOf(c) => write!(f, "InverseOf({0}x{0})", c.l_dirty().nrows()),
        }
    }
}

/// A control metric `q ↦ 𝒦_q`, scaled by a positive weight `σ_u`.
pub trait ControlMetric: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn weight(&self) -> f64;

    /// `𝒦` at the configuration `x` (flat, `n·d`). `k` is the landmark kernel.
    fn operator(&self, x: &[f64], dim: usize, k: &dyn Kernel) -> Result<MetricOperator>;

    /// True when `𝒦` does not depend on the state.
    fn is_state_independent(&self) -> bool {
        false
    }

    fn cost(&self, x: &[f64], dim: usize, u: &[f64], k: &dyn Kernel) -> Result<f64> {
        let ku = self.operator(x, dim, k)?.apply(u);
        Ok(0.5 * self.weight() * dot(&ku, u))
    }

    fn grad_u(&self, x: &[f64], dim: usize, u: &[f64], k: &dyn Kernel) -> Result<Vec<f64>> {
        let s = self.weight();
        Ok(self.operator(x, dim, k)?.apply(u).into_iter().map(|v| s * v).collect())
    }

    /// Gradient of the cost in the positions `x`.
    fn grad_x(&self, x: &[f64], dim: usize, u: &[f64], k: &dyn Kernel) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy)]
pub struct Euclidean {
    pub weight: f64,
}

impl ControlMetric for Euclidean {
    fn name(&self) -> &'static str {
        "euclidean"
    }

    fn weight(&self) -> f64 {
        self.weight
    }

    fn operator(&self, x: &[f64], _dim: usize, _k: &dyn Kernel) -> Result<MetricOperator> {
        Ok(MetricOperator::Identity(x.len()))
    }

    fn is_state_independent(&self) -> bool {
        true
    }

    fn cost(&self, _x: &[f64], _dim: usize, u: &[f64], _k: &dyn Kernel) -> Result<f64> {
        Ok(0.5 * self.weight * dot(u, u))
    }

    fn grad_u(&self, _x: &[f64], _dim: usize, u: &[f64], _k: &dyn Kernel) -> Result<Vec<f64>> {
        Ok(u.iter().map(|v| self.weight * v).collect())
    }

    fn grad_x(&self, x: &[f64], _dim: usize, _u: &[f64], _k: &dyn Kernel) -> Result<Vec<f64>> {
        Ok(vec![0.0; x.len()])
    }
}

/// `𝒦 = K_x`: the cost equals `σ·H0(x, u)`, so its derivatives reuse the Hamiltonian ones.
#[derive(Debug, Clone, Copy)]
pub struct DualKernel {
    pub weight: f64,
}

impl ControlMetric for DualKernel {
    fn name(&self) -> &'static str {
        "dualkernel"
    }

    fn weight(&self) -> f64 {
        self.weight
    }

    fn operator(&self, x: &[f64], dim: usize, k: &dyn Kernel) -> Result<MetricOperator> {
        Ok(MetricOperator::Dense(kernel_matrix(x, dim, k)?.into_dense()))
    }

    fn grad_u(&self, x: &[f64], dim: usize, u: &[f64], k: &dyn Kernel) -> Result<Vec<f64>> {
        let mut gx = vec![0.0; x.len()];
        let mut gp = vec![0.0; x.len()];
        gradients_raw(x, u, dim, k, &mut gx, &mut gp);
        Ok(gp.into_iter().map(|v| self.weight * v).collect())
    }

    fn cost(&self, x: &[f64], dim: usize, u: &[f64], k: &dyn Kernel) -> Result<f64> {
        Ok(self.weight * crate::dynamics::h0_raw(x, u, dim, k))
    }

    fn grad_x(&self, x: &[f64], dim: usize, u: &[f64], k: &dyn Kernel) -> Result<Vec<f64>> {
        let mut gx = vec![0.0; x.len()];
        let mut gp = vec![0.0; x.len()];
        gradients_raw(x, u, dim, k, &mut gx, &mut gp);
        Ok(gx.into_iter().map(|v| self.weight * v).collect())
    }
}

/// Metric induced by the measure representation `x ↦ n⁻¹ Σ δ_{x_i}`.
#[derive(Debug, Clone)]
pub struct Measure {
    pub weight: f64,
    pub measure_kernel: SharedKernel,
    /// Relative Tikhonov coefficient: `jitter = coef · tr(G) / (n·d)`.
    pub jitter: f64,
}

impl Measure {
    pub fn gaussian(weight: f64, width: f64, jitter: f64) -> Result<Self> {
        if !(jitter.is_finite() && jitter > 0.0) {
            return Err(Error::Domain(format!("measure jitter must be positive, got {jitter}")));
        }
        Ok(Self {
            weight,
            measure_kernel: Arc::new(GaussianKernel::new(width)?),
            jitter,
        })
    }

    /// `G(x) = n⁻² (∂²K_W/∂z∂z'(x_i, x_j))_ij`, without regularization.
    pub fn gram(&self, x: &[f64], dim: usize) -> Result<DMatrix<f64>> {
        measure_gram(x, dim, self.measure_kernel.as_ref())
    }
}

/// Mixed-derivative Gram matrix `n⁻² (∂₁₂K_W(x_i, x_j))_ij` of the measure embedding.
pub fn measure_gram(x: &[f64], dim: usize, kw: &dyn Kernel) -> Result<DMatrix<f64>> {
    if dim == 0 || x.is_empty() || !x.len().is_multiple_of(dim) {
        return Err(Error::Domain("configuration length is not a multiple of d".into()));
    }
    let n = x.len() / dim;
    let scale = 1.0 / (n * n) as f64;
    let mut g = DMatrix::zeros(x.len(), x.len());
    for i in 0..n {
        for j in i..n {
            let block = hess12_kernel(&x[i * dim..(i + 1) * dim], &x[j * dim..(j + 1) * dim], kw)?;
            for a in 0..dim {
                for b in 0..dim {
                    let v = scale * block[(a, b)];
                    g[(i * dim + a, j * dim + b)] = v;
                    g[(j * dim + b, i * dim + a)] = v;
                }
            }
        }
    }
    Ok(g)
}

impl ControlMetric for Measure {
    fn name(&self) -> &'static str {
        "measure"
    }

    fn weight(&self) -> f64 {
        self.weight
    }

    fn operator(&self, x: &[f64], dim: usize, _k: &dyn Kernel) -> Result<MetricOperator> {
        let mut g = self.gram(x, dim)?;
        let nd = x.len();
        let jitter = self.jitter * g.trace() / nd as f64;
        for i in 0..nd {
            g[(i, i)] += jitter;
        }
        Cholesky::new(g)
            .map(MetricOperator::InverseOf)
            .ok_or_else(|| Error::MetricDegenerate("measure Gram matrix is not positive definite".into()))
    }

    fn grad_x(&self, x: &[f64], dim: usize, u: &[f64], k: &dyn Kernel) -> Result<Vec<f64>> {
        let mut probe = x.to_vec();
        let mut out = vec![0.0; x.len()];
        for c in 0..x.len() {
            let step = 1e-6 * (1.0 + x[c].abs());
            probe[c] = x[c] + step;
            let plus = self.cost(&probe, dim, u, k)?;
            probe[c] = x[c] - step;
            let minus = self.cost(&probe, dim, u, k)?;
            probe[c] = x[c];
            out[c] = (plus - minus) / (2.0 * step);
        }
        Ok(out)
    }
}

/// Parameters from which registry entries are built.
#[derive(Debug, Clone, Copy)]
pub struct MetricSettings {
    pub weight: f64,
    pub measure_width: f64,
    pub jitter: f64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            weight: 1.0,
            measure_width: 1.0,
            jitter: 1e-9,
        }
    }
}

fn check_weight(w: f64) -> Result<f64> {
    if w.is_finite() && w > 0.0 {
        Ok(w)
    } else {
        Err(Error::Domain(format!("control weight must be positive, got {w}")))
    }
}

pub fn metric_registry() -> Registry<MetricSettings, dyn ControlMetric> {
    let mut reg = Registry::new("control metric");
    reg.register("euclidean", |s: &MetricSettings| {
        Ok(Box::new(Euclidean {
            weight: check_weight(s.weight)?,
        }) as Box<dyn ControlMetric>)
    });
    reg.register("dualkernel", |s: &MetricSettings| {
        Ok(Box::new(DualKernel {
            weight: check_weight(s.weight)?,
        }) as Box<dyn ControlMetric>)
    });
    reg.register("measure", |s: &MetricSettings| {
        Ok(Box::new(Measure::gaussian(check_weight(s.weight)?, s.measure_width, s.jitter)?) as Box<dyn ControlMetric>)
    });
    reg
}

// ---------------------------------------------------------------------------
// State-level operations.

/// Dense symmetric matrix of `𝒦_q` at configuration `x`.
pub fn metric_matrix(x: &[f64], dim: usize, m: &dyn ControlMetric, k: &dyn Kernel) -> Result<DMatrix<f64>> {
    Ok(m.operator(x, dim, k)?.to_dense())
}

pub fn cost(q: &PhaseState, u: &[f64], m: &dyn ControlMetric, k: &dyn Kernel) -> Result<f64> {
    check_len(q.phase_len(), u.len(), "control length")?;
    m.cost(&q.x, q.dim, u, k)
}

pub fn cost_grad_u(q: &PhaseState, u: &[f64], m: &dyn ControlMetric, k: &dyn Kernel) -> Result<Vec<f64>> {
    check_len(q.phase_len(), u.len(), "control length")?;
    m.grad_u(&q.x, q.dim, u, k)
}

/// Gradient in `q = (x, p)`, length `2·n·d`; the momentum half is always zero.
pub fn cost_grad_q(q: &PhaseState, u: &[f64], m: &dyn ControlMetric, k: &dyn Kernel) -> Result<Vec<f64>> {
    check_len(q.phase_len(), u.len(), "control length")?;
    let mut g = m.grad_x(&q.x, q.dim, u, k)?;
    g.extend(std::iter::repeat_n(0.0, q.phase_len()));
    Ok(g)
}

/// Adapter exposing a control metric as a running cost of the controlled flow.
pub struct MetricCost<'a> {
    pub metric: &'a dyn ControlMetric,
    pub kernel: &'a dyn Kernel,
    pub dim: usize,
}

impl RunningCost for MetricCost<'_> {
    fn value(&self, x: &[f64], _p: &[f64], u: &[f64]) -> Result<f64> {
        self.metric.cost(x, self.dim, u, self.kernel)
    }

    fn gradient(&self, x: &[f64], _p: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let gx = if self.metric.is_state_independent() {
            vec![0.0; x.len()]
        } else {
            self.metric.grad_x(x, self.dim, u, self.kernel)?
        };
        let gu = self.metric.grad_u(x, self.dim, u, self.kernel)?;
        Ok((gx, vec![0.0; x.len()], gu))
    }
}
