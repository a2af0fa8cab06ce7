//! Reproducing kernels of the landmark metric.
//!
//! Kernels are translation invariant, radial and scalar: `K(z, z') = φ(|z - z'|²) Id_d`.
//! Every derivative the dynamics need is expressed through the profile `φ` and its
//! first two derivatives with respect to the squared distance, so adding a kernel
//! only requires those three functions.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{check_len, Error, Result};
use crate::registry::Registry;

/// A radial scalar kernel `K(z, z') = φ(|z - z'|²) Id`.
pub trait Kernel: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// `φ(s)` at squared distance `s`.
    fn profile(&self, s: f64) -> f64;

    /// `φ'(s)`.
    fn profile_d1(&self, s: f64) -> f64;

    /// `φ''(s)`.
    fn profile_d2(&self, s: f64) -> f64;

    /// `(φ(s), φ'(s), φ''(s))` in one call.
    fn profile_derivatives(&self, s: f64) -> (f64, f64, f64) {
        (self.profile(s), self.profile_d1(s), self.profile_d2(s))
    }

    /// Distance beyond which the kernel is numerically negligible. Used to bound scans.
    fn length_scale(&self) -> f64;

    /// Admissibility constant `max(1, sup |∇K|)`, evaluated numerically.
    fn admissibility_constant(&self) -> f64 {
        let r_max = 10.0 * self.length_scale();
        let samples = 20_000;
        let sup_grad = (0..=samples)
            .map(|i| {
                let r = r_max * i as f64 / samples as f64;
                2.0 * r * self.profile_d1(r * r).abs()
            })
            .fold(0.0_f64, f64::max);
        sup_grad.max(1.0)
    }
}

/// Gaussian kernel `exp(-|z - z'|² / λ²) Id` with unit amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel {
    width: f64,
}

impl GaussianKernel {
    pub fn new(width: f64) -> Result<Self> {
        if !(width.is_finite() && width > 0.0) {
            return Err(Error::Domain(format!(
                "kernel width must be finite and positive, got {width}"
            )));
        }
        Ok(Self { width })
    }

    pub fn width(&self) -> f64 {
        self.width
    }
}

impl Kernel for GaussianKernel {
    fn name(&self) -> &'static str {
        "gaussian"
    }

    #[inline]
    fn profile(&self, s: f64) -> f64 {
        (-s / (self.width * self.width)).exp()
    }

    #[inline]
    fn profile_d1(&self, s: f64) -> f64 {
        let w2 = self.width * self.width;
        -(-s / w2).exp() / w2
    }

    #[inline]
    fn profile_d2(&self, s: f64) -> f64 {
        let w2 = self.width * self.width;
        (-s / w2).exp() / (w2 * w2)
    }

    #[inline]
    fn profile_derivatives(&self, s: f64) -> (f64, f64, f64) {
        let w2 = self.width * self.width;
        let e = (-s / w2).exp();
        (e, -e / w2, e / (w2 * w2))
    }

    fn length_scale(&self) -> f64 {
        self.width
    }
}

/// Settings used to build a kernel from the registry.
#[derive(Debug, Clone, Copy)]
pub struct KernelSettings {
    pub width: f64,
}

pub fn kernel_registry() -> Registry<KernelSettings, dyn Kernel> {
    let mut reg = Registry::new("kernel");
    reg.register("gaussian", |s: &KernelSettings| {
        Ok(Box::new(GaussianKernel::new(s.width)?) as Box<dyn Kernel>)
    });
    reg
}

/// Shared handle used by long-lived structures.
pub type SharedKernel = Arc<dyn Kernel>;

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite coordinate in {what}")))
    }
}

/// `K(z, z')` as a dense `d × d` matrix.
pub fn eval_kernel(z: &[f64], zp: &[f64], k: &dyn Kernel) -> Result<DMatrix<f64>> {
    check_len(z.len(), zp.len(), "kernel arguments")?;
    check_finite(z, "first kernel argument")?;
    check_finite(zp, "second kernel argument")?;
    let v = k.profile(sq_dist(z, zp));
    Ok(DMatrix::from_diagonal_element(z.len(), z.len(), v))
}

/// Gradient of the scalar profile with respect to the first argument.
///
/// The full derivative `∂K/∂z_a` is `g[a] · Id_d`; see [`grad1_kernel_array`].
pub fn grad1_kernel(z: &[f64], zp: &[f64], k: &dyn Kernel) -> Result<Vec<f64>> {
    check_len(z.len(), zp.len(), "kernel arguments")?;
    let c = 2.0 * k.profile_d1(sq_dist(z, zp));
    Ok(z.iter().zip(zp).map(|(a, b)| c * (a - b)).collect())
}

/// `∂K/∂z` as a `d × d × d` array: entry `[a][(r, c)]` is `∂K_{rc}/∂z_a`.
pub fn grad1_kernel_array(z: &[f64], zp: &[f64], k: &dyn Kernel) -> Result<Vec<DMatrix<f64>>> {
    let g = grad1_kernel(z, zp, k)?;
    let d = z.len();
    Ok(g.iter().map(|&ga| DMatrix::from_diagonal_element(d, d, ga)).collect())
}

/// Mixed second derivative `∂²k/∂z∂z'` of the scalar kernel, a `d × d` matrix.
pub fn hess12_kernel(z: &[f64], zp: &[f64], k: &dyn Kernel) -> Result<DMatrix<f64>> {
    check_len(z.len(), zp.len(), "kernel arguments")?;
    let d = z.len();
    let s = sq_dist(z, zp);
    let d1 = k.profile_d1(s);
    let d2 = k.profile_d2(s);
    Ok(DMatrix::from_fn(d, d, |r, c| {
        let diff = (z[r] - zp[r]) * (z[c] - zp[c]);
        let diag = if r == c { -2.0 * d1 } else { 0.0 };
        diag - 4.0 * d2 * diff
    }))
}

/// Block kernel matrix `(K(x_i, x_j))_{ij}` of a landmark configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    n: usize,
    dim: usize,
    dense: DMatrix<f64>,
}

impl KernelMatrix {
    pub fn landmarks(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Flattened `(n·d) × (n·d)` view.
    pub fn as_dense(&self) -> &DMatrix<f64> {
        &self.dense
    }

    pub fn into_dense(self) -> DMatrix<f64> {
        self.dense
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.dense
            .view((i * self.dim, j * self.dim), (self.dim, self.dim))
            .into_owned()
    }
}

/// Assembles the block kernel matrix of the configuration `x` (flat, length `n·d`).
pub fn kernel_matrix(x: &[f64], dim: usize, k: &dyn Kernel) -> Result<KernelMatrix> {
    if dim == 0 || x.is_empty() || !x.len().is_multiple_of(dim) {
        return Err(Error::Domain(format!(
            "configuration of length {} is not a non-empty multiple of d = {dim}",
            x.len()
        )));
    }
    check_finite(x, "configuration")?;
    let n = x.len() / dim;
    let nd = x.len();
    let mut dense = DMatrix::zeros(nd, nd);
    for i in 0..n {
        let xi = &x[i * dim..(i + 1) * dim];
        for j in i..n {
            let v = k.profile(sq_dist(xi, &x[j * dim..(j + 1) * dim]));
            for a in 0..dim {
                dense[(i * dim + a, j * dim + a)] = v;
                dense[(j * dim + a, i * dim + a)] = v;
            }
        }
    }
    Ok(KernelMatrix { n, dim, dense })
}
