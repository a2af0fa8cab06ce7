//! Stochastic landmark evolutions.
//!
//! * Second-order model: white noise on the momentum equation, integrated with
//!   Euler–Maruyama, optionally with a deterministic control.
//! * First-order Kunita-type flow: positions driven by kernel-correlated Brownian increments.
//!
//! Gaussian draws come from `ChaCha8Rng::seed_from_u64(seed)` through the ziggurat sampler
//! of `rand_distr::StandardNormal`. Monte Carlo run `i` uses seed `seed + i`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dynamics::{dot, gradients_raw, h0_raw, ControlPath, PhaseState, TimeGrid, Trajectory};
use crate::error::{check_len, Error, Result};
use crate::kernels::{kernel_matrix, Kernel};

/// Diagonal regularization added before factorizing the kernel matrix of a Kunita step.
pub const KUNITA_JITTER: f64 = 1e-10;

/// State-dependent noise amplitude `ε(p, x)`, a bounded Lipschitz matrix field.
pub trait NoiseField: Send + Sync + fmt::Debug {
    /// Bound on the entries of `ε`.
    fn bound(&self) -> f64;

    /// `ε(p, x) ξ`.
    fn apply(&self, x: &[f64], p: &[f64], xi: &[f64]) -> Vec<f64>;
}

/// `ε(p) = ε₀ / (1 + |p|²/s²) · Id`: noise that softens at high momentum.
#[derive(Debug, Clone, Copy)]
pub struct MomentumDamped {
    pub eps: f64,
    pub scale: f64,
}

impl NoiseField for MomentumDamped {
    fn bound(&self) -> f64 {
        self.eps
    }

    fn apply(&self, _x: &[f64], p: &[f64], xi: &[f64]) -> Vec<f64> {
        let a = self.eps / (1.0 + dot(p, p) / (self.scale * self.scale));
        xi.iter().map(|v| a * v).collect()
    }
}

#[derive(Debug, Clone)]
pub enum NoiseKind {
    Constant(f64),
    StateDependent(Arc<dyn NoiseField>),
}

#[derive(Debug, Clone)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn constant(eps: f64, seed: u64) -> Result<Self> {
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::Domain(format!(
                "noise level must be finite and non-negative, got {eps}"
            )));
        }
        Ok(Self {
            kind: NoiseKind::Constant(eps),
            seed,
        })
    }

    /// Constant noise given as the landmark-rescaled level `√n·ε`.
    pub fn rescaled(sqrt_n_eps: f64, landmarks: usize, seed: u64) -> Result<Self> {
        Self::constant(sqrt_n_eps / (landmarks as f64).sqrt(), seed)
    }

    pub fn state_dependent(field: Arc<dyn NoiseField>, seed: u64) -> Result<Self> {
        let b = field.bound();
        if !(b.is_finite() && b >= 0.0) {
            return Err(Error::Domain(format!("noise bound must be finite, got {b}")));
        }
        Ok(Self {
            kind: NoiseKind::StateDependent(field),
            seed,
        })
    }

    /// `|ε|_∞`.
    pub fn bound(&self) -> f64 {
        match &self.kind {
            NoiseKind::Constant(e) => *e,
            NoiseKind::StateDependent(f) => f.bound(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            kind: self.kind.clone(),
            seed,
        }
    }

    fn increment(&self, x: &[f64], p: &[f64], xi: &[f64]) -> Vec<f64> {
        match &self.kind {
            NoiseKind::Constant(e) => xi.iter().map(|v| e * v).collect(),
            NoiseKind::StateDependent(f) => f.apply(x, p, xi),
        }
    }
}

fn gaussians(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

/// Euler–Maruyama for `dx = ∂H0/∂p dt`, `dp = (−∂H0/∂x + u) dt + ε dB`.
pub fn simulate_sde(
    q0: &PhaseState,
    grid: TimeGrid,
    noise: &NoiseSpec,
    k: &dyn Kernel,
    u: Option<&ControlPath>,
) -> Result<Trajectory> {
    let len = q0.phase_len();
    if let Some(u) = u {
        check_len(grid.steps(), u.grid.steps(), "control grid steps")?;
        check_len(len, u.sample_len(), "control sample length")?;
    }
    let dt = grid.dt();
    let sq = dt.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut xi = vec![0.0; len];
    let mut gx = vec![0.0; len];
    let mut gp = vec![0.0; len];
    let mut states = Vec::with_capacity(grid.steps() + 1);
    let mut cur = q0.clone();
    for j in 0..grid.steps() {
        gradients_raw(&cur.x, &cur.p, cur.dim, k, &mut gx, &mut gp);
        gaussians(&mut rng, &mut xi);
        let dw = noise.increment(&cur.x, &cur.p, &xi);
        let mut next = cur.clone();
        for c in 0..len {
            let uc = u.map_or(0.0, |u| u.samples[j][c]);
            next.x[c] += gp[c] * dt;
            next.p[c] += (-gx[c] + uc) * dt + dw[c] * sq;
        }
        states.push(cur);
        if !next.is_finite() {
            return Err(Error::Diverged {
                node: j + 1,
                time: grid.node(j + 1),
            });
        }
        cur = next;
    }
    states.push(cur);
    Ok(Trajectory { grid, states })
}

/// First-order flow `x_{j+1} = x_j + σ √dt L_j ξ_j` with `L_j Lᵀ_j = K_{x_j} + jitter`.
/// Returns the configuration at every node.
pub fn simulate_kunita(
    x0: &[f64],
    dim: usize,
    grid: TimeGrid,
    sigma: f64,
    seed: u64,
    k: &dyn Kernel,
) -> Result<Vec<Vec<f64>>> {
    if dim == 0 || x0.is_empty() || !x0.len().is_multiple_of(dim) {
        return Err(Error::Domain("configuration length is not a multiple of d".into()));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Domain(format!("noise level must be non-negative, got {sigma}")));
    }
    let scale = sigma * grid.dt().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xi = vec![0.0; x0.len()];
    let mut out = Vec::with_capacity(grid.steps() + 1);
    let mut x = x0.to_vec();
    for j in 0..grid.steps() {
        let mut kx = kernel_matrix(&x, dim, k)?.into_dense();
        for i in 0..x.len() {
            kx[(i, i)] += KUNITA_JITTER;
        }
        let l = Cholesky::new(kx)
            .ok_or_else(|| Error::DegenerateConfiguration(format!("kernel matrix not positive definite at node {j}")))?
            .unpack();
        gaussians(&mut rng, &mut xi);
        let inc = l * DVector::from_column_slice(&xi);
        let next: Vec<f64> = x.iter().zip(inc.iter()).map(|(a, b)| a + scale * b).collect();
        out.push(x);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                node: j + 1,
                time: grid.node(j + 1),
            });
        }
        x = next;
    }
    out.push(x);
    Ok(out)
}

/// Gaussian momentum rescaled so that `H0(x, p) = energy`; zero when `energy` is 0.
pub fn random_momentum(x: &[f64], dim: usize, k: &dyn Kernel, energy: f64, seed: u64) -> Result<Vec<f64>> {
    if !(energy.is_finite() && energy >= 0.0) {
        return Err(Error::Domain(format!(
            "target energy must be finite and non-negative, got {energy}"
        )));
    }
    let mut p = vec![0.0; x.len()];
    if energy == 0.0 {
        return Ok(p);
    }
    gaussians(&mut ChaCha8Rng::seed_from_u64(seed), &mut p);
    let h = h0_raw(x, &p, dim, k);
    if !(h > 0.0) {
        return Err(Error::DegenerateConfiguration(
            "kernel matrix is not positive definite".into(),
        ));
    }
    let scale = (energy / h).sqrt();
    p.iter_mut().for_each(|v| *v *= scale);
    Ok(p)
}

/// Sum by recursive halving, for order-independent rounding behaviour.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        v.iter().sum()
    } else {
        let (a, b) = v.split_at(v.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// Ordinary least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = pairwise_sum(x) / n;
    let my = pairwise_sum(y) / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub mean_h0: Vec<f64>,
    pub var_h0: Vec<f64>,
    pub runs: usize,
    pub divergences: usize,
    /// Least-squares slope of `mean_h0` against `t`.
    pub slope: f64,
}

impl EnsembleStats {
    /// Standard error of the mean at every node.
    pub fn standard_error(&self) -> Vec<f64> {
        let n = (self.runs - self.divergences) as f64;
        self.var_h0.iter().map(|v| (v / n).sqrt()).collect()
    }

    /// CSV with columns `t,mean_H0,var_H0`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "mean_H0", "var_H0"])?;
        for ((t, m), v) in self.times.iter().zip(&self.mean_h0).zip(&self.var_h0) {
            w.write_record([format!("{t}"), format!("{m:e}"), format!("{v:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `runs` independent simulations with seeds `seed, seed + 1, …`; statistics of `H0`
/// over the runs that did not diverge.
pub fn monte_carlo_hamiltonian(
    q0: &PhaseState,
    grid: TimeGrid,
    noise: &NoiseSpec,
    k: &dyn Kernel,
    runs: usize,
) -> Result<EnsembleStats> {
    if runs < 2 {
        return Err(Error::Config(format!("Monte Carlo needs at least 2 runs, got {runs}")));
    }
    let series: Vec<Option<Vec<f64>>> = (0..runs)
        .into_par_iter()
        .map(|i| {
            let spec = noise.with_seed(noise.seed.wrapping_add(i as u64));
            match simulate_sde(q0, grid, &spec, k, None) {
                Ok(traj) => Ok(Some(traj.states.iter().map(|s| h0_raw(&s.x, &s.p, s.dim, k)).collect())),
                Err(Error::Diverged { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let ok: Vec<&Vec<f64>> = series.iter().flatten().collect();
    let divergences = runs - ok.len();
    if ok.len() < 2 {
        return Err(Error::Diverged { node: 0, time: 0.0 });
    }
    let n = ok.len() as f64;
    let nodes = grid.steps() + 1;
    let mut mean_h0 = Vec::with_capacity(nodes);
    let mut var_h0 = Vec::with_capacity(nodes);
    let mut column = vec![0.0; ok.len()];
    for j in 0..nodes {
        for (c, s) in column.iter_mut().zip(&ok) {
            *c = s[j];
        }
        let m = pairwise_sum(&column) / n;
        for c in column.iter_mut() {
            *c = (*c - m).powi(2);
        }
        mean_h0.push(m);
        var_h0.push(pairwise_sum(&column) / (n - 1.0));
    }
    let times: Vec<f64> = grid.nodes().collect();
    let (slope, _) = linear_fit(&times, &mean_h0);
    Ok(EnsembleStats {
        times,
        mean_h0,
        var_h0,
        runs,
        divergences,
        slope,
    })
}

/// Mean over paths and landmarks of `|x_i(t) − x_i(0)|²` at every node.
pub fn mean_squared_displacement(paths: &[Vec<Vec<f64>>], dim: usize) -> Vec<f64> {
    let nodes = paths[0].len();
    let landmarks = (paths[0][0].len() / dim) as f64;
    (0..nodes)
        .map(|j| {
            let per: Vec<f64> = paths
                .iter()
                .map(|p| p[j].iter().zip(&p[0]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / landmarks)
                .collect();
            pairwise_sum(&per) / paths.len() as f64
        })
        .collect()
}
