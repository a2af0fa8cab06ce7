//! Reduced Hamiltonian landmark dynamics.
//!
//! The phase state is `q = (x, p)` with `H0(x, p) = ½ Σ_ij p_iᵀ K(x_i, x_j) p_j`.
//! Controlled evolutions follow `ẋ = ∂H0/∂p`, `ṗ = -∂H0/∂x + u` and are integrated with
//! fixed-step classical RK4, the control being linear between grid nodes.

use std::collections::BTreeMap;

use crate::error::{check_len, Error, Result};
use crate::kernels::{sq_dist, Kernel};

/// Position/momentum pair, both flat vectors of length `n·d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub dim: usize,
    pub x: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhaseState {
    pub fn new(dim: usize, x: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if dim == 0 || x.is_empty() || !x.len().is_multiple_of(dim) {
            return Err(Error::Domain(format!(
                "position vector of length {} is not a non-empty multiple of d = {dim}",
                x.len()
            )));
        }
        check_len(x.len(), p.len(), "momentum length")?;
        Ok(Self { dim, x, p })
    }

    /// State at rest at configuration `x`.
    pub fn at_rest(dim: usize, x: Vec<f64>) -> Result<Self> {
        let p = vec![0.0; x.len()];
        Self::new(dim, x, p)
    }

    pub fn landmarks(&self) -> usize {
        self.x.len() / self.dim
    }

    pub fn phase_len(&self) -> usize {
        self.x.len()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.p).all(|v| v.is_finite())
    }
}

/// Uniform grid `t_j = j·dt`, `j = 0..=N`, over `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Domain("grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        if j == self.steps {
            self.horizon
        } else {
            j as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|j| self.node(j))
    }

    /// Index of the node equal to `t` up to `tol · dt`, if any.
    pub fn node_index(&self, t: f64, tol: f64) -> Option<usize> {
        let r = t / self.dt();
        let j = r.round();
        if j < 0.0 || j > self.steps as f64 || (r - j).abs() > tol {
            None
        } else {
            Some(j as usize)
        }
    }
}

/// States at every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<PhaseState>,
}

impl Trajectory {
    pub fn last(&self) -> &PhaseState {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn positions(&self) -> impl Iterator<Item = &[f64]> {
        self.states.iter().map(|s| s.x.as_slice())
    }
}

/// Control samples at the grid nodes, interpreted piecewise linear in time.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    pub grid: TimeGrid,
    pub samples: Vec<Vec<f64>>,
}

impl ControlPath {
    pub fn zeros(grid: TimeGrid, len: usize) -> Self {
        Self {
            grid,
            samples: vec![vec![0.0; len]; grid.steps() + 1],
        }
    }

    pub fn constant(grid: TimeGrid, value: Vec<f64>) -> Self {
        Self {
            grid,
            samples: vec![value; grid.steps() + 1],
        }
    }

    pub fn new(grid: TimeGrid, samples: Vec<Vec<f64>>) -> Result<Self> {
        check_len(grid.steps() + 1, samples.len(), "control sample count")?;
        if let Some(first) = samples.first() {
            for s in &samples {
                check_len(first.len(), s.len(), "control sample length")?;
            }
        }
        Ok(Self { grid, samples })
    }

    pub fn sample_len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    /// Linear interpolation inside step `j` at fraction `theta ∈ [0, 1]`.
    pub fn interpolate(&self, j: usize, theta: f64) -> Vec<f64> {
        let a = &self.samples[j];
        let b = &self.samples[(j + 1).min(self.samples.len() - 1)];
        a.iter().zip(b).map(|(x, y)| (1.0 - theta) * x + theta * y).collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// `∫ |u|² dt` for the piecewise-linear interpolant (exact).
    pub fn squared_l2(&self) -> f64 {
        let h = self.grid.dt();
        self.samples
            .windows(2)
            .map(|w| {
                let aa: f64 = w[0].iter().map(|v| v * v).sum();
                let bb: f64 = w[1].iter().map(|v| v * v).sum();
                let ab: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| a * b).sum();
                h * (aa + ab + bb) / 3.0
            })
            .sum()
    }
}

/// Momentum impulses applied at grid nodes (node index → jump added to `p`).
pub type Impulses = BTreeMap<usize, Vec<f64>>;

// ---------------------------------------------------------------------------
// Hamiltonian and its derivatives on raw slices.

pub(crate) fn h0_raw(x: &[f64], p: &[f64], dim: usize, k: &dyn Kernel) -> f64 {
    let n = x.len() / dim;
    let mut total = 0.0;
    for i in 0..n {
        let xi = &x[i * dim..(i + 1) * dim];
        let pi = &p[i * dim..(i + 1) * dim];
        total += 0.5 * dot(pi, pi) * k.profile(0.0);
        for j in (i + 1)..n {
            let xj = &x[j * dim..(j + 1) * dim];
            let pj = &p[j * dim..(j + 1) * dim];
            total += k.profile(sq_dist(xi, xj)) * dot(pi, pj);
        }
    }
    total
}

/// Computes `(∂H0/∂x, ∂H0/∂p)` in one sweep over landmark pairs.
pub(crate) fn gradients_raw(x: &[f64], p: &[f64], dim: usize, k: &dyn Kernel, gx: &mut [f64], gp: &mut [f64]) {
    let n = x.len() / dim;
    gx.iter_mut().for_each(|v| *v = 0.0);
    let phi0 = k.profile(0.0);
    for (g, v) in gp.iter_mut().zip(p) {
        *g = phi0 * v;
    }
    for i in 0..n {
        let xi = &x[i * dim..(i + 1) * dim];
        let pi = &p[i * dim..(i + 1) * dim];
        for j in (i + 1)..n {
            let xj = &x[j * dim..(j + 1) * dim];
            let pj = &p[j * dim..(j + 1) * dim];
            let (phi, d1, _) = k.profile_derivatives(sq_dist(xi, xj));
            let c = 2.0 * d1 * dot(pi, pj);
            for a in 0..dim {
                gp[i * dim + a] += phi * pj[a];
                gp[j * dim + a] += phi * pi[a];
                let f = c * (xi[a] - xj[a]);
                gx[i * dim + a] += f;
                gx[j * dim + a] -= f;
            }
        }
    }
}

/// Hessian of `H0` applied to the direction `(a, b)`; returns `(Hv_x, Hv_p)`.
pub(crate) fn hess_vec_raw(
    x: &[f64],
    p: &[f64],
    a: &[f64],
    b: &[f64],
    dim: usize,
    k: &dyn Kernel,
    hx: &mut [f64],
    hp: &mut [f64],
) {
    let n = x.len() / dim;
    hx.iter_mut().for_each(|v| *v = 0.0);
    let phi0 = k.profile(0.0);
    for (h, v) in hp.iter_mut().zip(b) {
        *h = phi0 * v;
    }
    let mut d = vec![0.0; dim];
    let mut dd = vec![0.0; dim];
    for i in 0..n {
        let (xi, pi, ai, bi) = (
            &x[i * dim..(i + 1) * dim],
            &p[i * dim..(i + 1) * dim],
            &a[i * dim..(i + 1) * dim],
            &b[i * dim..(i + 1) * dim],
        );
        for j in (i + 1)..n {
            let (xj, pj, aj, bj) = (
                &x[j * dim..(j + 1) * dim],
                &p[j * dim..(j + 1) * dim],
                &a[j * dim..(j + 1) * dim],
                &b[j * dim..(j + 1) * dim],
            );
            for c in 0..dim {
                d[c] = xi[c] - xj[c];
                dd[c] = ai[c] - aj[c];
            }
            let s = dot(&d, &d);
            let (phi, d1, d2) = k.profile_derivatives(s);
            let ds = 2.0 * dot(&d, &dd);
            let pp = dot(pi, pj);
            let dpp = dot(bi, pj) + dot(pi, bj);
            // ∂H/∂p_i = Σ_j φ p_j  (and symmetrically for j)
            let dphi = d1 * ds;
            // ∂H/∂x_i = Σ_j 2 φ' (p_i·p_j) d_ij
            let coef_d = 2.0 * (d2 * ds * pp + d1 * dpp);
            let coef_dd = 2.0 * d1 * pp;
            for c in 0..dim {
                hp[i * dim + c] += dphi * pj[c] + phi * bj[c];
                hp[j * dim + c] += dphi * pi[c] + phi * bi[c];
                let f = coef_d * d[c] + coef_dd * dd[c];
                hx[i * dim + c] += f;
                hx[j * dim + c] -= f;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Public operations.

/// Reduced Hamiltonian `½ Σ_ij p_iᵀ K(x_i, x_j) p_j`.
pub fn h0(q: &PhaseState, k: &dyn Kernel) -> f64 {
    h0_raw(&q.x, &q.p, q.dim, k)
}

/// `∂H0/∂p`, i.e. the landmark velocities `K_x p`.
pub fn dh0_dp(q: &PhaseState, k: &dyn Kernel) -> Vec<f64> {
    let mut gx = vec![0.0; q.x.len()];
    let mut gp = vec![0.0; q.x.len()];
    gradients_raw(&q.x, &q.p, q.dim, k, &mut gx, &mut gp);
    gp
}

/// `∂H0/∂x`.
pub fn dh0_dx(q: &PhaseState, k: &dyn Kernel) -> Vec<f64> {
    let mut gx = vec![0.0; q.x.len()];
    let mut gp = vec![0.0; q.x.len()];
    gradients_raw(&q.x, &q.p, q.dim, k, &mut gx, &mut gp);
    gx
}

/// Hessian-vector product of `H0` at `q` along `(δx, δp)`, returned as `(x-part, p-part)`.
pub fn hessian_vector(q: &PhaseState, dx: &[f64], dp: &[f64], k: &dyn Kernel) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(q.x.len(), dx.len(), "position direction")?;
    check_len(q.x.len(), dp.len(), "momentum direction")?;
    let mut hx = vec![0.0; dx.len()];
    let mut hp = vec![0.0; dx.len()];
    hess_vec_raw(&q.x, &q.p, dx, dp, q.dim, k, &mut hx, &mut hp);
    Ok((hx, hp))
}

/// Velocity field `v(z) = Σ_i K(z, x_i) p_i` generated by the momenta.
pub fn reconstruct_velocity(q: &PhaseState, z: &[f64], k: &dyn Kernel) -> Result<Vec<f64>> {
    check_len(q.dim, z.len(), "evaluation point")?;
    let mut v = vec![0.0; q.dim];
    for i in 0..q.landmarks() {
        let xi = &q.x[i * q.dim..(i + 1) * q.dim];
        let w = k.profile(sq_dist(z, xi));
        for (vc, pc) in v.iter_mut().zip(&q.p[i * q.dim..(i + 1) * q.dim]) {
            *vc += w * pc;
        }
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// RK4 machinery.

/// A running cost `C(q, u)` integrated along a controlled trajectory.
pub trait RunningCost: Sync {
    fn value(&self, x: &[f64], p: &[f64], u: &[f64]) -> Result<f64>;

    /// Gradients `(∂C/∂x, ∂C/∂p, ∂C/∂u)`.
    fn gradient(&self, x: &[f64], p: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)>;
}

/// Vector field `f(q, u) = (∂H0/∂p, -∂H0/∂x + u)`.
pub(crate) fn vector_field(x: &[f64], p: &[f64], u: &[f64], dim: usize, k: &dyn Kernel) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gp = vec![0.0; x.len()];
    gradients_raw(x, p, dim, k, &mut gx, &mut gp);
    for (g, uc) in gx.iter_mut().zip(u) {
        *g = -*g + uc;
    }
    (gp, gx)
}

/// RK4 stage weights and the control evaluation fraction of each stage.
pub(crate) const RK4_WEIGHTS: [f64; 4] = [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];

/// Stage states and stage controls of one RK4 step.
pub(crate) struct Rk4Step {
    pub ys: [(Vec<f64>, Vec<f64>); 4],
    pub us: [Vec<f64>; 4],
    pub next: (Vec<f64>, Vec<f64>),
}

pub(crate) fn axpy(base: &[f64], a: f64, v: &[f64]) -> Vec<f64> {
    base.iter().zip(v).map(|(b, w)| b + a * w).collect()
}

/// One RK4 step from `(x, p)` with controls `u_start`, `u_end` at the step ends.
pub(crate) fn rk4_step(
    x: &[f64],
    p: &[f64],
    u_start: &[f64],
    u_end: &[f64],
    h: f64,
    dim: usize,
    k: &dyn Kernel,
) -> Rk4Step {
    let u_mid: Vec<f64> = u_start.iter().zip(u_end).map(|(a, b)| 0.5 * (a + b)).collect();
    let y1 = (x.to_vec(), p.to_vec());
    let k1 = vector_field(&y1.0, &y1.1, u_start, dim, k);
    let y2 = (axpy(x, 0.5 * h, &k1.0), axpy(p, 0.5 * h, &k1.1));
    let k2 = vector_field(&y2.0, &y2.1, &u_mid, dim, k);
    let y3 = (axpy(x, 0.5 * h, &k2.0), axpy(p, 0.5 * h, &k2.1));
    let k3 = vector_field(&y3.0, &y3.1, &u_mid, dim, k);
    let y4 = (axpy(x, h, &k3.0), axpy(p, h, &k3.1));
    let k4 = vector_field(&y4.0, &y4.1, u_end, dim, k);
    let combine = |base: &[f64], s1: &[f64], s2: &[f64], s3: &[f64], s4: &[f64]| -> Vec<f64> {
        (0..base.len())
            .map(|c| base[c] + h * (s1[c] + 2.0 * s2[c] + 2.0 * s3[c] + s4[c]) / 6.0)
            .collect()
    };
    let nx = combine(x, &k1.0, &k2.0, &k3.0, &k4.0);
    let np = combine(p, &k1.1, &k2.1, &k3.1, &k4.1);
    Rk4Step {
        ys: [y1, y2, y3, y4],
        us: [u_start.to_vec(), u_mid.clone(), u_mid, u_end.to_vec()],
        next: (nx, np),
    }
}

/// Forward integration with optional controls, momentum impulses and running cost.
///
/// Impulses at node `j < N` are added to `p` before stepping away from `j`; the stored
/// state at that node is the post-impulse one. The running cost is integrated with the
/// RK4 stage quadrature and returned alongside the trajectory.
pub(crate) fn integrate_full(
    q0: &PhaseState,
    grid: TimeGrid,
    controls: Option<&ControlPath>,
    impulses: &Impulses,
    k: &dyn Kernel,
    cost: Option<&dyn RunningCost>,
) -> Result<(Trajectory, f64)> {
    let len = q0.phase_len();
    if let Some(u) = controls {
        check_len(grid.steps(), u.grid.steps(), "control grid steps")?;
        check_len(len, u.sample_len(), "control sample length")?;
    }
    for (node, jump) in impulses {
        check_len(len, jump.len(), "impulse length")?;
        if *node >= grid.steps() {
            return Err(Error::Config(format!(
                "impulse at node {node} must precede the final node {}",
                grid.steps()
            )));
        }
    }
    let zero = vec![0.0; len];
    let h = grid.dt();
    let mut states = Vec::with_capacity(grid.steps() + 1);
    let mut x = q0.x.clone();
    let mut p = q0.p.clone();
    let mut running = 0.0;
    for j in 0..grid.steps() {
        if let Some(jump) = impulses.get(&j) {
            for (pc, jc) in p.iter_mut().zip(jump) {
                *pc += jc;
            }
        }
        states.push(PhaseState {
            dim: q0.dim,
            x: x.clone(),
            p: p.clone(),
        });
        let (ua, ub) = match controls {
            Some(u) => (u.samples[j].as_slice(), u.samples[j + 1].as_slice()),
            None => (zero.as_slice(), zero.as_slice()),
        };
        let step = rk4_step(&x, &p, ua, ub, h, q0.dim, k);
        if let Some(c) = cost {
            for s in 0..4 {
                running += h * RK4_WEIGHTS[s] * c.value(&step.ys[s].0, &step.ys[s].1, &step.us[s])?;
            }
        }
        x = step.next.0;
        p = step.next.1;
        if !(x.iter().chain(&p).all(|v| v.is_finite()) && running.is_finite()) {
            return Err(Error::Diverged {
                node: j + 1,
                time: grid.node(j + 1),
            });
        }
    }
    states.push(PhaseState { dim: q0.dim, x, p });
    Ok((Trajectory { grid, states }, running))
}

/// Integrates `ẋ = ∂H0/∂p`, `ṗ = -∂H0/∂x + u` on the grid of `u` with RK4.
pub fn integrate_controlled(q0: &PhaseState, u: &ControlPath, k: &dyn Kernel) -> Result<Trajectory> {
    integrate_full(q0, u.grid, Some(u), &Impulses::new(), k, None).map(|(t, _)| t)
}

/// Geodesic shooting: the controlled flow with zero control.
pub fn integrate_geodesic(q0: &PhaseState, grid: TimeGrid, k: &dyn Kernel) -> Result<Trajectory> {
    let zero = ControlPath::zeros(grid, q0.phase_len());
    integrate_controlled(q0, &zero, k)
}

/// Covariant acceleration `K_{x_t} u_t` at every node.
pub fn covariant_acceleration(traj: &Trajectory, u: &ControlPath, k: &dyn Kernel) -> Result<Vec<Vec<f64>>> {
    check_len(traj.states.len(), u.samples.len(), "trajectory vs control nodes")?;
    traj.states
        .iter()
        .zip(&u.samples)
        .map(|(s, us)| {
            check_len(s.phase_len(), us.len(), "control sample length")?;
            let probe = PhaseState {
                dim: s.dim,
                x: s.x.clone(),
                p: us.clone(),
            };
            Ok(dh0_dp(&probe, k))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::GaussianKernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng, n: usize, dim: usize, spread: f64, mom: f64) -> PhaseState {
        let x = (0..n * dim).map(|_| rng.random_range(-spread..spread)).collect();
        let p = (0..n * dim).map(|_| rng.random_range(-mom..mom)).collect();
        PhaseState::new(dim, x, p).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn max_abs(a: &[f64]) -> f64 {
        a.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    #[test]
    fn h0_examples() {
        let k = GaussianKernel::new(1.0).unwrap();
        let single = PhaseState::new(2, vec![0.3, 0.4], vec![1.0, 2.0]).unwrap();
        assert!((h0(&single, &k) - 2.5).abs() < 1e-15);
        let rest = PhaseState::at_rest(1, vec![0.0, 1.0]).unwrap();
        assert_eq!(h0(&rest, &k), 0.0);
        let pair = PhaseState::new(1, vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert!((h0(&pair, &k) - (1.0 + (-1.0f64).exp())).abs() < 1e-12);
        assert!((h0(&pair, &k) - 1.3678794).abs() < 1e-7);
    }

    #[test]
    fn gradient_examples() {
        let k = GaussianKernel::new(1.0).unwrap();
        let single = PhaseState::new(2, vec![0.3, 0.4], vec![1.0, 2.0]).unwrap();
        assert_eq!(dh0_dp(&single, &k), single.p);
        assert_eq!(dh0_dx(&single, &k), vec![0.0, 0.0]);
        let rest = PhaseState::at_rest(2, vec![0.0, 1.0, 2.0, 0.5]).unwrap();
        assert!(dh0_dp(&rest, &k).iter().all(|v| *v == 0.0));
        let sym = PhaseState::new(1, vec![-0.4, 0.4], vec![0.7, -0.7]).unwrap();
        let g = dh0_dx(&sym, &k);
        assert!(g[0] != 0.0);
        assert_eq!(g[0], -g[1]);
    }

    #[test]
    fn gradients_match_central_differences() {
        let k = GaussianKernel::new(0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = random_state(&mut rng, 5, 2, 1.0, 1.0);
            let gp = dh0_dp(&q, &k);
            let gx = dh0_dx(&q, &k);
            let step = 1e-6;
            let scale_p = max_abs(&gp).max(1e-3);
            let scale_x = max_abs(&gx).max(1e-3);
            for c in 0..q.phase_len() {
                let mut a = q.clone();
                let mut b = q.clone();
                a.p[c] += step;
                b.p[c] -= step;
                let fd = (h0(&a, &k) - h0(&b, &k)) / (2.0 * step);
                assert!((fd - gp[c]).abs() / scale_p < 1e-7, "p {c}: {fd} vs {}", gp[c]);
                let mut a = q.clone();
                let mut b = q.clone();
                a.x[c] += step;
                b.x[c] -= step;
                let fd = (h0(&a, &k) - h0(&b, &k)) / (2.0 * step);
                assert!((fd - gx[c]).abs() / scale_x < 1e-6, "x {c}: {fd} vs {}", gx[c]);
            }
        }
    }

    #[test]
    fn hessian_vector_matches_gradient_differences() {
        let k = GaussianKernel::new(0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let q = random_state(&mut rng, 4, 2, 1.0, 1.0);
            let a: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (hx, hp) = hessian_vector(&q, &a, &b, &k).unwrap();
            let e = 1e-6;
            let shifted = |s: f64| PhaseState::new(2, axpy(&q.x, s, &a), axpy(&q.p, s, &b)).unwrap();
            let (qp, qm) = (shifted(e), shifted(-e));
            let fx: Vec<f64> = dh0_dx(&qp, &k)
                .iter()
                .zip(dh0_dx(&qm, &k))
                .map(|(u, v)| (u - v) / (2.0 * e))
                .collect();
            let fp: Vec<f64> = dh0_dp(&qp, &k)
                .iter()
                .zip(dh0_dp(&qm, &k))
                .map(|(u, v)| (u - v) / (2.0 * e))
                .collect();
            assert!(max_abs_diff(&fx, &hx) / max_abs(&hx).max(1e-3) < 1e-6);
            assert!(max_abs_diff(&fp, &hp) / max_abs(&hp).max(1e-3) < 1e-6);
        }
    }

    #[test]
    fn zero_control_matches_geodesic_bitwise() {
        let k = GaussianKernel::new(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_state(&mut rng, 6, 2, 1.0, 0.5);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let geo = integrate_geodesic(&q, grid, &k).unwrap();
        let ctrl = integrate_controlled(&q, &ControlPath::zeros(grid, 12), &k).unwrap();
        assert_eq!(geo, ctrl);
        assert_eq!(geo.states[0], q);
    }

    #[test]
    fn single_landmark_constant_control_closed_form() {
        let k = GaussianKernel::new(1.0).unwrap();
        let q = PhaseState::new(2, vec![0.5, -0.2], vec![1.0, 0.3]).unwrap();
        let c = vec![0.4, -1.1];
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let traj = integrate_controlled(&q, &ControlPath::constant(grid, c.clone()), &k).unwrap();
        for (j, s) in traj.states.iter().enumerate() {
            let t = grid.node(j);
            for a in 0..2 {
                let xe = q.x[a] + q.p[a] * t + 0.5 * c[a] * t * t;
                let pe = q.p[a] + c[a] * t;
                assert!((s.x[a] - xe).abs() < 1e-12);
                assert!((s.p[a] - pe).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_landmark_geodesic_is_straight_line() {
        let k = GaussianKernel::new(0.3).unwrap();
        let q = PhaseState::new(3, vec![0.0, 1.0, 2.0], vec![0.5, -0.5, 1.0]).unwrap();
        let grid = TimeGrid::new(2.0, 20).unwrap();
        let traj = integrate_geodesic(&q, grid, &k).unwrap();
        for (j, s) in traj.states.iter().enumerate() {
            let t = grid.node(j);
            for a in 0..3 {
                assert!((s.x[a] - (q.x[a] + t * q.p[a])).abs() < 1e-13);
            }
            assert_eq!(s.p, q.p);
        }
    }

    fn max_traj_err(a: &Trajectory, b: &Trajectory, stride: usize) -> f64 {
        a.states
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let r = &b.states[j * stride];
                max_abs_diff(&s.x, &r.x).max(max_abs_diff(&s.p, &r.p))
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        let k = GaussianKernel::new(0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q = random_state(&mut rng, 5, 2, 1.0, 1.0);
        let steps = 20;
        let make_u = |grid: TimeGrid| {
            ControlPath::new(
                grid,
                grid.nodes()
                    .map(|t| (0..10).map(|c| 0.3 * (c as f64 - 4.5) * (1.0 - 2.0 * t)).collect())
                    .collect(),
            )
            .unwrap()
        };
        let run = |m: usize| {
            let grid = TimeGrid::new(1.0, steps * m).unwrap();
            integrate_controlled(&q, &make_u(grid), &k).unwrap()
        };
        let reference = run(16);
        let coarse = run(1);
        let fine = run(2);
        let e1 = max_traj_err(&coarse, &reference, 16);
        let e2 = max_traj_err(&fine, &reference, 8);
        // Richardson: the reference carries (1/16)^4 of the coarse error.
        let order = (e1 / e2).log2();
        assert!(order >= 3.9, "observed order {order}");
    }

    #[test]
    fn geodesic_conserves_hamiltonian_and_momentum() {
        let k = GaussianKernel::new(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let q = random_state(&mut rng, 8, 2, 1.0, 1.0);
            let grid = TimeGrid::new(1.0, 1000).unwrap();
            let traj = integrate_geodesic(&q, grid, &k).unwrap();
            let e0 = h0(&q, &k);
            let total0: Vec<f64> = (0..2).map(|a| q.p.iter().skip(a).step_by(2).sum()).collect();
            for s in &traj.states {
                assert!((h0(s, &k) - e0).abs() / e0.max(1.0) < 1e-8);
                for a in 0..2 {
                    let tot: f64 = s.p.iter().skip(a).step_by(2).sum();
                    assert!((tot - total0[a]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn energy_bound_along_controlled_paths() {
        let k = GaussianKernel::new(0.9).unwrap();
        let c = k.admissibility_constant();
        let c1 = (2.0f64).max(4.0 * c * c);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let q = random_state(&mut rng, 3, 2, 1.0, 1.0);
            let grid = TimeGrid::new(1.0, 50).unwrap();
            let u = ControlPath::new(
                grid,
                (0..=50)
                    .map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .collect(),
            )
            .unwrap();
            let traj = integrate_controlled(&q, &u, &k).unwrap();
            let bound = c1 * (h0(&q, &k) + grid.horizon() * u.squared_l2());
            let max_h = traj.states.iter().map(|s| h0(s, &k)).fold(0.0, f64::max);
            assert!(max_h <= bound, "{max_h} > {bound}");
        }
    }

    #[test]
    fn control_to_state_stability() {
        // Regression bound measured on this family: sup ratio ≈ 0.65; frozen with margin.
        const FROZEN_LIPSCHITZ: f64 = 1.0;
        let k = GaussianKernel::new(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let q = random_state(&mut rng, 4, 2, 1.0, 0.5);
            let u = ControlPath::new(
                grid,
                (0..=100)
                    .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect(),
            )
            .unwrap();
            let du = ControlPath::new(
                grid,
                (0..=100)
                    .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect(),
            )
            .unwrap();
            let eps = 1e-3;
            let norm = du.squared_l2().sqrt();
            let perturbed = ControlPath::new(
                grid,
                u.samples
                    .iter()
                    .zip(&du.samples)
                    .map(|(a, b)| axpy(a, eps / norm, b))
                    .collect(),
            )
            .unwrap();
            let a = integrate_controlled(&q, &u, &k).unwrap();
            let b = integrate_controlled(&q, &perturbed, &k).unwrap();
            worst = worst.max(max_traj_err(&a, &b, 1) / eps);
        }
        assert!(worst <= FROZEN_LIPSCHITZ, "stability ratio {worst}");
    }

    #[test]
    fn reconstruct_velocity_examples() {
        let k = GaussianKernel::new(0.5).unwrap();
        let single = PhaseState::new(2, vec![0.1, 0.2], vec![3.0, -1.0]).unwrap();
        assert_eq!(reconstruct_velocity(&single, &[0.1, 0.2], &k).unwrap(), single.p);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let q = random_state(&mut rng, 5, 2, 1.0, 1.0);
        let vel = dh0_dp(&q, &k);
        for i in 0..5 {
            let v = reconstruct_velocity(&q, &q.x[2 * i..2 * i + 2], &k).unwrap();
            assert!(max_abs_diff(&v, &vel[2 * i..2 * i + 2]) < 1e-14);
        }
        // far away: every landmark is at least 10 widths from z
        let z = [6.0, 0.0];
        let v = reconstruct_velocity(&q, &z, &k).unwrap();
        let bound = 5.0 * (-100.0f64).exp() * max_abs(&q.p) * 2f64.sqrt();
        assert!(v.iter().map(|c| c * c).sum::<f64>().sqrt() <= bound);
    }

    #[test]
    fn covariant_acceleration_identities() {
        let k = GaussianKernel::new(1.0).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let q = PhaseState::new(2, vec![0.0, 0.0], vec![1.0, 0.0]).unwrap();
        let u = ControlPath::constant(grid, vec![0.5, 0.25]);
        let traj = integrate_controlled(&q, &u, &k).unwrap();
        let acc = covariant_acceleration(&traj, &u, &k).unwrap();
        assert!(acc.iter().all(|a| a == &vec![0.5, 0.25]));
        let zero = ControlPath::zeros(grid, 2);
        let acc = covariant_acceleration(&traj, &zero, &k).unwrap();
        assert!(acc.iter().flatten().all(|v| *v == 0.0));
        let short = ControlPath::zeros(TimeGrid::new(1.0, 5).unwrap(), 2);
        assert!(covariant_acceleration(&traj, &short, &k).is_err());
    }

    #[test]
    fn covariant_acceleration_matches_second_differences() {
        // ẍ - [∂₁k(x,x)](ẋ) p + k(x,x) ∂_x H  =  k(x,x) u  up to O(dt²)
        let k = GaussianKernel::new(0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let q = random_state(&mut rng, 4, 2, 1.0, 0.5);
        let residual = |steps: usize| {
            let grid = TimeGrid::new(1.0, steps).unwrap();
            let u = ControlPath::new(
                grid,
                grid.nodes()
                    .map(|t| (0..8).map(|c| ((c + 1) as f64 * t).cos()).collect())
                    .collect(),
            )
            .unwrap();
            let traj = integrate_controlled(&q, &u, &k).unwrap();
            let acc = covariant_acceleration(&traj, &u, &k).unwrap();
            let h = grid.dt();
            let mut worst: f64 = 0.0;
            for j in 1..steps {
                let s = &traj.states[j];
                let xdd: Vec<f64> = (0..8)
                    .map(|c| (traj.states[j + 1].x[c] - 2.0 * s.x[c] + traj.states[j - 1].x[c]) / (h * h))
                    .collect();
                let xdot = dh0_dp(s, &k);
                let (_, dk_p) = hessian_vector(s, &xdot, &[0.0; 8], &k).unwrap();
                let hx = dh0_dx(s, &k);
                let probe = PhaseState::new(2, s.x.clone(), hx).unwrap();
                let k_hx = dh0_dp(&probe, &k);
                for c in 0..8 {
                    let drift = dk_p[c] - k_hx[c];
                    worst = worst.max((xdd[c] - drift - acc[j][c]).abs());
                }
            }
            worst
        };
        let r1 = residual(100);
        let r2 = residual(200);
        assert!(r1 < 1e-2, "{r1}");
        assert!(r1 / r2 > 3.5, "ratio {}", r1 / r2);
    }

    #[test]
    fn divergence_is_reported_with_node() {
        let k = GaussianKernel::new(1.0).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let q = PhaseState::new(1, vec![0.0], vec![0.0]).unwrap();
        let mut u = ControlPath::zeros(grid, 1);
        u.samples[4][0] = f64::INFINITY;
        match integrate_controlled(&q, &u, &k) {
            Err(Error::Diverged { node, .. }) => assert_eq!(node, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grid_node_lookup() {
        let grid = TimeGrid::new(3.8, 100).unwrap();
        assert_eq!(grid.node_index(0.76, 1e-9), Some(20));
        assert_eq!(grid.node_index(3.8, 1e-9), Some(100));
        assert_eq!(grid.node_index(0.77, 1e-9), None);
        assert_eq!(grid.node(100), 3.8);
        assert!(TimeGrid::new(1.0, 0).is_err());
    }
}
