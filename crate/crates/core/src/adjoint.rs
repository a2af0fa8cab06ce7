//! Costate integration and gradients of the spline objective.
//!
//! The objective is `J(p0, u) = Σ_j h Σ_s b_s C(Y_s, U_s) + γ Σ_k |x_{t_k} − x^D_k|²`, where
//! `Y_s, U_s` are the RK4 stage states and stage controls of step `j`. The costate below is
//! the exact adjoint of this discrete map, so gradients agree with finite differences of
//! `J` up to rounding.
//!
//! Costate values are stored right-continuous: `values[j]` is the costate just after
//! `t_j`, and the value just before `t_j` is `values[j]` plus the jump recorded at `j`.

use crate::dynamics::{
    axpy, dot, hess_vec_raw, integrate_full, rk4_step, ControlPath, Impulses, PhaseState, RunningCost, TimeGrid,
    Trajectory, RK4_WEIGHTS,
};
use crate::error::{check_len, Error, Result};
use crate::kernels::Kernel;
use crate::metric::{ControlMetric, MetricCost};
use crate::observations::ObservationSet;

#[derive(Debug, Clone, PartialEq)]
pub struct CostateTrajectory {
    pub grid: TimeGrid,
    /// `N + 1` vectors `(P^x, P^p)` of length `2·n·d`.
    pub values: Vec<Vec<f64>>,
    /// `(node, jump)` in backward order of application.
    pub jumps: Vec<(usize, Vec<f64>)>,
}

impl CostateTrajectory {
    /// Costate just before node `j`.
    pub fn left_value(&self, j: usize) -> Vec<f64> {
        let mut v = self.values[j].clone();
        for (node, jump) in &self.jumps {
            if *node == j {
                for (a, b) in v.iter_mut().zip(jump) {
                    *a += b;
                }
            }
        }
        v
    }

    /// Momentum half `P^p` of the right value at node `j`.
    pub fn momentum(&self, j: usize) -> &[f64] {
        let half = self.values[j].len() / 2;
        &self.values[j][half..]
    }
}

/// Gradient of `J` with respect to `(p0, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGradient {
    pub grad_p0: Vec<f64>,
    /// L²-representer of the control gradient: `⟨grad_u, δu⟩_{L²} = ∂J·δu`.
    pub grad_u: ControlPath,
    /// Plain partial derivatives of `J` with respect to each control sample.
    pub raw_u: Vec<Vec<f64>>,
}

impl ObjectiveGradient {
    /// Directional derivative `∂J·(δp0, δu)`.
    pub fn directional(&self, dp0: &[f64], du: &ControlPath) -> f64 {
        dot(&self.grad_p0, dp0) + self.raw_u.iter().zip(&du.samples).map(|(g, d)| dot(g, d)).sum::<f64>()
    }

    /// `max_t |grad_u(t)|_∞`, the discrete Euler-Lagrange residual.
    pub fn control_residual(&self) -> f64 {
        self.grad_u
            .samples
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn p0_residual(&self) -> f64 {
        self.grad_p0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Objective value, its parts, and the forward/backward solutions used to get the gradient.
#[derive(Debug, Clone)]
pub struct GradientDiagnostics {
    pub objective: f64,
    pub control_cost: f64,
    pub data_misfit: f64,
    pub trajectory: Trajectory,
    pub costate: CostateTrajectory,
}

/// Data attachment `γ Σ_k |x_{t_k} − x^D_k|²` resolved to grid nodes.
pub(crate) struct DataTerm<'a> {
    pub targets: Vec<(usize, &'a [f64])>,
    pub gamma: f64,
}

impl<'a> DataTerm<'a> {
    pub fn new(obs: &'a ObservationSet, grid: &TimeGrid, gamma: f64, phase_len: usize) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Domain(format!("data weight must be positive, got {gamma}")));
        }
        check_len(phase_len, obs.phase_len(), "observation size")?;
        let nodes = obs.node_indices(grid)?;
        let targets = nodes
            .into_iter()
            .zip(obs.entries())
            .map(|(j, o)| (j, o.points.as_slice()))
            .collect();
        Ok(Self { targets, gamma })
    }

    pub fn value(&self, traj: &Trajectory) -> f64 {
        self.targets
            .iter()
            .map(|(j, target)| {
                let x = &traj.states[*j].x;
                self.gamma * x.iter().zip(*target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum()
    }

    /// Jump `(2γ(x − x^D), 0)` of the observation at node `j`, if any.
    fn jump(&self, traj: &Trajectory, j: usize) -> Option<Vec<f64>> {
        let (_, target) = self.targets.iter().find(|(node, _)| *node == j)?;
        let x = &traj.states[j].x;
        let mut v: Vec<f64> = x.iter().zip(*target).map(|(a, b)| 2.0 * self.gamma * (a - b)).collect();
        v.extend(std::iter::repeat_n(0.0, x.len()));
        Some(v)
    }
}

fn split(v: &[f64]) -> (&[f64], &[f64]) {
    v.split_at(v.len() / 2)
}

/// `J(q)ᵀ v` for the Jacobian of `f(·, u)` at `(x, p)`; `v = (v^x, v^p)`.
fn jacobian_transpose(x: &[f64], p: &[f64], v: &[f64], dim: usize, k: &dyn Kernel) -> Vec<f64> {
    let (vx, vp) = split(v);
    let a: Vec<f64> = vp.iter().map(|c| -c).collect();
    let mut hx = vec![0.0; x.len()];
    let mut hp = vec![0.0; x.len()];
    hess_vec_raw(x, p, &a, vx, dim, k, &mut hx, &mut hp);
    hx.extend(hp);
    hx
}

/// `J(q) δq` for the Jacobian of `f(·, u)` at `(x, p)`.
fn jacobian_apply(x: &[f64], p: &[f64], dq: &[f64], dim: usize, k: &dyn Kernel) -> Vec<f64> {
    let (dx, dp) = split(dq);
    let mut hx = vec![0.0; x.len()];
    let mut hp = vec![0.0; x.len()];
    hess_vec_raw(x, p, dx, dp, dim, k, &mut hx, &mut hp);
    hp.extend(hx.iter().map(|c| -c));
    hp
}

fn check_consistent(traj: &Trajectory, u: &ControlPath) -> Result<()> {
    check_len(traj.grid.steps(), u.grid.steps(), "trajectory vs control grid")?;
    check_len(traj.states.len(), u.samples.len(), "trajectory vs control nodes")?;
    check_len(traj.states[0].phase_len(), u.sample_len(), "control sample length")
}

/// Backward sweep. Returns the costate and `∂J/∂u_j` for every control sample.
fn backward(
    traj: &Trajectory,
    u: &ControlPath,
    data: &DataTerm<'_>,
    cost: &dyn RunningCost,
    k: &dyn Kernel,
) -> Result<(CostateTrajectory, Vec<Vec<f64>>)> {
    check_consistent(traj, u)?;
    let grid = traj.grid;
    let n_steps = grid.steps();
    let h = grid.dt();
    let dim = traj.states[0].dim;
    let len = traj.states[0].phase_len();
    let mut values = vec![vec![0.0; 2 * len]; n_steps + 1];
    let mut jumps = Vec::new();
    let mut raw_u = vec![vec![0.0; len]; n_steps + 1];

    let mut lam = vec![0.0; 2 * len];
    if let Some(jump) = data.jump(traj, n_steps) {
        lam.iter_mut().zip(&jump).for_each(|(a, b)| *a += b);
        jumps.push((n_steps, jump));
    }
    for j in (0..n_steps).rev() {
        let s0 = &traj.states[j];
        let step = rk4_step(&s0.x, &s0.p, &u.samples[j], &u.samples[j + 1], h, dim, k);
        let mut ybar: [Vec<f64>; 4] = Default::default();
        let mut ubar: [Vec<f64>; 4] = Default::default();
        for s in (0..4).rev() {
            let w = h * RK4_WEIGHTS[s];
            let mut kbar: Vec<f64> = lam.iter().map(|v| w * v).collect();
            if s < 3 {
                let c = if s == 2 { h } else { 0.5 * h };
                kbar.iter_mut().zip(&ybar[s + 1]).for_each(|(a, b)| *a += c * b);
            }
            let (yx, yp) = (&step.ys[s].0, &step.ys[s].1);
            let mut yb = jacobian_transpose(yx, yp, &kbar, dim, k);
            let (cx, cp, cu) = cost.gradient(yx, yp, &step.us[s])?;
            for c in 0..len {
                yb[c] += w * cx[c];
                yb[len + c] += w * cp[c];
            }
            ubar[s] = kbar[len..].iter().zip(&cu).map(|(a, b)| a + w * b).collect();
            ybar[s] = yb;
        }
        for c in 0..2 * len {
            lam[c] += ybar[0][c] + ybar[1][c] + ybar[2][c] + ybar[3][c];
        }
        for c in 0..len {
            let mid = 0.5 * (ubar[1][c] + ubar[2][c]);
            raw_u[j][c] += ubar[0][c] + mid;
            raw_u[j + 1][c] += mid + ubar[3][c];
        }
        if !lam.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                node: j,
                time: grid.node(j),
            });
        }
        values[j] = lam.clone();
        if let Some(jump) = data.jump(traj, j) {
            lam.iter_mut().zip(&jump).for_each(|(a, b)| *a += b);
            jumps.push((j, jump));
        }
    }
    Ok((CostateTrajectory { grid, values, jumps }, raw_u))
}

/// Backward costate of the spline objective along `traj`.
pub fn integrate_costate(
    traj: &Trajectory,
    u: &ControlPath,
    obs: &ObservationSet,
    m: &dyn ControlMetric,
    gamma: f64,
    k: &dyn Kernel,
) -> Result<CostateTrajectory> {
    let len = traj.states[0].phase_len();
    let data = DataTerm::new(obs, &traj.grid, gamma, len)?;
    let cost = MetricCost {
        metric: m,
        kernel: k,
        dim: traj.states[0].dim,
    };
    backward(traj, u, &data, &cost, k).map(|(c, _)| c)
}

/// Tangent of the discrete flow: returns `δq_j` at every node and the matching
/// derivative of the integrated running cost (zero when `cost` is `None`).
fn tangent(
    traj: &Trajectory,
    u: &ControlPath,
    dq0: &[f64],
    du: &ControlPath,
    cost: Option<&dyn RunningCost>,
    k: &dyn Kernel,
) -> Result<(Vec<Vec<f64>>, f64)> {
    check_consistent(traj, u)?;
    let len = traj.states[0].phase_len();
    check_len(2 * len, dq0.len(), "initial perturbation")?;
    check_len(u.samples.len(), du.samples.len(), "control perturbation nodes")?;
    check_len(len, du.sample_len(), "control perturbation length")?;
    let grid = traj.grid;
    let h = grid.dt();
    let dim = traj.states[0].dim;
    let mut out = Vec::with_capacity(grid.steps() + 1);
    let mut dq = dq0.to_vec();
    let mut dcost = 0.0;
    for j in 0..grid.steps() {
        out.push(dq.clone());
        let s0 = &traj.states[j];
        let step = rk4_step(&s0.x, &s0.p, &u.samples[j], &u.samples[j + 1], h, dim, k);
        let (da, db) = (&du.samples[j], &du.samples[j + 1]);
        let dmid: Vec<f64> = da.iter().zip(db).map(|(a, b)| 0.5 * (a + b)).collect();
        let dus = [da.as_slice(), &dmid, &dmid, db.as_slice()];
        let mut dy = dq.clone();
        let mut acc = dq.clone();
        for s in 0..4 {
            let (yx, yp) = (&step.ys[s].0, &step.ys[s].1);
            let mut dk = jacobian_apply(yx, yp, &dy, dim, k);
            dk[len..].iter_mut().zip(dus[s]).for_each(|(a, b)| *a += b);
            if let Some(c) = cost {
                let (cx, cp, cu) = c.gradient(yx, yp, &step.us[s])?;
                dcost += h * RK4_WEIGHTS[s] * (dot(&cx, &dy[..len]) + dot(&cp, &dy[len..]) + dot(&cu, dus[s]));
            }
            acc = axpy(&acc, h * RK4_WEIGHTS[s], &dk);
            if s < 3 {
                dy = axpy(&dq, if s == 2 { h } else { 0.5 * h }, &dk);
            }
        }
        dq = acc;
    }
    out.push(dq);
    Ok((out, dcost))
}

/// Forward integration of the linearized flow along `traj` with RK4.
pub fn integrate_linearized(
    traj: &Trajectory,
    u: &ControlPath,
    dq0: &[f64],
    du: &ControlPath,
    k: &dyn Kernel,
) -> Result<Vec<Vec<f64>>> {
    tangent(traj, u, dq0, du, None, k).map(|(v, _)| v)
}

/// `δJ` obtained by forward linearization; agrees with the costate pairing.
pub fn linearized_objective_derivative(
    traj: &Trajectory,
    u: &ControlPath,
    dq0: &[f64],
    du: &ControlPath,
    obs: &ObservationSet,
    m: &dyn ControlMetric,
    gamma: f64,
    k: &dyn Kernel,
) -> Result<f64> {
    let len = traj.states[0].phase_len();
    let data = DataTerm::new(obs, &traj.grid, gamma, len)?;
    let cost = MetricCost {
        metric: m,
        kernel: k,
        dim: traj.states[0].dim,
    };
    let (dq, mut total) = tangent(traj, u, dq0, du, Some(&cost), k)?;
    for (j, target) in &data.targets {
        let x = &traj.states[*j].x;
        for c in 0..len {
            total += 2.0 * gamma * (x[c] - target[c]) * dq[*j][c];
        }
    }
    Ok(total)
}

/// Value of `J(p0, u)` with `x0 = q0.x`, `p0 = q0.p`.
pub fn objective_value(
    q0: &PhaseState,
    u: &ControlPath,
    obs: &ObservationSet,
    m: &dyn ControlMetric,
    gamma: f64,
    k: &dyn Kernel,
) -> Result<(f64, f64, Trajectory)> {
    let data = DataTerm::new(obs, &u.grid, gamma, q0.phase_len())?;
    let cost = MetricCost {
        metric: m,
        kernel: k,
        dim: q0.dim,
    };
    let (traj, control) = integrate_full(q0, u.grid, Some(u), &Impulses::new(), k, Some(&cost))?;
    let misfit = data.value(&traj);
    Ok((control, misfit, traj))
}

/// Gradient of `J` with respect to `(p0, u)`; `x0` is held fixed.
pub fn objective_gradient(
    q0: &PhaseState,
    u: &ControlPath,
    obs: &ObservationSet,
    m: &dyn ControlMetric,
    gamma: f64,
    k: &dyn Kernel,
) -> Result<(ObjectiveGradient, GradientDiagnostics)> {
    let data = DataTerm::new(obs, &u.grid, gamma, q0.phase_len())?;
    let cost = MetricCost {
        metric: m,
        kernel: k,
        dim: q0.dim,
    };
    let (traj, control) = integrate_full(q0, u.grid, Some(u), &Impulses::new(), k, Some(&cost))?;
    let misfit = data.value(&traj);
    let (costate, raw_u) = backward(&traj, u, &data, &cost, k)?;
    let len = q0.phase_len();
    let grad_p0 = costate.left_value(0)[len..].to_vec();
    let grad_u = ControlPath::new(u.grid, mass_solve(&raw_u, u.grid.dt()))?;
    Ok((
        ObjectiveGradient { grad_p0, grad_u, raw_u },
        GradientDiagnostics {
            objective: control + misfit,
            control_cost: control,
            data_misfit: misfit,
            trajectory: traj,
            costate,
        },
    ))
}

/// Value and gradient of `∫C + γΣ|x_{t_k} − x^D_k|²` for the uncontrolled flow with momentum
/// impulses. Gradients are with respect to `p0` and to each impulse in `impulses` order.
pub(crate) struct ImpulsiveEvaluation {
    pub running: f64,
    pub misfit: f64,
    pub trajectory: Trajectory,
    pub grad_p0: Vec<f64>,
    pub grad_impulses: Vec<Vec<f64>>,
}

pub(crate) fn impulsive_objective_gradient(
    q0: &PhaseState,
    grid: TimeGrid,
    impulses: &Impulses,
    obs: &ObservationSet,
    gamma: f64,
    cost: &dyn RunningCost,
    k: &dyn Kernel,
) -> Result<ImpulsiveEvaluation> {
    let len = q0.phase_len();
    let data = DataTerm::new(obs, &grid, gamma, len)?;
    let (trajectory, running) = integrate_full(q0, grid, None, impulses, k, Some(cost))?;
    let misfit = data.value(&trajectory);
    let zero = ControlPath::zeros(grid, len);
    let (costate, _) = backward(&trajectory, &zero, &data, cost, k)?;
    let grad_p0 = costate.left_value(0)[len..].to_vec();
    let grad_impulses = impulses.keys().map(|j| costate.momentum(*j).to_vec()).collect();
    Ok(ImpulsiveEvaluation {
        running,
        misfit,
        trajectory,
        grad_p0,
        grad_impulses,
    })
}

// ---------------------------------------------------------------------------
// Mass matrix of piecewise-linear functions on the grid: M_jj = 2h/3 (h/3 at the
// ends), M_{j,j±1} = h/6, applied per coordinate.

#[cfg(test)]
pub(crate) fn mass_apply(samples: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let n = samples.len();
    (0..n)
        .map(|j| {
            let diag = if j == 0 || j + 1 == n { h / 3.0 } else { 2.0 * h / 3.0 };
            (0..samples[j].len())
                .map(|c| {
                    let mut v = diag * samples[j][c];
                    if j > 0 {
                        v += h / 6.0 * samples[j - 1][c];
                    }
                    if j + 1 < n {
                        v += h / 6.0 * samples[j + 1][c];
                    }
                    v
                })
                .collect()
        })
        .collect()
}

/// `aᵀ M b` for node samples of width `len` packed contiguously.
pub(crate) fn mass_inner(a: &[f64], b: &[f64], len: usize, h: f64) -> f64 {
    let nodes = a.len() / len;
    let mut diag = 0.0;
    let mut off = 0.0;
    for j in 0..nodes {
        let (aj, bj) = (&a[j * len..(j + 1) * len], &b[j * len..(j + 1) * len]);
        let w = if j == 0 || j + 1 == nodes { 1.0 } else { 2.0 };
        diag += w * dot(aj, bj);
        if j + 1 < nodes {
            let (an, bn) = (&a[(j + 1) * len..(j + 2) * len], &b[(j + 1) * len..(j + 2) * len]);
            off += dot(aj, bn) + dot(an, bj);
        }
    }
    h / 3.0 * diag + h / 6.0 * off
}

/// Thomas algorithm for `M y = r`.
pub(crate) fn mass_solve(rhs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let n = rhs.len();
    let len = rhs[0].len();
    let off = h / 6.0;
    let diag = |j: usize| if j == 0 || j + 1 == n { h / 3.0 } else { 2.0 * h / 3.0 };
    let mut cp = vec![0.0; n];
    let mut dp = vec![vec![0.0; len]; n];
    let mut denom = diag(0);
    cp[0] = off / denom;
    dp[0] = rhs[0].iter().map(|v| v / denom).collect();
    for j in 1..n {
        denom = diag(j) - off * cp[j - 1];
        cp[j] = off / denom;
        dp[j] = (0..len).map(|c| (rhs[j][c] - off * dp[j - 1][c]) / denom).collect();
    }
    for j in (0..n - 1).rev() {
        for c in 0..len {
            dp[j][c] -= cp[j] * dp[j + 1][c];
        }
    }
    dp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::integrate_geodesic;
    use crate::kernels::GaussianKernel;
    use crate::metric::{metric_registry, Euclidean, MetricSettings};
    use crate::observations::Observation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
    }

    struct Instance {
        q0: PhaseState,
        u: ControlPath,
        obs: ObservationSet,
    }

    fn instance(rng: &mut ChaCha8Rng, n: usize, m: usize, steps_per_obs: usize) -> Instance {
        let dim = 2;
        let grid = TimeGrid::new(1.0, steps_per_obs * m).unwrap();
        let x0: Vec<f64> = (0..n)
            .flat_map(|i| {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                [a.cos(), a.sin()]
            })
            .zip(rand_vec(rng, n * dim, 0.1))
            .map(|(a, b)| a + b)
            .collect();
        let q0 = PhaseState::new(dim, x0.clone(), rand_vec(rng, n * dim, 0.5)).unwrap();
        let samples = (0..=grid.steps()).map(|_| rand_vec(rng, n * dim, 0.5)).collect();
        let u = ControlPath::new(grid, samples).unwrap();
        let entries = (1..=m)
            .map(|k| Observation {
                time: grid.node(k * steps_per_obs),
                points: x0.iter().zip(rand_vec(rng, n * dim, 0.3)).map(|(a, b)| a + b).collect(),
            })
            .collect();
        Instance {
            q0,
            u,
            obs: ObservationSet::new(dim, entries).unwrap(),
        }
    }

    fn metrics() -> Vec<Box<dyn ControlMetric>> {
        let reg = metric_registry();
        let s = MetricSettings {
            weight: 0.7,
            measure_width: 0.8,
            jitter: 1e-9,
        };
        reg.names().into_iter().map(|n| reg.create(n, &s).unwrap()).collect()
    }

    fn total(inst: &Instance, p0: &[f64], u: &ControlPath, m: &dyn ControlMetric, k: &dyn Kernel) -> f64 {
        let q = PhaseState::new(2, inst.q0.x.clone(), p0.to_vec()).unwrap();
        let (c, d, _) = objective_value(&q, u, &inst.obs, m, 3.0, k).unwrap();
        c + d
    }

    #[test]
    fn mass_solve_inverts_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [2, 3, 11] {
            let v: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, 3, 1.0)).collect();
            let mv = mass_apply(&v, 0.1);
            let back = mass_solve(&mv, 0.1);
            for (a, b) in v.iter().flatten().zip(back.iter().flatten()) {
                assert!((a - b).abs() < 1e-12);
            }
            let w: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, 3, 1.0)).collect();
            let flat = |x: &[Vec<f64>]| x.concat();
            let direct: f64 = w.iter().zip(&mv).map(|(a, b)| dot(a, b)).sum();
            assert!((mass_inner(&flat(&w), &flat(&v), 3, 0.1) - direct).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_data_gives_zero_costate() {
        let k = GaussianKernel::new(1.0).unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let q0 = PhaseState::at_rest(2, vec![0.0, 0.0, 1.0, 0.5]).unwrap();
        let u = ControlPath::zeros(grid, 4);
        let traj = integrate_geodesic(&q0, grid, &k).unwrap();
        // single observation matched exactly
        let obs = ObservationSet::new(
            2,
            vec![Observation {
                time: 0.5,
                points: q0.x.clone(),
            }],
        )
        .unwrap();
        let p = integrate_costate(&traj, &u, &obs, &Euclidean { weight: 1.0 }, 10.0, &k).unwrap();
        assert!(p.values.iter().flatten().all(|v| *v == 0.0));
        assert!(p.jumps.iter().all(|(_, j)| j.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn matched_observation_leaves_tail_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = GaussianKernel::new(1.0).unwrap();
        let inst = instance(&mut rng, 3, 2, 10);
        let traj = integrate_controlled_for(&inst, &k);
        // second observation exactly on the trajectory
        let mut entries = inst.obs.entries().to_vec();
        entries[1].points = traj.states[20].x.clone();
        let obs = ObservationSet::new(2, entries).unwrap();
        let p = integrate_costate(&traj, &inst.u, &obs, &Euclidean { weight: 1.0 }, 2.0, &k).unwrap();
        for j in 10..=20 {
            assert!(p.values[j].iter().all(|v| *v == 0.0), "node {j}");
        }
        assert!(p.values[9].iter().any(|v| *v != 0.0));
        let jump = &p.jumps.iter().find(|(j, _)| *j == 10).unwrap().1;
        let left = p.left_value(10);
        for c in 0..left.len() {
            assert_eq!(left[c] - p.values[10][c], jump[c]);
        }
    }

    fn integrate_controlled_for(inst: &Instance, k: &dyn Kernel) -> Trajectory {
        crate::dynamics::integrate_controlled(&inst.q0, &inst.u, k).unwrap()
    }

    #[test]
    fn initial_costate_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = GaussianKernel::new(0.9).unwrap();
        for m in metrics() {
            let inst = instance(&mut rng, 3, 3, 8);
            let traj = integrate_controlled_for(&inst, &k);
            let p = integrate_costate(&traj, &inst.u, &inst.obs, m.as_ref(), 3.0, &k).unwrap();
            let p0 = p.left_value(0);
            let scale = p0.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            let len = inst.q0.phase_len();
            let e = 1e-6;
            for c in 0..2 * len {
                let eval = |s: f64| {
                    let mut q = inst.q0.clone();
                    if c < len {
                        q.x[c] += s;
                    } else {
                        q.p[c - len] += s;
                    }
                    let (a, b, _) = objective_value(&q, &inst.u, &inst.obs, m.as_ref(), 3.0, &k).unwrap();
                    a + b
                };
                let fd = (eval(e) - eval(-e)) / (2.0 * e);
                assert!(
                    (fd - p0[c]).abs() / scale < 1e-5,
                    "{} component {c}: {fd} vs {}",
                    m.name(),
                    p0[c]
                );
            }
        }
    }

    #[test]
    fn directional_derivatives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = GaussianKernel::new(0.9).unwrap();
        for m in metrics() {
            let inst = instance(&mut rng, 4, 3, 6);
            let (g, diag) = objective_gradient(&inst.q0, &inst.u, &inst.obs, m.as_ref(), 3.0, &k).unwrap();
            assert!((diag.objective - total(&inst, &inst.q0.p, &inst.u, m.as_ref(), &k)).abs() < 1e-12);
            for _ in 0..20 {
                let dp = rand_vec(&mut rng, 8, 1.0);
                let du = ControlPath::new(
                    inst.u.grid,
                    (0..inst.u.samples.len()).map(|_| rand_vec(&mut rng, 8, 1.0)).collect(),
                )
                .unwrap();
                let e = 1e-6;
                let shifted = |s: f64| {
                    let p: Vec<f64> = inst.q0.p.iter().zip(&dp).map(|(a, b)| a + s * b).collect();
                    let samples = inst
                        .u
                        .samples
                        .iter()
                        .zip(&du.samples)
                        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + s * y).collect())
                        .collect();
                    total(
                        &inst,
                        &p,
                        &ControlPath::new(inst.u.grid, samples).unwrap(),
                        m.as_ref(),
                        &k,
                    )
                };
                let fd = (shifted(e) - shifted(-e)) / (2.0 * e);
                let an = g.directional(&dp, &du);
                assert!(
                    (fd - an).abs() / an.abs().max(1e-8) < 1e-5,
                    "{}: {fd} vs {an}",
                    m.name()
                );
            }
        }
    }

    #[test]
    fn costate_pairing_equals_linearized_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = GaussianKernel::new(0.9).unwrap();
        for m in metrics() {
            let inst = instance(&mut rng, 3, 2, 10);
            let traj = integrate_controlled_for(&inst, &k);
            let (g, diag) = objective_gradient(&inst.q0, &inst.u, &inst.obs, m.as_ref(), 3.0, &k).unwrap();
            let left0 = diag.costate.left_value(0);
            for _ in 0..5 {
                let dq0 = rand_vec(&mut rng, 12, 1.0);
                let du = ControlPath::new(
                    inst.u.grid,
                    (0..inst.u.samples.len()).map(|_| rand_vec(&mut rng, 6, 1.0)).collect(),
                )
                .unwrap();
                let lin =
                    linearized_objective_derivative(&traj, &inst.u, &dq0, &du, &inst.obs, m.as_ref(), 3.0, &k).unwrap();
                let dual = dot(&left0, &dq0) + g.raw_u.iter().zip(&du.samples).map(|(a, b)| dot(a, b)).sum::<f64>();
                assert!((lin - dual).abs() / lin.abs() < 1e-6, "{}: {lin} vs {dual}", m.name());
            }
        }
    }

    #[test]
    fn linearization_matches_nonlinear_resolve() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let k = GaussianKernel::new(0.8).unwrap();
        let inst = instance(&mut rng, 4, 1, 30);
        let traj = integrate_controlled_for(&inst, &k);
        let dq0 = rand_vec(&mut rng, 16, 1.0);
        let du = ControlPath::new(
            inst.u.grid,
            (0..inst.u.samples.len()).map(|_| rand_vec(&mut rng, 8, 1.0)).collect(),
        )
        .unwrap();
        let lin = integrate_linearized(&traj, &inst.u, &dq0, &du, &k).unwrap();
        let mut errs = Vec::new();
        for e in [1e-3, 1e-4] {
            let q = PhaseState::new(
                2,
                inst.q0.x.iter().zip(&dq0[..8]).map(|(a, b)| a + e * b).collect(),
                inst.q0.p.iter().zip(&dq0[8..]).map(|(a, b)| a + e * b).collect(),
            )
            .unwrap();
            let samples = inst
                .u
                .samples
                .iter()
                .zip(&du.samples)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + e * y).collect())
                .collect();
            let pert = crate::dynamics::integrate_controlled(&q, &ControlPath::new(inst.u.grid, samples).unwrap(), &k)
                .unwrap();
            let mut worst = 0.0_f64;
            for (j, s) in pert.states.iter().enumerate() {
                let base = &traj.states[j];
                for c in 0..8 {
                    worst = worst.max(((s.x[c] - base.x[c]) / e - lin[j][c]).abs());
                    worst = worst.max(((s.p[c] - base.p[c]) / e - lin[j][8 + c]).abs());
                }
            }
            errs.push(worst);
        }
        assert!(errs[0] < 1e-1 && errs[1] < 1e-2, "{errs:?}");
        let ratio = errs[0] / errs[1];
        assert!((5.0..20.0).contains(&ratio), "{errs:?}");
    }

    #[test]
    fn linearization_is_trivial_when_unperturbed_or_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let k = GaussianKernel::new(1.0).unwrap();
        let inst = instance(&mut rng, 3, 1, 10);
        let traj = integrate_controlled_for(&inst, &k);
        let zero = ControlPath::zeros(inst.u.grid, 6);
        let lin = integrate_linearized(&traj, &inst.u, &[0.0; 12], &zero, &k).unwrap();
        assert!(lin.iter().flatten().all(|v| *v == 0.0));

        // single landmark: δẍ = δu
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let q0 = PhaseState::new(2, vec![0.3, 0.1], vec![0.5, -0.2]).unwrap();
        let u = ControlPath::constant(grid, vec![0.4, 0.1]);
        let traj = crate::dynamics::integrate_controlled(&q0, &u, &k).unwrap();
        let du = ControlPath::constant(grid, vec![0.6, -1.0]);
        let dq0 = [0.1, 0.2, -0.3, 0.4];
        let lin = integrate_linearized(&traj, &u, &dq0, &du, &k).unwrap();
        for (j, v) in lin.iter().enumerate() {
            let t = grid.node(j);
            for a in 0..2 {
                let x = dq0[a] + dq0[2 + a] * t + 0.5 * du.samples[0][a] * t * t;
                let p = dq0[2 + a] + du.samples[0][a] * t;
                assert!((v[a] - x).abs() < 1e-13 && (v[2 + a] - p).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn zero_gradient_on_exact_geodesic_data() {
        let k = GaussianKernel::new(1.0).unwrap();
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let q0 = PhaseState::new(
            2,
            vec![0.0, 0.0, 1.0, 0.0, 0.5, 0.8],
            vec![0.3, 0.1, -0.2, 0.4, 0.0, -0.3],
        )
        .unwrap();
        let traj = integrate_geodesic(&q0, grid, &k).unwrap();
        let obs = ObservationSet::new(
            2,
            [10, 25, 40]
                .iter()
                .map(|j| Observation {
                    time: grid.node(*j),
                    points: traj.states[*j].x.clone(),
                })
                .collect(),
        )
        .unwrap();
        let u = ControlPath::zeros(grid, 6);
        let (g, diag) = objective_gradient(&q0, &u, &obs, &Euclidean { weight: 1.0 }, 100.0, &k).unwrap();
        assert_eq!(diag.objective, 0.0);
        assert_eq!(g.control_residual(), 0.0);
        assert_eq!(g.p0_residual(), 0.0);
    }

    #[test]
    fn costate_is_linear_in_residuals_for_euclidean_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let k = GaussianKernel::new(1.0).unwrap();
        let inst = instance(&mut rng, 3, 3, 8);
        let traj = integrate_controlled_for(&inst, &k);
        let m = Euclidean { weight: 1.0 };
        let base = integrate_costate(&traj, &inst.u, &inst.obs, &m, 2.0, &k).unwrap();
        let grid = traj.grid;
        let doubled: Vec<Observation> = inst
            .obs
            .entries()
            .iter()
            .map(|o| {
                let x = &traj.states[grid.node_index(o.time, 1e-9).unwrap()].x;
                Observation {
                    time: o.time,
                    points: x.iter().zip(&o.points).map(|(a, b)| a - 2.0 * (a - b)).collect(),
                }
            })
            .collect();
        let obs2 = ObservationSet::new(2, doubled).unwrap();
        let twice = integrate_costate(&traj, &inst.u, &obs2, &m, 2.0, &k).unwrap();
        for (a, b) in base.values.iter().flatten().zip(twice.values.iter().flatten()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn costate_vanishes_after_last_observation() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let k = GaussianKernel::new(1.0).unwrap();
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let mut inst = instance(&mut rng, 3, 2, 10);
        inst.u = ControlPath::new(grid, (0..=40).map(|_| rand_vec(&mut rng, 6, 0.5)).collect()).unwrap();
        // observations at t = 0.25 and t = 0.5, horizon 1
        let entries = inst
            .obs
            .entries()
            .iter()
            .map(|o| Observation {
                time: 0.5 * o.time,
                points: o.points.clone(),
            })
            .collect();
        inst.obs = ObservationSet::new(2, entries).unwrap();
        let traj = integrate_controlled_for(&inst, &k);
        let p = integrate_costate(&traj, &inst.u, &inst.obs, &Euclidean { weight: 1.0 }, 2.0, &k).unwrap();
        for j in 20..=40 {
            assert!(p.momentum(j).iter().all(|v| *v == 0.0));
        }
        assert!(p.momentum(19).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn off_grid_observation_is_a_configuration_error() {
        let k = GaussianKernel::new(1.0).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let q0 = PhaseState::at_rest(1, vec![0.0]).unwrap();
        let obs = ObservationSet::new(
            1,
            vec![Observation {
                time: 0.33,
                points: vec![1.0],
            }],
        )
        .unwrap();
        let u = ControlPath::zeros(grid, 1);
        let err = objective_gradient(&q0, &u, &obs, &Euclidean { weight: 1.0 }, 1.0, &k).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
