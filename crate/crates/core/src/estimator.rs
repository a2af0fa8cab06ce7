//! Shape-spline estimation: minimize `J(p0, u)` over initial momentum and control.

use std::sync::Arc;

use crate::adjoint::{mass_inner, objective_gradient, objective_value, CostateTrajectory, ObjectiveGradient};
use crate::dynamics::{dot, integrate_geodesic, ControlPath, PhaseState, TimeGrid, Trajectory};
use crate::error::{check_len, Error, Result};
use crate::kernels::SharedKernel;
use crate::metric::ControlMetric;
use crate::observations::{default_steps, ObservationSet};
use crate::optimize::{Lbfgs, Objective, Optimizer, OptimizerSettings, StopReason};

/// Steps per smallest gap between observation times used by the default grid.
pub const STEPS_PER_GAP: usize = 20;

#[derive(Debug, Clone)]
pub struct SplineProblem {
    /// Fixed initial configuration at `t = 0`.
    pub x0: Vec<f64>,
    pub dim: usize,
    pub obs: ObservationSet,
    pub kernel: SharedKernel,
    pub metric: Arc<dyn ControlMetric>,
    pub gamma: f64,
    pub grid: TimeGrid,
    pub optimizer: Arc<dyn Optimizer>,
}

impl SplineProblem {
    /// Problem solved with L-BFGS under default settings.
    pub fn new(
        x0: Vec<f64>,
        obs: ObservationSet,
        kernel: SharedKernel,
        metric: Arc<dyn ControlMetric>,
        gamma: f64,
        grid: TimeGrid,
    ) -> Result<Self> {
        let prob = Self {
            dim: obs.dim(),
            x0,
            obs,
            kernel,
            metric,
            gamma,
            grid,
            optimizer: Arc::new(Lbfgs {
                settings: OptimizerSettings::default(),
            }),
        };
        prob.validate()?;
        Ok(prob)
    }

    pub fn with_optimizer(mut self, optimizer: Arc<dyn Optimizer>) -> Self {
        self.optimizer = optimizer;
        self
    }

    /// Grid over `[0, t_M]` with `STEPS_PER_GAP` steps in the smallest observation gap.
    pub fn default_grid(obs: &ObservationSet) -> Result<TimeGrid> {
        let horizon = obs.last_time();
        let times = obs.times();
        TimeGrid::new(horizon, default_steps(&times, horizon, STEPS_PER_GAP))
    }

    pub fn validate(&self) -> Result<()> {
        check_len(self.obs.phase_len(), self.x0.len(), "initial configuration size")?;
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(
                "initial configuration has a non-finite coordinate".into(),
            ));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Domain(format!(
                "data weight must be positive, got {}",
                self.gamma
            )));
        }
        self.obs.node_indices(&self.grid)?;
        Ok(())
    }

    pub fn phase_len(&self) -> usize {
        self.x0.len()
    }

    fn unpack(&self, z: &[f64]) -> Result<(PhaseState, ControlPath)> {
        let len = self.phase_len();
        check_len(len * (self.grid.steps() + 2), z.len(), "packed unknowns")?;
        let q0 = PhaseState {
            dim: self.dim,
            x: self.x0.clone(),
            p: z[..len].to_vec(),
        };
        let samples = z[len..].chunks(len).map(|c| c.to_vec()).collect();
        Ok((
            q0,
            ControlPath {
                grid: self.grid,
                samples,
            },
        ))
    }
}

fn pack(p0: &[f64], u: &ControlPath) -> Vec<f64> {
    let mut z = p0.to_vec();
    for s in &u.samples {
        z.extend_from_slice(s);
    }
    z
}

/// `J(p0, u)`: integrated control cost plus `γ Σ_k |x_{t_k} − x^D_k|²`.
pub fn objective(p0: &[f64], u: &ControlPath, prob: &SplineProblem) -> Result<f64> {
    check_len(prob.phase_len(), p0.len(), "initial momentum")?;
    let q0 = PhaseState::new(prob.dim, prob.x0.clone(), p0.to_vec())?;
    let (c, d, _) = objective_value(
        &q0,
        u,
        &prob.obs,
        prob.metric.as_ref(),
        prob.gamma,
        prob.kernel.as_ref(),
    )?;
    Ok(c + d)
}

struct SplineObjective<'a> {
    prob: &'a SplineProblem,
}

impl Objective for SplineObjective<'_> {
    fn dim(&self) -> usize {
        self.prob.phase_len() * (self.prob.grid.steps() + 2)
    }

    fn evaluate(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (q0, u) = self.prob.unpack(z)?;
        let (g, diag) = objective_gradient(
            &q0,
            &u,
            &self.prob.obs,
            self.prob.metric.as_ref(),
            self.prob.gamma,
            self.prob.kernel.as_ref(),
        )?;
        Ok((diag.objective, pack(&g.grad_p0, &g.grad_u)))
    }

    /// `a_p0·b_p0 + ∫ a_u·b_u dt` for piecewise-linear controls.
    fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        let len = self.prob.phase_len();
        dot(&a[..len], &b[..len]) + mass_inner(&a[len..], &b[len..], len, self.prob.grid.dt())
    }
}

#[derive(Debug, Clone)]
pub struct SplineSolution {
    pub p0: Vec<f64>,
    pub u: ControlPath,
    pub traj: Trajectory,
    pub costate: CostateTrajectory,
    pub gradient: ObjectiveGradient,
    /// Objective after each accepted optimizer step.
    pub history: Vec<f64>,
    /// `|x_{t_k} − x^D_k|` per observation.
    pub residuals: Vec<f64>,
    pub objective: f64,
    pub control_cost: f64,
    pub data_misfit: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: StopReason,
}

impl SplineSolution {
    pub fn converged(&self) -> bool {
        self.reason == StopReason::GradientTolerance
    }

    /// Sup norm over time of the control gradient (`σ𝒦u + P^p` in L² form).
    pub fn euler_lagrange_residual(&self) -> f64 {
        self.gradient.control_residual()
    }

    /// `∫|u|² dt`.
    pub fn control_energy(&self) -> f64 {
        self.u.squared_l2()
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// Evaluates `(p0, u)` and assembles a solution record.
pub fn solution_at(
    prob: &SplineProblem,
    p0: Vec<f64>,
    u: ControlPath,
    history: Vec<f64>,
    iterations: usize,
    evaluations: usize,
    reason: StopReason,
) -> Result<SplineSolution> {
    let q0 = PhaseState::new(prob.dim, prob.x0.clone(), p0.clone())?;
    let (gradient, diag) = objective_gradient(
        &q0,
        &u,
        &prob.obs,
        prob.metric.as_ref(),
        prob.gamma,
        prob.kernel.as_ref(),
    )?;
    let nodes = prob.obs.node_indices(&prob.grid)?;
    let residuals = nodes
        .iter()
        .zip(prob.obs.entries())
        .map(|(j, o)| {
            let x = &diag.trajectory.states[*j].x;
            x.iter()
                .zip(&o.points)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(SplineSolution {
        p0,
        u,
        traj: diag.trajectory,
        costate: diag.costate,
        gradient,
        history,
        residuals,
        objective: diag.objective,
        control_cost: diag.control_cost,
        data_misfit: diag.data_misfit,
        iterations,
        evaluations,
        reason,
    })
}

/// Minimizes `J` jointly over `(p0, u)` starting from rest.
pub fn fit(prob: &SplineProblem) -> Result<SplineSolution> {
    prob.validate()?;
    let obj = SplineObjective { prob };
    let z0 = vec![0.0; obj.dim()];
    let out = prob.optimizer.minimize(&obj, z0)?;
    let (q0, u) = prob.unpack(&out.z)?;
    solution_at(prob, q0.p, u, out.history, out.iterations, out.evaluations, out.reason)
}

/// A trajectory whose grid starts at `offset` instead of 0.
#[derive(Debug, Clone)]
pub struct Extrapolation {
    pub offset: f64,
    pub trajectory: Trajectory,
}

impl Extrapolation {
    pub fn times(&self) -> Vec<f64> {
        self.trajectory.grid.nodes().map(|t| t + self.offset).collect()
    }
}

/// Geodesic continuation of a fitted spline.
///
/// For `t_end > T` the flow continues forward from the terminal state with zero control.
/// For `t_end < 0` it runs backward from `(x0, p0)`. The step is the fitting step, shrunk
/// so that a whole number of steps reaches `t_end`.
pub fn extrapolate(sol: &SplineSolution, t_end: f64, prob: &SplineProblem) -> Result<Extrapolation> {
    let horizon = prob.grid.horizon();
    let (span, start, backward) = if t_end > horizon {
        (t_end - horizon, sol.traj.last().clone(), false)
    } else if t_end < 0.0 {
        (-t_end, sol.traj.states[0].clone(), true)
    } else {
        return Err(Error::Config(format!(
            "extrapolation end {t_end} lies inside [0, {horizon}]"
        )));
    };
    let steps = ((span / prob.grid.dt()) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let grid = TimeGrid::new(span, steps)?;
    if !backward {
        let traj = integrate_geodesic(&start, grid, prob.kernel.as_ref())?;
        return Ok(Extrapolation {
            offset: horizon,
            trajectory: traj,
        });
    }
    // time reversal: (x, p) ↦ (x, −p)
    let flipped = PhaseState {
        dim: start.dim,
        x: start.x,
        p: start.p.iter().map(|v| -v).collect(),
    };
    let mut traj = integrate_geodesic(&flipped, grid, prob.kernel.as_ref())?;
    traj.states.reverse();
    for s in &mut traj.states {
        s.p.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(Extrapolation {
        offset: t_end,
        trajectory: traj,
    })
}
