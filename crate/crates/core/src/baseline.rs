//! Piecewise-geodesic interpolation and the trajectory-error convergence harness.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;

use crate::adjoint::impulsive_objective_gradient;
use crate::dynamics::{gradients_raw, h0_raw, Impulses, PhaseState, RunningCost, TimeGrid, Trajectory};
use crate::error::{check_len, Error, Result};
use crate::estimator::{fit, SplineProblem};
use crate::kernels::Kernel;
use crate::observations::{Observation, ObservationSet};
use crate::optimize::{Objective, StopReason};
use crate::registry::Registry;

/// Errors at or below this value are excluded from slope fits.
pub const ERROR_FLOOR: f64 = 1e-8;

/// Running cost `H0(x, p)`; its integral is `½∫|v_t|²_V dt`.
struct KineticEnergy<'a> {
    kernel: &'a dyn Kernel,
    dim: usize,
}

impl RunningCost for KineticEnergy<'_> {
    fn value(&self, x: &[f64], p: &[f64], _u: &[f64]) -> Result<f64> {
        Ok(h0_raw(x, p, self.dim, self.kernel))
    }

    fn gradient(&self, x: &[f64], p: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut gx = vec![0.0; x.len()];
        let mut gp = vec![0.0; x.len()];
        gradients_raw(x, p, self.dim, self.kernel, &mut gx, &mut gp);
        Ok((gx, gp, vec![0.0; u.len()]))
    }
}

#[derive(Debug, Clone)]
pub struct PiecewiseGeodesicSolution {
    pub p0: Vec<f64>,
    /// `(node, jump)` at every observation node strictly inside the grid.
    pub jumps: Vec<(usize, Vec<f64>)>,
    pub traj: Trajectory,
    pub history: Vec<f64>,
    pub objective: f64,
    /// `∫H0 dt = ½∫|v|²_V dt`.
    pub energy: f64,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub reason: StopReason,
}

impl PiecewiseGeodesicSolution {
    pub fn converged(&self) -> bool {
        self.reason == StopReason::GradientTolerance
    }
}

struct PiecewiseObjective<'a> {
    prob: &'a SplineProblem,
    nodes: Vec<usize>,
}

impl PiecewiseObjective<'_> {
    fn unpack(&self, z: &[f64]) -> (PhaseState, Impulses) {
        let len = self.prob.phase_len();
        let q0 = PhaseState {
            dim: self.prob.dim,
            x: self.prob.x0.clone(),
            p: z[..len].to_vec(),
        };
        let impulses = self
            .nodes
            .iter()
            .zip(z[len..].chunks(len))
            .map(|(j, c)| (*j, c.to_vec()))
            .collect();
        (q0, impulses)
    }

    fn run(&self, z: &[f64]) -> Result<crate::adjoint::ImpulsiveEvaluation> {
        let (q0, impulses) = self.unpack(z);
        let cost = KineticEnergy {
            kernel: self.prob.kernel.as_ref(),
            dim: self.prob.dim,
        };
        impulsive_objective_gradient(
            &q0,
            self.prob.grid,
            &impulses,
            &self.prob.obs,
            self.prob.gamma,
            &cost,
            self.prob.kernel.as_ref(),
        )
    }
}

impl Objective for PiecewiseObjective<'_> {
    fn dim(&self) -> usize {
        self.prob.phase_len() * (1 + self.nodes.len())
    }

    fn evaluate(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let ev = self.run(z)?;
        let mut g = ev.grad_p0;
        for gi in ev.grad_impulses {
            g.extend(gi);
        }
        Ok((ev.running + ev.misfit, g))
    }
}

/// Fits geodesic arcs between observations, joined by momentum jumps at the observation
/// nodes, minimizing `∫H0 dt + γ Σ_k |x_{t_k} − x^D_k|²` over `p0` and the jumps.
pub fn fit_piecewise_geodesic(prob: &SplineProblem) -> Result<PiecewiseGeodesicSolution> {
    prob.validate()?;
    let n_steps = prob.grid.steps();
    let nodes: Vec<usize> = prob
        .obs
        .node_indices(&prob.grid)?
        .into_iter()
        .filter(|j| *j > 0 && *j < n_steps)
        .collect();
    let obj = PiecewiseObjective { prob, nodes };
    let out = prob.optimizer.minimize(&obj, vec![0.0; obj.dim()])?;
    let ev = obj.run(&out.z)?;
    let (q0, impulses) = obj.unpack(&out.z);
    let residuals = prob
        .obs
        .node_indices(&prob.grid)?
        .iter()
        .zip(prob.obs.entries())
        .map(|(j, o)| {
            let x = &ev.trajectory.states[*j].x;
            x.iter()
                .zip(&o.points)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(PiecewiseGeodesicSolution {
        p0: q0.p,
        jumps: impulses.into_iter().collect(),
        traj: ev.trajectory,
        history: out.history,
        objective: ev.running + ev.misfit,
        energy: ev.running,
        residuals,
        iterations: out.iterations,
        reason: out.reason,
    })
}

/// `(∫_{t_a}^{t_b} |x_t − x^ref_t|² dt)^{1/2}` by the trapezoidal rule on the nodes of
/// `traj.grid`. `reference` holds one configuration per node.
pub fn l2_error(traj: &Trajectory, reference: &[Vec<f64>], t_a: f64, t_b: f64) -> Result<f64> {
    check_len(traj.states.len(), reference.len(), "reference samples vs grid nodes")?;
    let grid = traj.grid;
    let a = grid
        .node_index(t_a, 1e-9)
        .ok_or_else(|| Error::Config(format!("window start {t_a} is not a grid node")))?;
    let b = grid
        .node_index(t_b, 1e-9)
        .ok_or_else(|| Error::Config(format!("window end {t_b} is not a grid node")))?;
    if b < a {
        return Err(Error::Config(format!("empty error window [{t_a}, {t_b}]")));
    }
    let sq: Vec<f64> = (a..=b)
        .map(|j| {
            let x = &traj.states[j].x;
            check_len(x.len(), reference[j].len(), "reference configuration size")?;
            Ok(x.iter().zip(&reference[j]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
        })
        .collect::<Result<_>>()?;
    let h = grid.dt();
    let integral: f64 = sq.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum();
    Ok(integral.sqrt())
}

/// A known landmark evolution `t ↦ x_t` on `[0, horizon]`.
pub trait Evolution: Sync {
    fn dim(&self) -> usize;

    fn horizon(&self) -> f64;

    fn positions(&self, t: f64) -> Vec<f64>;
}

/// An interpolation method compared in convergence studies.
pub trait Interpolator: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn fit_path(&self, prob: &SplineProblem) -> Result<PathFit>;
}

/// A fitted path with its stopping status.
#[derive(Debug, Clone)]
pub struct PathFit {
    pub traj: Trajectory,
    pub converged: bool,
    /// Euler-Lagrange residual, for methods that have one.
    pub stationarity: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SplineInterpolator;

impl Interpolator for SplineInterpolator {
    fn name(&self) -> &'static str {
        "spline"
    }

    fn fit_path(&self, prob: &SplineProblem) -> Result<PathFit> {
        let sol = fit(prob)?;
        Ok(PathFit {
            converged: sol.converged(),
            stationarity: Some(sol.euler_lagrange_residual()),
            traj: sol.traj,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PiecewiseInterpolator;

impl Interpolator for PiecewiseInterpolator {
    fn name(&self) -> &'static str {
        "piecewise"
    }

    fn fit_path(&self, prob: &SplineProblem) -> Result<PathFit> {
        let sol = fit_piecewise_geodesic(prob)?;
        Ok(PathFit {
            converged: sol.converged(),
            stationarity: None,
            traj: sol.traj,
        })
    }
}

pub fn interpolator_registry() -> Registry<(), dyn Interpolator> {
    let mut reg = Registry::new("interpolation method");
    reg.register("spline", |_: &()| {
        Ok(Box::new(SplineInterpolator) as Box<dyn Interpolator>)
    });
    reg.register("piecewise", |_: &()| {
        Ok(Box::new(PiecewiseInterpolator) as Box<dyn Interpolator>)
    });
    reg
}

/// Problem template for a convergence study; observations are filled in per row.
pub struct StudySetup<'a> {
    pub truth: &'a dyn Evolution,
    /// Builds the problem from the initial configuration, the observations and the grid.
    pub problem: &'a (dyn Fn(Vec<f64>, ObservationSet, TimeGrid) -> Result<SplineProblem> + Sync),
    pub steps_per_gap: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub method: String,
    pub m: usize,
    pub error: Option<f64>,
    pub runtime_seconds: f64,
    pub converged: bool,
    pub stationarity: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlopeFit {
    Slope(f64),
    Degenerate(String),
}

impl SlopeFit {
    pub fn value(&self) -> Option<f64> {
        match self {
            SlopeFit::Slope(s) => Some(*s),
            SlopeFit::Degenerate(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceStudy {
    pub rows: Vec<StudyRow>,
    pub slope: SlopeFit,
}

/// Least-squares slope of `log E` against `log M` over rows with `E > ERROR_FLOOR`.
pub fn loglog_slope(rows: &[StudyRow]) -> SlopeFit {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| {
            r.error
                .filter(|e| *e > ERROR_FLOOR)
                .map(|e| ((r.m as f64).ln(), e.ln()))
        })
        .collect();
    if pts.len() < 2 {
        return SlopeFit::Degenerate(format!("{} usable rows above the error floor", pts.len()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return SlopeFit::Degenerate("all usable rows share one M".into());
    }
    // E ∝ M^{-α}
    SlopeFit::Slope(-sxy / sxx)
}

/// `M` observations at `t_k = k·T/M`, `k = 1..M`, sampled from the truth, with the grid used
/// to fit them. The configuration at `t = 0` is the known initial condition, so the spacing
/// is `T/M`.
pub fn sample_observations(
    truth: &dyn Evolution,
    m: usize,
    steps_per_gap: usize,
) -> Result<(ObservationSet, TimeGrid)> {
    if m == 0 {
        return Err(Error::Config("convergence rows need at least 1 observation".into()));
    }
    let horizon = truth.horizon();
    let grid = TimeGrid::new(horizon, steps_per_gap * m)?;
    let entries = (0..m)
        .map(|k| {
            let t = grid.node((k + 1) * steps_per_gap);
            Observation {
                time: t,
                points: truth.positions(t),
            }
        })
        .collect();
    Ok((ObservationSet::new(truth.dim(), entries)?, grid))
}

/// Fits `method` for every `M` in `m_list` and measures the L² error against the truth
/// over `[0, T]`. Rows run in parallel; a failing row is recorded and excluded.
pub fn convergence_study(
    setup: &StudySetup<'_>,
    m_list: &[usize],
    method: &dyn Interpolator,
) -> Result<ConvergenceStudy> {
    if m_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("observation counts must be strictly increasing".into()));
    }
    let rows: Vec<StudyRow> = m_list
        .par_iter()
        .map(|&m| {
            let start = Instant::now();
            let res = (|| -> Result<(f64, PathFit)> {
                let (obs, grid) = sample_observations(setup.truth, m, setup.steps_per_gap)?;
                let x0 = setup.truth.positions(0.0);
                let prob = (setup.problem)(x0, obs, grid)?;
                let fitted = method.fit_path(&prob)?;
                let reference: Vec<Vec<f64>> = grid.nodes().map(|t| setup.truth.positions(t)).collect();
                Ok((l2_error(&fitted.traj, &reference, 0.0, grid.horizon())?, fitted))
            })();
            let runtime_seconds = start.elapsed().as_secs_f64();
            match res {
                Ok((e, fitted)) => StudyRow {
                    method: method.name().into(),
                    m,
                    error: Some(e),
                    runtime_seconds,
                    converged: fitted.converged,
                    stationarity: fitted.stationarity,
                    failure: None,
                },
                Err(err) => StudyRow {
                    method: method.name().into(),
                    m,
                    error: None,
                    runtime_seconds,
                    converged: false,
                    stationarity: None,
                    failure: Some(err.to_string()),
                },
            }
        })
        .collect();
    let slope = loglog_slope(&rows);
    Ok(ConvergenceStudy { rows, slope })
}

/// Writes rows as CSV with columns `method,M,E,runtime_seconds` (failed rows leave `E` empty).
pub fn write_study_csv<W: std::io::Write>(rows: &[StudyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "M", "E", "runtime_seconds"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.m.to_string(),
            r.error.map(|e| format!("{e:e}")).unwrap_or_default(),
            format!("{:.6}", r.runtime_seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}
