//! First-order minimizers: steepest descent with Armijo backtracking and L-BFGS with a weak
//! Wolfe line search.
//!
//! Objectives report their gradient as a Riesz representer for an inner product of their
//! choosing (`Objective::inner`), so that step directions are meaningful for
//! function-valued unknowns.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dynamics::dot;
use crate::error::{Error, Result};
use crate::registry::Registry;

pub trait Objective {
    fn dim(&self) -> usize;

    /// Value and gradient at `z`.
    fn evaluate(&self, z: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Inner product in which `evaluate` returns the gradient.
    fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        dot(a, b)
    }

    /// Norm used by the stopping test; defaults to the sup norm.
    fn gradient_norm(&self, g: &[f64]) -> f64 {
        g.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub max_iterations: usize,
    /// Gradient-norm tolerance.
    pub tolerance: f64,
    /// Scale the tolerance by `max(1, J(z0))`.
    pub relative_tolerance: bool,
    /// Sufficient-decrease constant.
    pub armijo: f64,
    /// Curvature constant of the weak Wolfe conditions (L-BFGS only).
    pub curvature: f64,
    /// Backtracking factor.
    pub shrink: f64,
    pub initial_step: f64,
    pub min_step: f64,
    /// Number of curvature pairs kept by L-BFGS.
    pub memory: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            tolerance: 1e-8,
            relative_tolerance: true,
            armijo: 1e-4,
            curvature: 0.9,
            shrink: 0.5,
            initial_step: 1.0,
            min_step: 1e-18,
            memory: 300,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::validation(format!("optimizer.{field}"), msg));
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return bad("tolerance", "must be finite and non-negative");
        }
        if !(self.armijo > 0.0 && self.armijo < 0.5) {
            return bad("armijo", "must lie in (0, 0.5)");
        }
        if !(self.curvature > self.armijo && self.curvature < 1.0) {
            return bad("curvature", "must lie in (armijo, 1)");
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("shrink", "must lie in (0, 1)");
        }
        if !(self.initial_step.is_finite() && self.initial_step > 0.0) {
            return bad("initial_step", "must be positive");
        }
        if !(self.min_step > 0.0 && self.min_step < self.initial_step) {
            return bad("min_step", "must be positive and below initial_step");
        }
        if self.memory == 0 {
            return bad("memory", "must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::GradientTolerance => "gradient norm below tolerance",
            StopReason::MaxIterations => "maximum number of iterations reached",
            StopReason::LineSearchFailed => "line search found no acceptable step",
        })
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    /// Best iterate found.
    pub z: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub gradient_norm: f64,
    /// Objective value at every accepted iterate, starting with `z0`.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: StopReason,
}

impl OptimizeOutcome {
    pub fn converged(&self) -> bool {
        self.reason == StopReason::GradientTolerance
    }
}

pub trait Optimizer: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn minimize(&self, obj: &dyn Objective, z0: Vec<f64>) -> Result<OptimizeOutcome>;
}

struct Point {
    z: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
}

/// Outcome of one line search along `d` from `cur`.
enum Search {
    Accepted(Point, f64),
    Failed,
}

/// Trial step: `Some((point, directional derivative))` when the objective is finite there.
fn trial(obj: &dyn Objective, cur: &Point, d: &[f64], alpha: f64, evals: &mut usize) -> Result<Option<(Point, f64)>> {
    let z: Vec<f64> = cur.z.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
    *evals += 1;
    match obj.evaluate(&z) {
        Ok((value, grad)) if value.is_finite() => {
            let ds = obj.inner(&grad, d);
            Ok(Some((Point { z, value, grad }, ds)))
        }
        Ok(_) => Ok(None),
        Err(e) if e.is_numerical() => Ok(None),
        Err(e) => Err(e),
    }
}

/// Once the decrease is below rounding of `J`, a trial that does not increase `J` beyond
/// rounding and has a small directional derivative is accepted (approximate Wolfe).
fn approximately_flat(cur: &Point, value: f64, ds: f64, slope: f64) -> bool {
    value <= cur.value + 1e-12 * cur.value.abs() && ds >= 0.9 * slope && ds <= -0.8 * slope
}

/// Backtracking search on sufficient decrease.
fn backtrack(
    obj: &dyn Objective,
    cur: &Point,
    d: &[f64],
    slope: f64,
    first: f64,
    s: &OptimizerSettings,
    evals: &mut usize,
) -> Result<Search> {
    let mut alpha = first;
    while alpha >= s.min_step {
        if let Some((next, ds)) = trial(obj, cur, d, alpha, evals)? {
            if next.value <= cur.value + s.armijo * alpha * slope || approximately_flat(cur, next.value, ds, slope) {
                return Ok(Search::Accepted(next, alpha));
            }
        }
        alpha *= s.shrink;
    }
    Ok(Search::Failed)
}

/// Weak Wolfe search by expansion and bisection. Falls back to the last trial with
/// sufficient decrease when the bracket collapses.
fn wolfe(
    obj: &dyn Objective,
    cur: &Point,
    d: &[f64],
    slope: f64,
    first: f64,
    s: &OptimizerSettings,
    evals: &mut usize,
) -> Result<Search> {
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    let mut alpha = first;
    let mut fallback: Option<(Point, f64)> = None;
    for _ in 0..100 {
        if alpha < s.min_step || (hi.is_finite() && hi - lo <= s.min_step) {
            break;
        }
        match trial(obj, cur, d, alpha, evals)? {
            None => hi = alpha,
            Some((next, ds)) => {
                if next.value > cur.value + s.armijo * alpha * slope {
                    if approximately_flat(cur, next.value, ds, slope) {
                        return Ok(Search::Accepted(next, alpha));
                    }
                    hi = alpha;
                } else if ds < s.curvature * slope {
                    lo = alpha;
                    fallback = Some((next, alpha));
                } else {
                    return Ok(Search::Accepted(next, alpha));
                }
            }
        }
        alpha = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * alpha };
    }
    Ok(match fallback {
        Some((p, a)) => Search::Accepted(p, a),
        None => Search::Failed,
    })
}

struct Driver<'a> {
    obj: &'a dyn Objective,
    tol: f64,
    history: Vec<f64>,
    evals: usize,
}

impl<'a> Driver<'a> {
    fn start(obj: &'a dyn Objective, z0: Vec<f64>, settings: &OptimizerSettings) -> Result<(Self, Point)> {
        settings.validate()?;
        if z0.len() != obj.dim() {
            return Err(Error::DimensionMismatch {
                expected: obj.dim(),
                actual: z0.len(),
                context: "initial iterate",
            });
        }
        let (value, grad) = obj.evaluate(&z0)?;
        if !value.is_finite() {
            return Err(Error::Domain("objective is not finite at the initial iterate".into()));
        }
        let tol = if settings.relative_tolerance {
            settings.tolerance * value.abs().max(1.0)
        } else {
            settings.tolerance
        };
        let d = Self {
            obj,
            tol,
            history: vec![value],
            evals: 1,
        };
        Ok((d, Point { z: z0, value, grad }))
    }

    fn finish(self, best: Point, iterations: usize, reason: StopReason) -> OptimizeOutcome {
        let gradient_norm = self.obj.gradient_norm(&best.grad);
        OptimizeOutcome {
            z: best.z,
            value: best.value,
            gradient: best.grad,
            gradient_norm,
            history: self.history,
            iterations,
            evaluations: self.evals,
            reason,
        }
    }
}

/// Steepest descent with Armijo backtracking.
#[derive(Debug, Clone)]
pub struct GradientDescent {
    pub settings: OptimizerSettings,
}

impl Optimizer for GradientDescent {
    fn name(&self) -> &'static str {
        "gradient-descent"
    }

    fn minimize(&self, obj: &dyn Objective, z0: Vec<f64>) -> Result<OptimizeOutcome> {
        let (mut drv, mut cur) = Driver::start(obj, z0, &self.settings)?;
        let mut step = self.settings.initial_step;
        for it in 0..self.settings.max_iterations {
            if obj.gradient_norm(&cur.grad) <= drv.tol {
                return Ok(drv.finish(cur, it, StopReason::GradientTolerance));
            }
            let d: Vec<f64> = cur.grad.iter().map(|v| -v).collect();
            let slope = obj.inner(&cur.grad, &d);
            match backtrack(obj, &cur, &d, slope, step, &self.settings, &mut drv.evals)? {
                Search::Accepted(next, alpha) => {
                    drv.history.push(next.value);
                    cur = next;
                    step = 2.0 * alpha;
                }
                Search::Failed => return Ok(drv.finish(cur, it, StopReason::LineSearchFailed)),
            }
        }
        let reason = if obj.gradient_norm(&cur.grad) <= drv.tol {
            StopReason::GradientTolerance
        } else {
            StopReason::MaxIterations
        };
        let iters = self.settings.max_iterations;
        Ok(drv.finish(cur, iters, reason))
    }
}

/// Limited-memory BFGS in the objective's inner product.
#[derive(Debug, Clone)]
pub struct Lbfgs {
    pub settings: OptimizerSettings,
}

impl Lbfgs {
    fn direction(obj: &dyn Objective, g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * obj.inner(s, &q);
            q.iter_mut().zip(y).for_each(|(qc, yc)| *qc -= a * yc);
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let scale = obj.inner(s, y) / obj.inner(y, y);
            q.iter_mut().for_each(|v| *v *= scale);
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * obj.inner(y, &q);
            q.iter_mut().zip(s).for_each(|(qc, sc)| *qc += (a - b) * sc);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

impl Optimizer for Lbfgs {
    fn name(&self) -> &'static str {
        "lbfgs"
    }

    fn minimize(&self, obj: &dyn Objective, z0: Vec<f64>) -> Result<OptimizeOutcome> {
        let (mut drv, mut cur) = Driver::start(obj, z0, &self.settings)?;
        let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
        for it in 0..self.settings.max_iterations {
            if obj.gradient_norm(&cur.grad) <= drv.tol {
                return Ok(drv.finish(cur, it, StopReason::GradientTolerance));
            }
            let mut d = Self::direction(obj, &cur.grad, &pairs);
            let mut slope = obj.inner(&cur.grad, &d);
            if !(slope < 0.0) {
                pairs.clear();
                d = cur.grad.iter().map(|v| -v).collect();
                slope = obj.inner(&cur.grad, &d);
            }
            let first = if pairs.is_empty() {
                // unit-free first step: move by about initial_step in norm
                self.settings.initial_step / obj.inner(&d, &d).sqrt().max(1.0)
            } else {
                1.0
            };
            let found = match wolfe(obj, &cur, &d, slope, first, &self.settings, &mut drv.evals)? {
                Search::Failed if !pairs.is_empty() => {
                    // retry from steepest descent with fresh memory
                    pairs.clear();
                    d = cur.grad.iter().map(|v| -v).collect();
                    slope = obj.inner(&cur.grad, &d);
                    let first = self.settings.initial_step / obj.inner(&d, &d).sqrt().max(1.0);
                    wolfe(obj, &cur, &d, slope, first, &self.settings, &mut drv.evals)?
                }
                other => other,
            };
            match found {
                Search::Accepted(next, _) => {
                    let s: Vec<f64> = next.z.iter().zip(&cur.z).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = next.grad.iter().zip(&cur.grad).map(|(a, b)| a - b).collect();
                    let sy = obj.inner(&s, &y);
                    if sy > 1e-16 * obj.inner(&y, &y).max(f64::MIN_POSITIVE) && sy.is_finite() {
                        if pairs.len() == self.settings.memory {
                            pairs.pop_front();
                        }
                        pairs.push_back((s, y, 1.0 / sy));
                    }
                    drv.history.push(next.value);
                    cur = next;
                }
                Search::Failed => return Ok(drv.finish(cur, it, StopReason::LineSearchFailed)),
            }
        }
        let reason = if obj.gradient_norm(&cur.grad) <= drv.tol {
            StopReason::GradientTolerance
        } else {
            StopReason::MaxIterations
        };
        let iters = self.settings.max_iterations;
        Ok(drv.finish(cur, iters, reason))
    }
}

pub fn optimizer_registry() -> Registry<OptimizerSettings, dyn Optimizer> {
    let mut reg = Registry::new("optimizer");
    reg.register("gradient-descent", |s: &OptimizerSettings| {
        s.validate()?;
        Ok(Box::new(GradientDescent { settings: *s }) as Box<dyn Optimizer>)
    });
    reg.register("lbfgs", |s: &OptimizerSettings| {
        s.validate()?;
        Ok(Box::new(Lbfgs { settings: *s }) as Box<dyn Optimizer>)
    });
    reg
}
