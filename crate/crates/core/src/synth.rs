//! Synthetic landmark evolutions and datasets.
//!
//! Schedules:
//!
//! * Pinched ellipse: with `s = t/T`, landmark `i` moves along
//!   `r(s)·((1 − s)·(cos θ_i, sin θ_i) + s·P(θ_i))`, where
//!   `P(θ) = (1.5 cos θ, 0.8 sin θ (0.35 + 0.65 cos² θ))` and `r(s) = 1 + 0.3 s`.
//!   Default horizon `T = 3.8`, observations at `t_k = k·T/M` for `k = 1..M`.
//! * Rotating ellipse: `x_i(t) = R(ω T e(t/T))·diag(a, b)·(cos θ_i, sin θ_i)` with
//!   `a = 1 + 0.4 e`, `b = 1 − 0.2 e`, `ω = π/4`, `T = 2` and the quintic easing
//!   `e(s) = 6s⁵ − 15s⁴ + 10s³`, so velocity and acceleration vanish at both ends.
//! * Quartic path: one landmark in the plane following `c·q(t)` plus a linear drift,
//!   `q(t) = t³/6 − t⁴/12` on `[0, 1]`, whose second derivative vanishes at both ends.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::baseline::Evolution;
use crate::error::{Error, Result};
use crate::io::{rows, DatasetFile, Snapshot};

pub const PINCHED_HORIZON: f64 = 3.8;
pub const ROTATION_RATE: f64 = PI / 4.0;
pub const ROTATION_HORIZON: f64 = 2.0;

/// `n` equispaced points on the unit circle, starting at angle 0.
pub fn circle(n: usize) -> Vec<f64> {
    (0..n)
        .flat_map(|i| {
            let th = 2.0 * PI * i as f64 / n as f64;
            [th.cos(), th.sin()]
        })
        .collect()
}

fn angles(n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| 2.0 * PI * i as f64 / n as f64)
}

fn check_counts(n: usize, m: usize) -> Result<()> {
    if n < 3 {
        return Err(Error::Config(format!("need at least 3 landmarks, got {n}")));
    }
    if m < 2 {
        return Err(Error::Config(format!("need at least 2 observation times, got {m}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct PinchedEllipse {
    pub landmarks: usize,
    pub horizon: f64,
}

impl Evolution for PinchedEllipse {
    fn dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn positions(&self, t: f64) -> Vec<f64> {
        let s = t / self.horizon;
        let r = 1.0 + 0.3 * s;
        angles(self.landmarks)
            .flat_map(|th| {
                let (c, sn) = (th.cos(), th.sin());
                let px = 1.5 * c;
                let py = 0.8 * sn * (0.35 + 0.65 * c * c);
                [r * ((1.0 - s) * c + s * px), r * ((1.0 - s) * sn + s * py)]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RotatingEllipse {
    pub landmarks: usize,
}

/// `6s⁵ − 15s⁴ + 10s³`.
pub fn ease(s: f64) -> f64 {
    s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
}

impl RotatingEllipse {
    /// Semi-axes and rotation angle at time `t`.
    pub fn schedule(t: f64) -> (f64, f64, f64) {
        let e = ease(t / ROTATION_HORIZON);
        (1.0 + 0.4 * e, 1.0 - 0.2 * e, ROTATION_RATE * ROTATION_HORIZON * e)
    }
}

impl Evolution for RotatingEllipse {
    fn dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> f64 {
        ROTATION_HORIZON
    }

    fn positions(&self, t: f64) -> Vec<f64> {
        let (a, b, phi) = Self::schedule(t);
        let (c, s) = (phi.cos(), phi.sin());
        angles(self.landmarks)
            .flat_map(|th| {
                let (ex, ey) = (a * th.cos(), b * th.sin());
                [c * ex - s * ey, s * ex + c * ey]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuarticPath {
    pub amplitude: f64,
}

impl Default for QuarticPath {
    fn default() -> Self {
        Self { amplitude: 6.0 }
    }
}

impl Evolution for QuarticPath {
    fn dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> f64 {
        1.0
    }

    fn positions(&self, t: f64) -> Vec<f64> {
        let q = self.amplitude * (t.powi(3) / 6.0 - t.powi(4) / 12.0);
        vec![q + 0.5 * t, -0.5 * q + 0.2 * t]
    }
}

/// Evaluates `truth` at `steps + 1` equispaced times on `[0, horizon]`.
pub fn dense_truth(truth: &dyn Evolution, steps: usize) -> Vec<Snapshot> {
    let h = truth.horizon();
    (0..=steps)
        .map(|j| {
            let t = h * j as f64 / steps as f64;
            Snapshot {
                time: t,
                points: rows(&truth.positions(t), truth.dim()),
            }
        })
        .collect()
}

/// Circle at `t = 0` morphing into a rescaled, horizontally pinched ellipse; `M` observations
/// at `t_k = 3.8·k/M` with i.i.d. Gaussian coordinate noise `σ`. The initial circle is exact.
/// The dense truth is sampled on the default fitting grid (20 steps per observation gap).
pub fn synth_circle_to_pinched_ellipse(n: usize, m: usize, sigma: f64, seed: u64) -> Result<DatasetFile> {
    check_counts(n, m)?;
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config(format!(
            "noise level must be finite and non-negative, got {sigma}"
        )));
    }
    let truth = PinchedEllipse {
        landmarks: n,
        horizon: PINCHED_HORIZON,
    };
    let dense = dense_truth(&truth, 20 * m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let observations = (1..=m)
        .map(|k| {
            let mut snap = dense[20 * k].clone();
            for v in snap.points.iter_mut().flatten() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
            snap
        })
        .collect();
    let ds = DatasetFile {
        dimension: 2,
        landmarks: n,
        initial: Some(rows(&circle(n), 2)),
        observations,
        truth: Some(dense),
    };
    ds.validate()?;
    Ok(ds)
}

/// Rotating ellipse of growing eccentricity: dense truth on `dense_steps` steps over `[0, 2]`
/// and `M` observations at `t_k = k·T/M` taken from it; the initial circle is exact and
/// `dense_steps` must be a multiple of `M`.
pub fn synth_circle_to_rotating_ellipse(n: usize, dense_steps: usize, m: usize) -> Result<DatasetFile> {
    check_counts(n, m)?;
    if dense_steps == 0 || !dense_steps.is_multiple_of(m) {
        return Err(Error::Config(format!(
            "dense steps ({dense_steps}) must be a positive multiple of M = {m}"
        )));
    }
    let dense = dense_truth(&RotatingEllipse { landmarks: n }, dense_steps);
    let stride = dense_steps / m;
    let observations = (1..=m).map(|k| dense[k * stride].clone()).collect();
    let ds = DatasetFile {
        dimension: 2,
        landmarks: n,
        initial: Some(dense[0].points.clone()),
        observations,
        truth: Some(dense),
    };
    ds.validate()?;
    Ok(ds)
}
