//! Timestamped landmark observations.

use crate::dynamics::TimeGrid;
use crate::error::{Error, Result};

/// Observation times must hit a node to within this fraction of `dt`.
const ON_GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub time: f64,
    /// Flat landmark coordinates, length `n·d`.
    pub points: Vec<f64>,
}

/// Observations sorted by strictly increasing time, all with the same `(n, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    dim: usize,
    entries: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(dim: usize, entries: Vec<Observation>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("dimension", "must be positive"));
        }
        let Some(first) = entries.first() else {
            return Err(Error::validation(
                "observations",
                "at least one observation is required",
            ));
        };
        let len = first.points.len();
        if len == 0 || len % dim != 0 {
            return Err(Error::validation(
                "observations[0].points",
                format!("length {len} is not a positive multiple of {dim}"),
            ));
        }
        for (k, o) in entries.iter().enumerate() {
            if !(o.time.is_finite() && o.time >= 0.0) {
                return Err(Error::validation(
                    format!("observations[{k}].time"),
                    "must be finite and non-negative",
                ));
            }
            if o.points.len() != len {
                return Err(Error::validation(
                    format!("observations[{k}].points"),
                    format!("expected {len} coordinates, got {}", o.points.len()),
                ));
            }
            if o.points.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(
                    format!("observations[{k}].points"),
                    "non-finite coordinate",
                ));
            }
            if k > 0 && o.time <= entries[k - 1].time {
                return Err(Error::validation(
                    format!("observations[{k}].time"),
                    "times must be strictly increasing",
                ));
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn landmarks(&self) -> usize {
        self.entries[0].points.len() / self.dim
    }

    pub fn phase_len(&self) -> usize {
        self.entries[0].points.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    pub fn times(&self) -> Vec<f64> {
        self.entries.iter().map(|o| o.time).collect()
    }

    pub fn last_time(&self) -> f64 {
        self.entries[self.entries.len() - 1].time
    }

    /// Moves every time to the nearest node of `grid` when within `dt/2`.
    ///
    /// Fails when a time lies outside `[0, T]` by more than `dt/2` or when two
    /// observations would share a node.
    pub fn snap_to_grid(&self, grid: &TimeGrid) -> Result<Self> {
        let mut out = self.clone();
        let mut prev: Option<usize> = None;
        for (k, o) in out.entries.iter_mut().enumerate() {
            let j = grid.node_index(o.time, 0.5).ok_or_else(|| {
                Error::validation(
                    format!("observations[{k}].time"),
                    format!("time {} is outside the grid [0, {}]", o.time, grid.horizon()),
                )
            })?;
            if prev == Some(j) {
                return Err(Error::validation(
                    format!("observations[{k}].time"),
                    format!("snaps to node {j}, already taken by the previous observation"),
                ));
            }
            prev = Some(j);
            o.time = grid.node(j);
        }
        Ok(out)
    }

    /// Grid node of every observation; errors if one is off-grid.
    pub fn node_indices(&self, grid: &TimeGrid) -> Result<Vec<usize>> {
        self.entries
            .iter()
            .map(|o| {
                grid.node_index(o.time, ON_GRID_TOL).ok_or_else(|| {
                    Error::Config(format!(
                        "observation time {} is not a node of the grid (dt = {})",
                        o.time,
                        grid.dt()
                    ))
                })
            })
            .collect()
    }

    /// Same observations with every configuration translated by `shift` (length `d`).
    pub fn translated(&self, shift: &[f64]) -> Self {
        let mut out = self.clone();
        for o in &mut out.entries {
            for (c, v) in o.points.iter_mut().enumerate() {
                *v += shift[c % self.dim];
            }
        }
        out
    }
}

/// Number of steps giving at least `per_gap` steps between consecutive times in
/// `0, t_1, …, t_M, horizon` (zero gaps ignored).
pub fn default_steps(times: &[f64], horizon: f64, per_gap: usize) -> usize {
    let mut marks = vec![0.0];
    marks.extend_from_slice(times);
    marks.push(horizon);
    let min_gap = marks
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|g| *g > 1e-12 * horizon.max(1.0))
        .fold(f64::INFINITY, f64::min);
    if !min_gap.is_finite() {
        return per_gap.max(1);
    }
    let r = per_gap as f64 * horizon / min_gap;
    // absorb rounding so that evenly spaced times give an exact multiple
    let n = if (r - r.round()).abs() < 1e-9 * r {
        r.round()
    } else {
        r.ceil()
    };
    (n as usize).max(1)
}
