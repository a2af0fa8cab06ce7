//! Dataset and configuration documents (JSON) and tabular outputs (CSV).
//!
//! Dataset layout:
//!
//! ```json
//! {
//!   "dimension": 2,
//!   "landmarks": 3,
//!   "initial": [[1.0, 0.0], [-0.5, 0.87], [-0.5, -0.87]],
//!   "observations": [{"time": 0.5, "points": [[1.1, 0.0], [-0.5, 0.9], [-0.6, -0.8]]}],
//!   "truth": [{"time": 0.0, "points": [[1.0, 0.0], [-0.5, 0.87], [-0.5, -0.87]]}]
//! }
//! ```
//!
//! `initial` is the configuration at `t = 0`; when absent the first observation must be at
//! `t = 0` and serves as the initial configuration. `truth` is an optional dense reference.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlPath, Trajectory};
use crate::error::{Error, Result};
use crate::observations::{Observation, ObservationSet};
use crate::optimize::OptimizerSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub time: f64,
    /// One row of `d` coordinates per landmark.
    pub points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub dimension: usize,
    pub landmarks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<Vec<f64>>>,
    pub observations: Vec<Snapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<Snapshot>>,
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

/// Rows of `dim` coordinates from a flat configuration.
pub fn rows(flat: &[f64], dim: usize) -> Vec<Vec<f64>> {
    flat.chunks(dim).map(|c| c.to_vec()).collect()
}

fn check_rows(rows: &[Vec<f64>], n: usize, d: usize, at: &str) -> Result<()> {
    if rows.len() != n {
        return Err(Error::validation(
            at,
            format!("expected {n} landmarks, got {}", rows.len()),
        ));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::validation(
                format!("{at}[{i}]"),
                format!("expected {d} coordinates, got {}", r.len()),
            ));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("{at}[{i}]"), "non-finite coordinate"));
        }
    }
    Ok(())
}

fn check_snapshots(snaps: &[Snapshot], n: usize, d: usize, at: &str) -> Result<()> {
    for (k, s) in snaps.iter().enumerate() {
        if !(s.time.is_finite() && s.time >= 0.0) {
            return Err(Error::validation(
                format!("{at}[{k}].time"),
                "must be finite and non-negative",
            ));
        }
        if k > 0 && s.time <= snaps[k - 1].time {
            return Err(Error::validation(
                format!("{at}[{k}].time"),
                "times must be strictly increasing",
            ));
        }
        check_rows(&s.points, n, d, &format!("{at}[{k}].points"))?;
    }
    Ok(())
}

impl DatasetFile {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::validation("dimension", "must be positive"));
        }
        if self.landmarks == 0 {
            return Err(Error::validation("landmarks", "must be positive"));
        }
        if self.observations.is_empty() {
            return Err(Error::validation(
                "observations",
                "at least one observation is required",
            ));
        }
        let (n, d) = (self.landmarks, self.dimension);
        if let Some(init) = &self.initial {
            check_rows(init, n, d, "initial")?;
        } else if self.observations[0].time != 0.0 {
            return Err(Error::validation(
                "initial",
                "missing, and the first observation is not at t = 0 to stand in for it",
            ));
        }
        check_snapshots(&self.observations, n, d, "observations")?;
        if let Some(truth) = &self.truth {
            check_snapshots(truth, n, d, "truth")?;
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let ds: DatasetFile = serde_json::from_str(text).map_err(json_validation)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json_string()?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// Copy with i.i.d. Gaussian noise of standard deviation `sigma` added to every
    /// observed coordinate; the initial configuration and truth are untouched.
    pub fn with_noise(&self, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::Domain(format!(
                "noise level must be finite and non-negative, got {sigma}"
            )));
        }
        let mut out = self.clone();
        if out.initial.is_none() {
            out.initial = Some(self.observations[0].points.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in out.observations.iter_mut().flat_map(|s| s.points.iter_mut().flatten()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
        Ok(out)
    }

    /// Initial configuration at `t = 0`.
    pub fn initial_configuration(&self) -> Vec<f64> {
        match &self.initial {
            Some(rows) => flatten(rows),
            None => flatten(&self.observations[0].points),
        }
    }

    pub fn observation_set(&self) -> Result<ObservationSet> {
        ObservationSet::new(
            self.dimension,
            self.observations
                .iter()
                .map(|s| Observation {
                    time: s.time,
                    points: flatten(&s.points),
                })
                .collect(),
        )
    }

    /// Truth configurations at the given times, matched within `tol`; `None` if any is missing.
    pub fn truth_at(&self, times: &[f64], tol: f64) -> Option<Vec<Vec<f64>>> {
        let truth = self.truth.as_ref()?;
        times
            .iter()
            .map(|t| {
                truth
                    .iter()
                    .find(|s| (s.time - t).abs() <= tol)
                    .map(|s| flatten(&s.points))
            })
            .collect()
    }
}

fn json_validation(e: serde_json::Error) -> Error {
    Error::validation(format!("line {}, column {}", e.line(), e.column()), e.to_string())
}

/// Experiment configuration; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Width `λ` of the landmark kernel.
    pub kernel_width: f64,
    pub metric: String,
    /// Control weight `σ_u`.
    pub control_weight: f64,
    /// Width `λ_W` of the measure-space kernel.
    pub measure_width: f64,
    pub measure_jitter: f64,
    /// Data weight `γ`.
    pub gamma: f64,
    /// Horizon `T`; defaults to the last observation time.
    pub horizon: Option<f64>,
    /// Grid steps `N`; defaults to 20 steps per smallest observation gap.
    pub grid_steps: Option<usize>,
    pub optimizer: String,
    pub optimizer_settings: OptimizerSettings,
    /// Standard deviation of Gaussian noise injected into observations before fitting.
    pub noise_sigma: f64,
    pub seed: u64,
    pub output_dir: Option<String>,
    pub simulation: SimulationConfig,
    pub convergence: ConvergenceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kernel_width: 1.0,
            metric: "euclidean".into(),
            control_weight: 1.0,
            measure_width: 1.0,
            measure_jitter: 1e-9,
            gamma: 1e4,
            horizon: None,
            grid_steps: None,
            optimizer: "lbfgs".into(),
            optimizer_settings: OptimizerSettings::default(),
            noise_sigma: 0.0,
            seed: 0,
            output_dir: None,
            simulation: SimulationConfig::default(),
            convergence: ConvergenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Landmarks on the initial circle when no dataset is given.
    pub landmarks: usize,
    /// Noise level as `√n·ε`.
    pub eps_scaled: f64,
    pub horizon: f64,
    pub steps: usize,
    pub runs: usize,
    /// Target `H0` of the random initial momentum; 0 starts at rest.
    pub initial_energy: f64,
    /// Noise level `σ` of the Kunita flow.
    pub kunita_sigma: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            landmarks: 40,
            eps_scaled: 1.0,
            horizon: 1.0,
            steps: 1000,
            runs: 200,
            initial_energy: 0.0,
            kunita_sigma: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub methods: Vec<String>,
    pub m_list: Vec<usize>,
    pub landmarks: usize,
    pub steps_per_gap: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            methods: vec!["spline".into(), "piecewise".into()],
            m_list: vec![3, 5, 7, 9, 11],
            landmarks: 12,
            steps_per_gap: 20,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text).map_err(json_validation)?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, at: &str| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::validation(at, format!("must be positive, got {v}")))
            }
        };
        positive(self.kernel_width, "kernel_width")?;
        positive(self.control_weight, "control_weight")?;
        positive(self.measure_width, "measure_width")?;
        positive(self.measure_jitter, "measure_jitter")?;
        positive(self.gamma, "gamma")?;
        if let Some(h) = self.horizon {
            positive(h, "horizon")?;
        }
        if self.grid_steps == Some(0) {
            return Err(Error::validation("grid_steps", "must be at least 1"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::validation("noise_sigma", "must be finite and non-negative"));
        }
        self.optimizer_settings.validate()?;
        let s = &self.simulation;
        if s.landmarks == 0 {
            return Err(Error::validation("simulation.landmarks", "must be positive"));
        }
        if !(s.eps_scaled.is_finite() && s.eps_scaled >= 0.0) {
            return Err(Error::validation(
                "simulation.eps_scaled",
                "must be finite and non-negative",
            ));
        }
        positive(s.horizon, "simulation.horizon")?;
        if s.steps == 0 {
            return Err(Error::validation("simulation.steps", "must be positive"));
        }
        if s.runs < 2 {
            return Err(Error::validation("simulation.runs", "must be at least 2"));
        }
        if !(s.initial_energy.is_finite() && s.initial_energy >= 0.0) {
            return Err(Error::validation(
                "simulation.initial_energy",
                "must be finite and non-negative",
            ));
        }
        if !(s.kunita_sigma.is_finite() && s.kunita_sigma >= 0.0) {
            return Err(Error::validation(
                "simulation.kunita_sigma",
                "must be finite and non-negative",
            ));
        }
        let c = &self.convergence;
        if c.m_list.is_empty() || c.m_list.contains(&0) || c.m_list.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation(
                "convergence.m_list",
                "must be strictly increasing positive counts",
            ));
        }
        if c.landmarks < 3 {
            return Err(Error::validation("convergence.landmarks", "must be at least 3"));
        }
        if c.steps_per_gap == 0 {
            return Err(Error::validation("convergence.steps_per_gap", "must be positive"));
        }
        Ok(())
    }
}

/// Trajectory CSV: `t`, then `x_i_a`, `p_i_a` and (when given) `u_i_a` for landmark `i`
/// and axis `a`, both 1-based, landmark-major.
pub fn write_trajectory_csv<W: Write>(
    traj: &Trajectory,
    u: Option<&ControlPath>,
    time_offset: f64,
    out: W,
) -> Result<()> {
    let first = &traj.states[0];
    let (n, d) = (first.landmarks(), first.dim);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    let prefixes: &[&str] = if u.is_some() { &["x", "p", "u"] } else { &["x", "p"] };
    for pre in prefixes {
        for i in 1..=n {
            for a in 1..=d {
                header.push(format!("{pre}_{i}_{a}"));
            }
        }
    }
    w.write_record(&header)?;
    for (j, s) in traj.states.iter().enumerate() {
        let mut rec = vec![format!("{}", traj.grid.node(j) + time_offset)];
        rec.extend(s.x.iter().chain(&s.p).map(|v| format!("{v:e}")));
        if let Some(u) = u {
            rec.extend(u.samples[j].iter().map(|v| format!("{v:e}")));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Position-only path CSV: `t`, then `x_i_a`.
pub fn write_positions_csv<W: Write>(times: &[f64], path: &[Vec<f64>], dim: usize, out: W) -> Result<()> {
    let n = path[0].len() / dim;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    for i in 1..=n {
        for a in 1..=dim {
            header.push(format!("x_{i}_{a}"));
        }
    }
    w.write_record(&header)?;
    for (t, x) in times.iter().zip(path) {
        let mut rec = vec![format!("{t}")];
        rec.extend(x.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
