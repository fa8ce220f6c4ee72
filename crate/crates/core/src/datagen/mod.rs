//! Trajectory simulation under stepwise setpoint excitation, measurement
//! noise, and slicing into history/target samples.

mod io;
mod slicing;

pub use io::{load_dataset, read_trajectory_csv, save_dataset, write_trajectory_csv, DATASET_MAGIC, DATASET_VERSION};
pub use slicing::{sample_count, slice_aligned, slice_at, slice_samples, DatasetMeta, SampleOrigin, SampleSet};

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::odeint::{rk4_step_into, OdeError, Rk4Workspace};
use crate::powergrid::{system_rhs_unchecked, GridModel, PowerGridError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data request: {0}")]
    Config(String),
    #[error("simulation diverged at t = {time:.2} s: {reason}")]
    Diverged { time: f64, reason: String },
    #[error("trajectory too short: need at least {required} rows, got {got}")]
    TooShort { required: usize, got: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Grid(#[from] PowerGridError),
}

/// Piecewise-constant active power setpoints, one level per node and period.
#[derive(Clone, Debug, PartialEq)]
pub struct Excitation {
    pub dt: f64,
    pub steps_per_period: usize,
    pub n_steps: usize,
    pub n_nodes: usize,
    /// `[period][node]`.
    pub levels: Vec<f64>,
}

impl Excitation {
    /// Setpoints at sample index `k` (applied on `[t_k, t_{k+1})`); the final
    /// grid point keeps the last level.
    pub fn at(&self, k: usize) -> &[f64] {
        let periods = self.levels.len() / self.n_nodes;
        let p = (k / self.steps_per_period).min(periods - 1);
        &self.levels[p * self.n_nodes..(p + 1) * self.n_nodes]
    }

    pub fn periods(&self) -> usize {
        self.levels.len() / self.n_nodes
    }
}

fn whole_steps(span: f64, dt: f64, what: &str) -> Result<usize, DataError> {
    let n = (span / dt).round();
    if !(n >= 1.0) || ((n * dt - span).abs() > 1e-9 * span.abs().max(1.0)) {
        return Err(DataError::Config(format!("{what} {span} s is not a whole number of {dt} s samples")));
    }
    Ok(n as usize)
}

/// Uniform setpoint steps `p_d_nom + Δ`, `Δ ~ U(-amplitude, amplitude)`,
/// redrawn every `period` seconds.
pub fn generate_excitation(
    grid: &GridModel,
    duration: f64,
    period: f64,
    amplitude: f64,
    dt: f64,
    seed: u64,
) -> Result<Excitation, DataError> {
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return Err(DataError::Config(format!("amplitude must be finite and >= 0, got {amplitude}")));
    }
    let n_steps = whole_steps(duration, dt, "duration")?;
    let steps_per_period = whole_steps(period, dt, "period")?;
    if n_steps % steps_per_period != 0 {
        return Err(DataError::Config(format!("period {period} s does not divide duration {duration} s")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nominal = grid.nominal_setpoints();
    let periods = n_steps / steps_per_period;
    let mut levels = Vec::with_capacity(periods * nominal.len());
    for _ in 0..periods {
        for &p in &nominal {
            let delta = if amplitude > 0.0 {
                rng.random_range(-amplitude..=amplitude)
            } else {
                0.0
            };
            levels.push(p + delta);
        }
    }
    Ok(Excitation {
        dt,
        steps_per_period,
        n_steps,
        n_nodes: nominal.len(),
        levels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub substeps: usize,
    pub preroll_secs: f64,
    /// Pre-roll continues past `preroll_secs` until the equilibrium residual
    /// drops below `equilibrium_tol`, for at most this long.
    pub preroll_max_secs: f64,
    pub equilibrium_tol: f64,
    pub max_voltage: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            substeps: 10,
            preroll_secs: 20.0,
            preroll_max_secs: 200.0,
            equilibrium_tol: 1e-11,
            max_voltage: 2.0,
        }
    }
}

/// Simulated measurements on a uniform grid. Per-row arrays are node-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: u32,
    pub dt: f64,
    pub node_ids: Vec<usize>,
    /// `[row][node]`.
    pub u: Vec<f64>,
    /// `[row][node][ω, v]`.
    pub clean: Vec<f64>,
    /// `[row][node][ω, v]`.
    pub noisy: Vec<f64>,
    /// `[row][node]`, diagnostic only.
    pub delta: Vec<f64>,
}

impl Trajectory {
    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn rows(&self) -> usize {
        self.u.len() / self.n_nodes()
    }

    pub fn time(&self, row: usize) -> f64 {
        row as f64 * self.dt
    }
}

/// Residual of the full-system derivative in the synchronously rotating
/// frame: the common angle drift is removed before taking the norm.
pub fn equilibrium_residual(grid: &GridModel, x: &[f64], u: &[f64]) -> f64 {
    let n = grid.n_nodes();
    let mut dx = vec![0.0; 3 * n];
    system_rhs_unchecked(grid, x, u, &mut dx);
    let drift = (0..n).map(|i| dx[3 * i]).sum::<f64>() / n as f64;
    for i in 0..n {
        dx[3 * i] -= drift;
    }
    dx.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_state(x: &[f64], time: f64, max_voltage: f64) -> Result<(), DataError> {
    for (i, s) in x.chunks_exact(3).enumerate() {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Diverged {
                time,
                reason: format!("non-finite state at node position {i}"),
            });
        }
        if s[2].abs() > max_voltage {
            return Err(DataError::Diverged {
                time,
                reason: format!("voltage {} pu at node position {i}", s[2]),
            });
        }
    }
    Ok(())
}

/// Integrates from a flat start under nominal setpoints and returns the
/// settled state together with its equilibrium residual.
pub fn preroll(grid: &GridModel, cfg: &SimConfig) -> Result<(Vec<f64>, f64), DataError> {
    let u = grid.nominal_setpoints();
    let mut x = grid.flat_start();
    let mut ws = Rk4Workspace::new(x.len());
    let h = cfg.dt / cfg.substeps as f64;
    let mut f = |x: &[f64], u: &[f64], dx: &mut [f64]| system_rhs_unchecked(grid, x, u, dx);
    let min_steps = whole_steps(cfg.preroll_secs, cfg.dt, "pre-roll")?;
    let max_steps = min_steps.max((cfg.preroll_max_secs / cfg.dt).round() as usize);
    let mut k = 0;
    loop {
        for _ in 0..cfg.substeps {
            rk4_step_into(&mut f, &mut x, &u, h, k as f64 * cfg.dt - cfg.preroll_secs, &mut ws)?;
        }
        k += 1;
        check_state(&x, k as f64 * cfg.dt - cfg.preroll_secs, cfg.max_voltage)?;
        if k >= min_steps {
            let r = equilibrium_residual(grid, &x, &u);
            if r < cfg.equilibrium_tol || k >= max_steps {
                if r >= cfg.equilibrium_tol {
                    warn!("pre-roll stopped after {:.1} s with residual {r:.3e}", k as f64 * cfg.dt);
                }
                debug!("pre-roll settled after {:.1} s, residual {r:.3e}", k as f64 * cfg.dt);
                return Ok((x, r));
            }
        }
    }
}

/// Pre-rolls to steady state, then integrates under `excitation` recording
/// `n_steps + 1` rows. The noisy channels start as copies of the clean ones.
pub fn simulate_trajectory(grid: &GridModel, excitation: &Excitation, cfg: &SimConfig, id: u32) -> Result<Trajectory, DataError> {
    if cfg.substeps == 0 || !(cfg.dt > 0.0) {
        return Err(DataError::Config("dt must be > 0 and substeps >= 1".into()));
    }
    if excitation.n_nodes != grid.n_nodes() || (excitation.dt - cfg.dt).abs() > 1e-15 {
        return Err(DataError::Config("excitation does not match grid or sampling interval".into()));
    }
    let (mut x, _) = preroll(grid, cfg)?;
    let n = grid.n_nodes();
    let rows = excitation.n_steps + 1;
    let mut traj = Trajectory {
        id,
        dt: cfg.dt,
        node_ids: grid.topology().node_ids().to_vec(),
        u: Vec::with_capacity(rows * n),
        clean: Vec::with_capacity(rows * n * 2),
        noisy: Vec::new(),
        delta: Vec::with_capacity(rows * n),
    };
    let mut ws = Rk4Workspace::new(x.len());
    let h = cfg.dt / cfg.substeps as f64;
    let mut f = |x: &[f64], u: &[f64], dx: &mut [f64]| system_rhs_unchecked(grid, x, u, dx);
    let record = |traj: &mut Trajectory, x: &[f64], u: &[f64]| {
        traj.u.extend_from_slice(u);
        for s in x.chunks_exact(3) {
            traj.clean.extend_from_slice(&[s[1], s[2]]);
            traj.delta.push(s[0]);
        }
    };
    for k in 0..excitation.n_steps {
        let u = excitation.at(k);
        record(&mut traj, &x, u);
        for s in 0..cfg.substeps {
            rk4_step_into(&mut f, &mut x, u, h, (k as f64 + s as f64 / cfg.substeps as f64) * cfg.dt, &mut ws)?;
        }
        check_state(&x, (k + 1) as f64 * cfg.dt, cfg.max_voltage)?;
    }
    record(&mut traj, &x, excitation.at(excitation.n_steps));
    traj.noisy = traj.clean.clone();
    Ok(traj)
}

/// Adds white Gaussian noise per measured channel so that each channel's
/// zero-mean component has the requested SNR. Inputs stay untouched.
pub fn add_noise(traj: &Trajectory, snr_db: f64, seed: u64) -> Result<Trajectory, DataError> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(DataError::Config(format!("SNR must be finite or +inf, got {snr_db}")));
    }
    let mut out = traj.clone();
    out.noisy = traj.clean.clone();
    let (rows, n) = (traj.rows(), traj.n_nodes());
    let gain = 10f64.powf(-snr_db / 20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ch in 0..2 * n {
        let series = (0..rows).map(|r| traj.clean[r * 2 * n + ch]);
        let mean = series.clone().sum::<f64>() / rows as f64;
        let rms = (series.map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64).sqrt();
        let std = rms * gain;
        if std == 0.0 {
            if rms == 0.0 {
                debug!("channel {ch} has zero variance; no noise added");
            }
            continue;
        }
        for r in 0..rows {
            let z: f64 = rng.sample(StandardNormal);
            out.noisy[r * 2 * n + ch] = traj.clean[r * 2 * n + ch] + std * z;
        }
    }
    Ok(out)
}
