use serde::{Deserialize, Serialize};

use super::{DataError, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub h: usize,
    pub k: usize,
    pub d: usize,
    pub dt: f64,
    pub node_ids: Vec<usize>,
    pub seeds: Vec<u64>,
    pub snr_db: Option<f64>,
}

impl DatasetMeta {
    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    /// Input values per node and sample: `u(t_{s-H}) ... u(t_{s+K})`.
    pub fn u_len(&self) -> usize {
        self.h + self.k + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOrigin {
    pub trajectory: u32,
    pub t_s: usize,
}

/// Windows cut from trajectories. For sample `n` and node `i`:
/// inputs `u(t_{s-H}..=t_{s+K})`, history `y(t_{s-H+1}..=t_s)` and targets
/// `y(t_{s+1}..=t_{s+K})`, with `y = (ω, v)` taken from the noisy channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub meta: DatasetMeta,
    pub origins: Vec<SampleOrigin>,
    /// `[sample][node][H+K+1]`.
    pub u: Vec<f64>,
    /// `[sample][node][H][2]`.
    pub history: Vec<f64>,
    /// `[sample][node][K][2]`.
    pub targets: Vec<f64>,
    /// Noise-free targets, same layout as `targets`.
    pub clean_targets: Option<Vec<f64>>,
}

/// Number of windows with stride `d` in a trajectory spanning `intervals`
/// sampling intervals (`rows - 1`).
pub fn sample_count(intervals: usize, h: usize, k: usize, d: usize) -> usize {
    if d == 0 || intervals < h + k {
        0
    } else {
        (intervals - h - k) / d + 1
    }
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.meta.n_nodes()
    }

    pub fn u(&self, s: usize, i: usize) -> &[f64] {
        let l = self.meta.u_len();
        let o = (s * self.n_nodes() + i) * l;
        &self.u[o..o + l]
    }

    pub fn history(&self, s: usize, i: usize) -> &[f64] {
        let l = 2 * self.meta.h;
        let o = (s * self.n_nodes() + i) * l;
        &self.history[o..o + l]
    }

    pub fn targets(&self, s: usize, i: usize) -> &[f64] {
        let l = 2 * self.meta.k;
        let o = (s * self.n_nodes() + i) * l;
        &self.targets[o..o + l]
    }

    pub fn clean_targets(&self, s: usize, i: usize) -> Option<&[f64]> {
        let l = 2 * self.meta.k;
        let o = (s * self.n_nodes() + i) * l;
        self.clean_targets.as_ref().map(|c| &c[o..o + l])
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> SampleSet {
        let n = self.n_nodes();
        let pick = |data: &[f64], per: usize| -> Vec<f64> {
            indices
                .iter()
                .flat_map(|&s| data[s * n * per..(s + 1) * n * per].iter().copied())
                .collect()
        };
        SampleSet {
            meta: self.meta.clone(),
            origins: indices.iter().map(|&s| self.origins[s]).collect(),
            u: pick(&self.u, self.meta.u_len()),
            history: pick(&self.history, 2 * self.meta.h),
            targets: pick(&self.targets, 2 * self.meta.k),
            clean_targets: self.clean_targets.as_ref().map(|c| pick(c, 2 * self.meta.k)),
        }
    }

    /// Appends the samples of `other`, which must share H, K and nodes.
    pub fn extend(&mut self, other: &SampleSet) -> Result<(), DataError> {
        let (a, b) = (&self.meta, &other.meta);
        if a.h != b.h || a.k != b.k || a.node_ids != b.node_ids {
            return Err(DataError::Config("cannot merge datasets with different windows or nodes".into()));
        }
        self.origins.extend_from_slice(&other.origins);
        self.u.extend_from_slice(&other.u);
        self.history.extend_from_slice(&other.history);
        self.targets.extend_from_slice(&other.targets);
        self.clean_targets = match (self.clean_targets.take(), &other.clean_targets) {
            (Some(mut x), Some(y)) => {
                x.extend_from_slice(y);
                Some(x)
            }
            _ => None,
        };
        Ok(())
    }
}

/// Windows at `t_s = H, H + D, H + 2D, ...`.
pub fn slice_samples(traj: &Trajectory, h: usize, k: usize, d: usize) -> Result<SampleSet, DataError> {
    if h == 0 || k == 0 || d == 0 {
        return Err(DataError::Config(format!("H, K and D must be >= 1 (got {h}, {k}, {d})")));
    }
    let intervals = traj.rows().saturating_sub(1);
    let count = sample_count(intervals, h, k, d);
    if count == 0 {
        return Err(DataError::TooShort {
            required: h + k + 1,
            got: traj.rows(),
        });
    }
    let starts: Vec<usize> = (0..count).map(|n| h + n * d).collect();
    slice_at(traj, h, k, d, &starts)
}

/// Windows at `t_s` on multiples of `period_steps` (the setpoint step
/// instants), starting at the first one `>= H` and advancing by `D`.
pub fn slice_aligned(traj: &Trajectory, h: usize, k: usize, d: usize, period_steps: usize) -> Result<SampleSet, DataError> {
    if period_steps == 0 || d % period_steps != 0 {
        return Err(DataError::Config(format!(
            "stride {d} must be a multiple of the step period {period_steps}"
        )));
    }
    let first = h.div_ceil(period_steps) * period_steps;
    let last = traj.rows().saturating_sub(1 + k);
    if first > last {
        return Err(DataError::TooShort {
            required: first + k + 1,
            got: traj.rows(),
        });
    }
    let starts: Vec<usize> = (first..=last).step_by(d).collect();
    slice_at(traj, h, k, d, &starts)
}

/// Windows at explicit sample indices `t_s`.
pub fn slice_at(traj: &Trajectory, h: usize, k: usize, d: usize, starts: &[usize]) -> Result<SampleSet, DataError> {
    let rows = traj.rows();
    let n = traj.n_nodes();
    for &t in starts {
        if t < h || t + k >= rows {
            return Err(DataError::TooShort {
                required: t.max(h) + k + 1,
                got: rows,
            });
        }
    }
    let count = starts.len();
    let mut u = Vec::with_capacity(count * n * (h + k + 1));
    let mut history = Vec::with_capacity(count * n * 2 * h);
    let mut targets = Vec::with_capacity(count * n * 2 * k);
    let mut clean = Vec::with_capacity(count * n * 2 * k);
    for &t in starts {
        for i in 0..n {
            u.extend((t - h..=t + k).map(|r| traj.u[r * n + i]));
            for r in t + 1 - h..=t {
                history.extend_from_slice(&traj.noisy[(r * n + i) * 2..(r * n + i) * 2 + 2]);
            }
            for r in t + 1..=t + k {
                targets.extend_from_slice(&traj.noisy[(r * n + i) * 2..(r * n + i) * 2 + 2]);
                clean.extend_from_slice(&traj.clean[(r * n + i) * 2..(r * n + i) * 2 + 2]);
            }
        }
    }
    Ok(SampleSet {
        meta: DatasetMeta {
            h,
            k,
            d,
            dt: traj.dt,
            node_ids: traj.node_ids.clone(),
            seeds: Vec::new(),
            snr_db: None,
        },
        origins: starts
            .iter()
            .map(|&t_s| SampleOrigin {
                trajectory: traj.id,
                t_s,
            })
            .collect(),
        u,
        history,
        targets,
        clean_targets: Some(clean),
    })
}
