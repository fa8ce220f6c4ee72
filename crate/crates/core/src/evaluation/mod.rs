//! Prediction error tables, boxplot aggregates and trajectory exports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::SampleSet;
use crate::models::{Model, ModelError};


/// Rad/s per pu of angular frequency (60 Hz system).
pub const OMEGA_BASE_RAD_S: f64 = 2.0 * std::f64::consts::PI * 60.0;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Omega,
    V,
}

impl Quantity {
    pub const ALL: [Quantity; 2] = [Quantity::Omega, Quantity::V];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::Omega => "omega",
            Quantity::V => "v",
        }
    }

    /// Position within an `(ω, v)` pair.
    pub fn channel(self) -> usize {
        match self {
            Quantity::Omega => 0,
            Quantity::V => 1,
        }
    }
}

/// Which channels of interleaved `(ω, v)` series enter a metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channels {
    Only(Quantity),
    Both,
}

/// Reference signal for the error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthSource {
    #[default]
    NoisyTargets,
    CleanTrajectory,
}

/// `sqrt(mean((a - b)²))` over equal-length, non-empty series.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Input(format!("series lengths differ: {} vs {}", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(EvalError::Input("rmse of an empty series".into()));
    }
    let s: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// [`rmse`] over interleaved `(ω, v)` pairs restricted to `channels`.
pub fn rmse_channels(pred: &[f64], truth: &[f64], channels: Channels) -> Result<f64, EvalError> {
    if pred.len() % 2 != 0 {
        return Err(EvalError::Input("interleaved series must have even length".into()));
    }
    match channels {
        Channels::Both => rmse(pred, truth),
        Channels::Only(q) => {
            let pick = |s: &[f64]| s.iter().skip(q.channel()).step_by(2).copied().collect::<Vec<_>>();
            rmse(&pick(pred), &pick(truth))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample: usize,
    /// Grid node id.
    pub node: usize,
    pub quantity: Quantity,
    /// Over the K-step horizon; ω in rad/s, v in pu.
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub model: String,
    pub rows: Vec<EvalRow>,
}

/// Error per sample, node and quantity over the prediction horizon.
pub fn evaluate(model: &Model, set: &SampleSet, truth: TruthSource) -> Result<EvalTable, EvalError> {
    evaluate_named(model, model.kind().name(), set, truth)
}

pub fn evaluate_named(model: &Model, name: &str, set: &SampleSet, truth: TruthSource) -> Result<EvalTable, EvalError> {
    if set.is_empty() {
        return Err(EvalError::Input("evaluation set is empty".into()));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let pred = model.predict_samples(set, &idx)?;
    table_from_predictions(name, set, &pred, truth)
}

/// Builds an [`EvalTable`] from predictions laid out `[sample][node][K][2]`.
pub fn table_from_predictions(name: &str, set: &SampleSet, pred: &[f64], truth: TruthSource) -> Result<EvalTable, EvalError> {
    let reference = match truth {
        TruthSource::NoisyTargets => &set.targets,
        TruthSource::CleanTrajectory => set
            .clean_targets
            .as_ref()
            .ok_or_else(|| EvalError::Input("dataset carries no clean targets".into()))?,
    };
    if pred.len() != reference.len() {
        return Err(EvalError::Input(format!("{} predictions for {} targets", pred.len(), reference.len())));
    }
    let n = set.n_nodes();
    let per = set.meta.k * 2;
    let mut rows = Vec::with_capacity(set.len() * n * 2);
    for s in 0..set.len() {
        for (i, &node) in set.meta.node_ids.iter().enumerate() {
            let o = (s * n + i) * per;
            for q in Quantity::ALL {
                let r = rmse_channels(&pred[o..o + per], &reference[o..o + per], Channels::Only(q))?;
                let rmse = if q == Quantity::Omega { r * OMEGA_BASE_RAD_S } else { r };
                rows.push(EvalRow { sample: s, node, quantity: q, rmse });
            }
        }
    }
    Ok(EvalTable { model: name.to_string(), rows })
}

impl EvalTable {
    pub fn values(&self, q: Quantity) -> Vec<f64> {
        self.rows.iter().filter(|r| r.quantity == q).map(|r| r.rmse).collect()
    }

    /// `sample,node,quantity,rmse`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,node,quantity,rmse\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.sample, r.node, r.quantity.name(), r.rmse).expect("writing to a String");
        }
        s
    }

    pub fn aggregate(&self) -> Vec<(Quantity, BoxStats)> {
        Quantity::ALL
            .iter()
            .filter_map(|&q| BoxStats::from_values(&self.values(q)).map(|b| (q, b)))
            .collect()
    }
}

/// Boxplot ingredients with Tukey whiskers at 1.5 IQR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
}

/// Linear-interpolation quantile of sorted data (`p` in [0, 1]).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let (q1, median, q3) = (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.5), quantile_sorted(&v, 0.75));
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let whisker_lo = v.iter().copied().find(|&x| x >= lo_fence).unwrap_or(v[0]).min(q1);
        let whisker_hi = v.iter().rev().copied().find(|&x| x <= hi_fence).unwrap_or(v[v.len() - 1]).max(q3);
        Some(Self {
            min: v[0],
            q1,
            median,
            q3,
            max: v[v.len() - 1],
            whisker_lo,
            whisker_hi,
        })
    }
}

/// `quantity,model,min,q1,median,q3,max,whisker_lo,whisker_hi`, two rows per table.
pub fn aggregate_csv(tables: &[&EvalTable]) -> String {
    let mut s = String::from("quantity,model,min,q1,median,q3,max,whisker_lo,whisker_hi\n");
    for t in tables {
        for (q, b) in t.aggregate() {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                q.name(),
                t.model,
                b.min,
                b.q1,
                b.median,
                b.q3,
                b.max,
                b.whisker_lo,
                b.whisker_hi
            )
            .expect("writing to a String");
        }
    }
    s
}

/// Pooled RMSE of one quantity over every sample, node and step of `set`
/// (pu for both quantities).
pub fn pooled_rmse(pred: &[f64], set: &SampleSet, truth: TruthSource, q: Quantity) -> Result<f64, EvalError> {
    let reference = match truth {
        TruthSource::NoisyTargets => &set.targets,
        TruthSource::CleanTrajectory => set
            .clean_targets
            .as_ref()
            .ok_or_else(|| EvalError::Input("dataset carries no clean targets".into()))?,
    };
    rmse_channels(pred, reference, Channels::Only(q))
}

/// Writes one sample's predictions next to the measured and true signals:
/// `time,node,omega_true,omega_measured,v_true,v_measured` followed by
/// `omega_<model>,v_<model>` per model. Values are in pu; `*_true` is empty
/// when the dataset has no clean targets.
pub fn export_trajectory(models: &[(&str, &Model)], set: &SampleSet, sample: usize, path: &Path) -> Result<(), EvalError> {
    let csv = trajectory_csv(models, set, sample)?;
    std::fs::write(path, csv).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn trajectory_csv(models: &[(&str, &Model)], set: &SampleSet, sample: usize) -> Result<String, EvalError> {
    if sample >= set.len() {
        return Err(EvalError::Input(format!("sample {sample} out of range (dataset has {})", set.len())));
    }
    let preds = models
        .iter()
        .map(|(_, m)| m.predict_samples(set, &[sample]))
        .collect::<Result<Vec<_>, _>>()?;
    let mut s = String::from("time,node,omega_true,omega_measured,v_true,v_measured");
    for (name, _) in models {
        write!(s, ",omega_{name},v_{name}").expect("writing to a String");
    }
    s.push('\n');
    let (k, dt, t_s) = (set.meta.k, set.meta.dt, set.origins[sample].t_s);
    for (i, &node) in set.meta.node_ids.iter().enumerate() {
        let measured = set.targets(sample, i);
        let clean = set.clean_targets(sample, i);
        for step in 0..k {
            let time = (t_s + step + 1) as f64 * dt;
            let tv = |c: usize| clean.map(|c2| c2[2 * step + c].to_string()).unwrap_or_default();
            write!(
                s,
                "{time},{node},{},{},{},{}",
                tv(0),
                measured[2 * step],
                tv(1),
                measured[2 * step + 1]
            )
            .expect("writing to a String");
            for p in &preds {
                let o = (i * k + step) * 2;
                write!(s, ",{},{}", p[o], p[o + 1]).expect("writing to a String");
            }
            s.push('\n');
        }
    }
    Ok(s)
}
