//! Learnable grid dynamics: the message-passing graph neural ODE with node
//! and edge embeddings, the monolith neural ODE baseline, the ground-truth
//! oracle that shares their prediction path, and checkpoint files.
//!
//! All models predict by encoding a (partially latent) initial state from a
//! history window and unrolling piecewise-constant-input RK4 solves over the
//! prediction horizon. Outputs are the measured state components `(ω, v)`.

mod checkpoint;
mod monolith;
mod mpg;
mod oracle;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use monolith::{MonolithBound, MonolithModel};
pub use mpg::{MpgBound, MpgNodeModel};
pub use oracle::{GroundTruth, GroundTruthBound};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::datagen::SampleSet;
use crate::nn::{bind_params, Activation, NnError};
use crate::odeint::{integrate_tape, OdeError};
use crate::powergrid::{GridTopology, PowerGridError};

pub const NODE_EMBEDDING_DIM: usize = 8;
pub const EDGE_EMBEDDING_DIM: usize = 4;
pub const MESSAGE_DIM: usize = 2;
/// Measured states per node: `ω` and `v`.
pub const MEASURED_PER_NODE: usize = 2;
/// Encoder channels per node: lagged `u`, `ω`, `v`.
pub const ENCODER_CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid prediction request: {0}")]
    Request(String),
    #[error("topology mismatch: {0}")]
    Topology(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Grid(#[from] PowerGridError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mpg,
    Monolith,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Mpg => 0,
            ModelKind::Monolith => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Mpg),
            1 => Some(ModelKind::Monolith),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mpg => "mpg",
            ModelKind::Monolith => "monolith",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mpg" => Ok(ModelKind::Mpg),
            "monolith" => Ok(ModelKind::Monolith),
            other => Err(format!("unknown model kind `{other}` (expected mpg or monolith)")),
        }
    }
}

/// Architecture and discretization shared by both model kinds. The dynamics
/// and message MLPs use the same depth and width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub tcn_channels: usize,
    pub tcn_kernel: usize,
    /// History length `H` seen by the encoder.
    pub history: usize,
    pub latent_dim: usize,
    pub activation: Activation,
    pub dt: f64,
    pub substeps: usize,
    pub embedding_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            hidden_width: 128,
            tcn_channels: 128,
            tcn_kernel: 3,
            history: 64,
            latent_dim: 1,
            activation: Activation::Silu,
            dt: 0.01,
            substeps: 1,
            embedding_init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_width == 0 && self.hidden_layers > 0 {
            return Err(ModelError::Config("hidden_width must be >= 1".into()));
        }
        if self.tcn_channels == 0 || self.tcn_kernel < 2 || self.history == 0 || self.latent_dim == 0 {
            return Err(ModelError::Config(format!(
                "tcn_channels, history and latent_dim must be >= 1 and tcn_kernel >= 2: {self:?}"
            )));
        }
        if !(self.dt > 0.0) || self.substeps == 0 {
            return Err(ModelError::Config("dt must be > 0 and substeps >= 1".into()));
        }
        if !(self.embedding_init_std >= 0.0) {
            return Err(ModelError::Config("embedding_init_std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        MEASURED_PER_NODE + self.latent_dim
    }
}

/// Per-channel standardization `(x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub mean: f64,
    pub std: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { mean: 0.0, std: 1.0 };

    /// Mean and population std; a (near) constant channel keeps std 1.
    pub fn fit(values: impl Iterator<Item = f64> + Clone) -> Self {
        let (mut n, mut sum) = (0usize, 0.0);
        for v in values.clone() {
            n += 1;
            sum += v;
        }
        if n == 0 {
            return Self::IDENTITY;
        }
        let mean = sum / n as f64;
        let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// Statistics of one group of nodes: input and output standardization
/// plus the typical rate of change of `ω` and `v`, which scales the raw
/// dynamics network output into a derivative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub u: Affine,
    pub omega: Affine,
    pub v: Affine,
    pub omega_rate: f64,
    pub v_rate: f64,
}

impl ChannelStats {
    pub const IDENTITY: ChannelStats = ChannelStats {
        u: Affine::IDENTITY,
        omega: Affine::IDENTITY,
        v: Affine::IDENTITY,
        omega_rate: 1.0,
        v_rate: 1.0,
    };
}

/// One pooled group (shared by all nodes) or one group per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub groups: Vec<ChannelStats>,
    /// Per-node `[omega, v]` output std used to weight the loss.
    #[serde(default)]
    pub output_std: Vec<[f64; 2]>,
}

impl Normalization {
    pub fn identity(groups: usize) -> Self {
        Self {
            groups: vec![ChannelStats::IDENTITY; groups.max(1)],
            output_std: Vec::new(),
        }
    }

    /// Fits statistics on a training set, pooled over nodes or per node.
    pub fn fit(set: &SampleSet, per_node: bool) -> Result<Self, ModelError> {
        if set.is_empty() {
            return Err(ModelError::Config("cannot fit normalization on an empty dataset".into()));
        }
        let n = set.n_nodes();
        let groups: Vec<Vec<usize>> = if per_node {
            (0..n).map(|i| vec![i]).collect()
        } else {
            vec![(0..n).collect()]
        };
        let dt = set.meta.dt;
        let stats = groups
            .iter()
            .map(|nodes| {
                let pairs = |s: usize, i: usize| set.history(s, i).chunks_exact(2).chain(set.targets(s, i).chunks_exact(2));
                let cells = || (0..set.len()).flat_map(move |s| nodes.iter().map(move |&i| (s, i)));
                let u = Affine::fit(cells().flat_map(|(s, i)| set.u(s, i).iter().copied()));
                let omega = Affine::fit(cells().flat_map(|(s, i)| pairs(s, i).map(|y| y[0])));
                let v = Affine::fit(cells().flat_map(|(s, i)| pairs(s, i).map(|y| y[1])));
                let rate = |c: usize| {
                    let diffs = cells().flat_map(move |(s, i)| {
                        let t = set.targets(s, i);
                        (1..t.len() / 2).map(move |k| (t[2 * k + c] - t[2 * (k - 1) + c]) / dt)
                    });
                    let a = Affine::fit(diffs);
                    (a.std * a.std + a.mean * a.mean).sqrt().max(1e-12)
                };
                ChannelStats {
                    u,
                    omega,
                    v,
                    omega_rate: rate(0),
                    v_rate: rate(1),
                }
            })
            .collect();
        let output_std = (0..n)
            .map(|i| {
                let ys = || (0..set.len()).flat_map(move |s| set.history(s, i).chunks_exact(2).chain(set.targets(s, i).chunks_exact(2)));
                [Affine::fit(ys().map(|y| y[0])).std, Affine::fit(ys().map(|y| y[1])).std]
            })
            .collect();
        Ok(Self { groups: stats, output_std })
    }

    pub fn group(&self, node: usize) -> &ChannelStats {
        if self.groups.len() == 1 {
            &self.groups[0]
        } else {
            &self.groups[node]
        }
    }

    /// Inverse output std per node and measured channel, `[node][2]`.
    pub fn loss_weights(&self, n_nodes: usize) -> Vec<f64> {
        if self.output_std.len() == n_nodes {
            return self.output_std.iter().flat_map(|s| [1.0 / s[0], 1.0 / s[1]]).collect();
        }
        (0..n_nodes)
            .flat_map(|i| {
                let g = self.group(i);
                [1.0 / g.omega.std, 1.0 / g.v.std]
            })
            .collect()
    }

    /// Appends loss scales for a new node, copied from node `from`.
    pub fn push_node_like(&mut self, from: usize) {
        if let Some(s) = self.output_std.get(from).copied() {
            self.output_std.push(s);
        }
    }

    pub fn remove_node(&mut self, pos: usize) {
        if pos < self.output_std.len() {
            self.output_std.remove(pos);
        }
    }
}

/// One prediction problem for all nodes of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRequest {
    pub n_nodes: usize,
    pub h: usize,
    pub k: usize,
    /// `[node][H + K]`: `u(t_{s-H}) .. u(t_{s+K-1})`.
    pub u: Vec<f64>,
    /// `[node][H][2]`: `y(t_{s-H+1}) .. y(t_s)`.
    pub y: Vec<f64>,
}

impl PredictionRequest {
    pub fn from_sample(set: &SampleSet, s: usize) -> Self {
        let (h, k) = (set.meta.h, set.meta.k);
        let n = set.n_nodes();
        Self {
            n_nodes: n,
            h,
            k,
            u: (0..n).flat_map(|i| set.u(s, i)[..h + k].to_vec()).collect(),
            y: (0..n).flat_map(|i| set.history(s, i).to_vec()).collect(),
        }
    }

    pub fn validate(&self, history: usize) -> Result<(), ModelError> {
        if self.h != history || self.y.len() != self.n_nodes * self.h * 2 {
            return Err(ModelError::Request(format!(
                "history must hold exactly H = {history} observations per node (got H = {}, {} values)",
                self.h,
                self.y.len()
            )));
        }
        if self.k == 0 || self.u.len() != self.n_nodes * (self.h + self.k) {
            return Err(ModelError::Request(format!(
                "control schedule must cover H + K = {} intervals per node, got {} values for {} nodes",
                self.h + self.k,
                self.u.len(),
                self.n_nodes
            )));
        }
        Ok(())
    }
}

/// Raw model inputs for a batch of samples. Rows are sample-major,
/// node-minor.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub samples: usize,
    pub n_nodes: usize,
    pub h: usize,
    pub k: usize,
    /// `[sample][node][H][3]`: `u(t_{s-H+j})`, `ω(t_{s-H+1+j})`, `v(t_{s-H+1+j})`.
    pub encoder_input: Vec<f64>,
    /// `[sample][node][2]`: `y(t_s)`.
    pub last_obs: Vec<f64>,
    /// `[K][sample][node]`: `u(t_{s+k})`.
    pub controls: Vec<f64>,
    /// `[sample][node][K][2]`.
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn from_samples(set: &SampleSet, indices: &[usize]) -> Result<Self, ModelError> {
        if indices.is_empty() {
            return Err(ModelError::Request("empty batch".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&s| s >= set.len()) {
            return Err(ModelError::Request(format!("sample {bad} out of range ({} samples)", set.len())));
        }
        let (h, k, n) = (set.meta.h, set.meta.k, set.n_nodes());
        let b = indices.len();
        let mut batch = Self::empty(b, n, h, k);
        for (bs, &s) in indices.iter().enumerate() {
            for i in 0..n {
                let r = bs * n + i;
                let (u, hist) = (set.u(s, i), set.history(s, i));
                batch.fill_row(r, u, hist);
                batch.targets[r * 2 * k..(r + 1) * 2 * k].copy_from_slice(set.targets(s, i));
            }
        }
        Ok(batch)
    }

    pub fn from_requests(reqs: &[PredictionRequest]) -> Result<Self, ModelError> {
        let first = reqs.first().ok_or_else(|| ModelError::Request("empty batch".into()))?;
        let (h, k, n) = (first.h, first.k, first.n_nodes);
        let mut batch = Self::empty(reqs.len(), n, h, k);
        for (bs, req) in reqs.iter().enumerate() {
            if (req.h, req.k, req.n_nodes) != (h, k, n) {
                return Err(ModelError::Request("requests in one batch must share H, K and node count".into()));
            }
            req.validate(h)?;
            for i in 0..n {
                let u = &req.u[i * (h + k)..(i + 1) * (h + k)];
                let hist = &req.y[i * 2 * h..(i + 1) * 2 * h];
                batch.fill_row(bs * n + i, u, hist);
            }
        }
        Ok(batch)
    }

    fn empty(b: usize, n: usize, h: usize, k: usize) -> Self {
        Self {
            samples: b,
            n_nodes: n,
            h,
            k,
            encoder_input: vec![0.0; b * n * h * ENCODER_CHANNELS],
            last_obs: vec![0.0; b * n * 2],
            controls: vec![0.0; k * b * n],
            targets: vec![0.0; b * n * k * 2],
        }
    }

    fn fill_row(&mut self, r: usize, u: &[f64], hist: &[f64]) {
        let (h, k) = (self.h, self.k);
        let rows = self.rows();
        for j in 0..h {
            let e = (r * h + j) * ENCODER_CHANNELS;
            self.encoder_input[e] = u[j];
            self.encoder_input[e + 1] = hist[2 * j];
            self.encoder_input[e + 2] = hist[2 * j + 1];
        }
        self.last_obs[2 * r..2 * r + 2].copy_from_slice(&hist[2 * (h - 1)..2 * h]);
        for kk in 0..k {
            self.controls[kk * rows + r] = u[h + kk];
        }
    }

    pub fn rows(&self) -> usize {
        self.samples * self.n_nodes
    }

    /// The same batch with only the last `h` history steps.
    pub fn with_history(&self, h: usize) -> Result<Self, ModelError> {
        if h == 0 || h > self.h {
            return Err(ModelError::Request(format!("cannot keep {h} of {} history steps", self.h)));
        }
        let skip = (self.h - h) * ENCODER_CHANNELS;
        let encoder_input = self
            .encoder_input
            .chunks(self.h * ENCODER_CHANNELS)
            .flat_map(|row| row[skip..].iter().copied())
            .collect();
        Ok(Self {
            h,
            encoder_input,
            ..self.clone()
        })
    }
}

/// A model whose parameters are recorded on a tape for one batch size.
pub trait Bound {
    /// Initial state `x(t_s)` in the model's state layout.
    fn encode(&self, tape: &mut Tape, batch: &Batch) -> Result<Var, ModelError>;
    /// Held control per prediction interval, in the model's input layout.
    fn controls(&self, tape: &mut Tape, batch: &Batch) -> Result<Vec<Var>, ModelError>;
    fn rhs(&self, tape: &mut Tape, x: Var, u: Var) -> Result<Var, ModelError>;
    /// Measured outputs `[samples * nodes, 2]` selected from a state.
    fn outputs(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError>;
}

fn to_ode(e: ModelError) -> OdeError {
    match e {
        ModelError::Autodiff(a) => OdeError::Autodiff(a),
        ModelError::Nn(NnError::Autodiff(a)) => OdeError::Autodiff(a),
        ModelError::Ode(o) => o,
        other => OdeError::Invalid(other.to_string()),
    }
}

/// Encodes once, then chains one RK4 solve per prediction interval. Returns
/// the measured outputs at `t_{s+1} .. t_{s+K}`.
pub fn unroll(tape: &mut Tape, bound: &dyn Bound, batch: &Batch, dt: f64, substeps: usize) -> Result<Vec<Var>, ModelError> {
    Ok(unroll_states(tape, bound, batch, dt, substeps)?
        .into_iter()
        .skip(1)
        .map(|x| bound.outputs(tape, x))
        .collect::<Result<_, _>>()?)
}

/// Like [`unroll`] but returns the full states `x(t_s) .. x(t_{s+K})`.
pub fn unroll_states(tape: &mut Tape, bound: &dyn Bound, batch: &Batch, dt: f64, substeps: usize) -> Result<Vec<Var>, ModelError> {
    let x0 = bound.encode(tape, batch)?;
    let controls = bound.controls(tape, batch)?;
    let mut states = vec![x0];
    states.extend(integrate_tape(
        tape,
        |t: &mut Tape, x, u| bound.rhs(t, x, u).map_err(to_ode),
        x0,
        &controls,
        dt,
        substeps,
    )?);
    Ok(states)
}

/// `L = 1/(|V| N K) Σ ||W (y - ŷ)||²` with per-channel weights `W`
/// (`[node][2]`), recorded on the tape.
pub fn weighted_loss(tape: &mut Tape, outputs: &[Var], batch: &Batch, weights: &[f64]) -> Result<Var, ModelError> {
    let (rows, k, n) = (batch.rows(), batch.k, batch.n_nodes);
    if outputs.len() != k || weights.len() != 2 * n {
        return Err(ModelError::Request(format!(
            "loss needs {k} outputs and {} weights, got {} and {}",
            2 * n,
            outputs.len(),
            weights.len()
        )));
    }
    let pred = tape.concat(outputs, 1)?;
    let target = tape.constant(&[rows, 2 * k], batch.targets.clone())?;
    let w: Vec<f64> = (0..rows)
        .flat_map(|r| (0..k).flat_map(move |_| [weights[2 * (r % n)], weights[2 * (r % n) + 1]]))
        .collect();
    let w = tape.constant(&[rows, 2 * k], w)?;
    let diff = tape.sub(pred, target)?;
    let diff = tape.mul(diff, w)?;
    let sq = tape.square(diff);
    let mean = tape.mean(sq);
    Ok(tape.scale(mean, 2.0))
}

/// Parameter counts per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub dynamics: usize,
    pub message: usize,
    pub encoder: usize,
    pub node_embeddings: usize,
    pub edge_embeddings: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.dynamics + self.message + self.encoder + self.node_embeddings + self.edge_embeddings
    }
}

/// A trained or trainable model of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Mpg(MpgNodeModel),
    Monolith(MonolithModel),
}

/// Samples per tape when predicting without gradients.
const PREDICT_CHUNK: usize = 256;

impl Model {
    /// Builds a freshly initialized model whose normalization is fitted on `train`.
    pub fn new<R: Rng + ?Sized>(
        kind: ModelKind,
        cfg: ModelConfig,
        topology: &GridTopology,
        train: &SampleSet,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if train.meta.node_ids != topology.node_ids() {
            return Err(ModelError::Topology(format!(
                "dataset nodes {:?} differ from grid nodes {:?}",
                train.meta.node_ids,
                topology.node_ids()
            )));
        }
        if train.meta.h != cfg.history {
            return Err(ModelError::Config(format!(
                "dataset history H = {} differs from model history {}",
                train.meta.h, cfg.history
            )));
        }
        Ok(match kind {
            ModelKind::Mpg => Model::Mpg(MpgNodeModel::new(cfg, topology, Normalization::fit(train, false)?, rng)?),
            ModelKind::Monolith => Model::Monolith(MonolithModel::new(cfg, topology, Normalization::fit(train, true)?, rng)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Mpg(_) => ModelKind::Mpg,
            Model::Monolith(_) => ModelKind::Monolith,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Mpg(m) => m.config(),
            Model::Monolith(m) => m.config(),
        }
    }

    /// Changes the solver substeps used for prediction and training.
    pub fn set_substeps(&mut self, substeps: usize) -> Result<(), ModelError> {
        if substeps == 0 {
            return Err(ModelError::Config("substeps must be >= 1".into()));
        }
        match self {
            Model::Mpg(m) => m.config_mut().substeps = substeps,
            Model::Monolith(m) => m.config_mut().substeps = substeps,
        }
        Ok(())
    }

    pub fn topology(&self) -> &GridTopology {
        match self {
            Model::Mpg(m) => m.topology(),
            Model::Monolith(m) => m.topology(),
        }
    }

    pub fn normalization(&self) -> &Normalization {
        match self {
            Model::Mpg(m) => m.normalization(),
            Model::Monolith(m) => m.normalization(),
        }
    }

    /// Refits the per-node loss scales on `set`; input statistics are kept.
    pub fn refit_loss_scales(&mut self, set: &SampleSet) -> Result<(), ModelError> {
        if set.n_nodes() != self.n_nodes() {
            return Err(ModelError::Topology(format!("dataset has {} nodes, model has {}", set.n_nodes(), self.n_nodes())));
        }
        let scales = Normalization::fit(set, true)?.output_std;
        match self {
            Model::Mpg(m) => m.normalization_mut().output_std = scales,
            Model::Monolith(m) => m.normalization_mut().output_std = scales,
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.topology().n_nodes()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Model::Mpg(m) => m.params(),
            Model::Monolith(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Mpg(m) => m.params_mut(),
            Model::Monolith(m) => m.params_mut(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            Model::Mpg(m) => m.param_names(),
            Model::Monolith(m) => m.param_names(),
        }
    }

    pub fn count_parameters(&self) -> ParamBreakdown {
        match self {
            Model::Mpg(m) => m.count_parameters(),
            Model::Monolith(m) => m.count_parameters(),
        }
    }

    /// Records the parameters on `tape` and returns their handles (in
    /// [`Model::params`] order) with the bound model.
    pub fn bind<'a>(&'a self, tape: &mut Tape, track: bool, samples: usize) -> Result<(Vec<Var>, Box<dyn Bound + 'a>), ModelError> {
        let vars = bind_params(tape, &self.params(), track);
        let bound = self.bind_with(tape, &vars, samples)?;
        Ok((vars, bound))
    }

    /// Binds to parameter handles already on the tape, in [`Model::params`] order.
    pub fn bind_with<'a>(&'a self, tape: &mut Tape, vars: &[Var], samples: usize) -> Result<Box<dyn Bound + 'a>, ModelError> {
        Ok(match self {
            Model::Mpg(m) => Box::new(m.bind_with(tape, vars, samples)?),
            Model::Monolith(m) => Box::new(m.bind_with(tape, vars, samples)?),
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.n_nodes != self.n_nodes() {
            return Err(ModelError::Request(format!(
                "batch has {} nodes, model has {}",
                batch.n_nodes,
                self.n_nodes()
            )));
        }
        if batch.h != self.config().history {
            return Err(ModelError::Request(format!(
                "history must hold exactly H = {} observations per node, got {}",
                self.config().history,
                batch.h
            )));
        }
        Ok(())
    }

    /// Normalized training loss of a batch, recorded on `tape`.
    pub fn loss_on_tape(&self, tape: &mut Tape, track: bool, batch: &Batch) -> Result<(Vec<Var>, Var), ModelError> {
        let vars = bind_params(tape, &self.params(), track);
        let loss = self.loss_with(tape, &vars, batch)?;
        Ok((vars, loss))
    }

    /// [`Model::loss_on_tape`] with parameter handles supplied by the caller.
    pub fn loss_with(&self, tape: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Var, ModelError> {
        self.check_batch(batch)?;
        let bound = self.bind_with(tape, vars, batch.samples)?;
        let cfg = self.config();
        let outputs = unroll(tape, bound.as_ref(), batch, cfg.dt, cfg.substeps)?;
        let weights = self.normalization().loss_weights(self.n_nodes());
        weighted_loss(tape, &outputs, batch, &weights)
    }

    /// Predictions `[sample][node][K][2]` for one batch on a single tape.
    /// Histories longer than the model's `H` are cut to their last `H` steps.
    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<f64>, ModelError> {
        let trimmed;
        let batch = if batch.h > self.config().history {
            trimmed = batch.with_history(self.config().history)?;
            &trimmed
        } else {
            batch
        };
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        tape.set_nan_check(false);
        let (_, bound) = self.bind(&mut tape, false, batch.samples)?;
        let cfg = self.config();
        let outputs = unroll(&mut tape, bound.as_ref(), batch, cfg.dt, cfg.substeps)?;
        Ok(collect_outputs(&tape, &outputs, batch))
    }

    /// Predictions `[sample][node][K][2]` for `indices` of `set`, in chunks.
    pub fn predict_samples(&self, set: &SampleSet, indices: &[usize]) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(indices.len() * set.n_nodes() * set.meta.k * 2);
        for chunk in indices.chunks(PREDICT_CHUNK) {
            out.extend(self.predict_batch(&Batch::from_samples(set, chunk)?)?);
        }
        Ok(out)
    }

    /// Predictions `[node][K][2]` for one request.
    pub fn predict_unrolled(&self, req: &PredictionRequest) -> Result<Vec<f64>, ModelError> {
        req.validate(req.h)?;
        self.predict_batch(&Batch::from_requests(std::slice::from_ref(req))?)
    }

    /// Digest of all parameter values.
    pub fn checksum(&self) -> u64 {
        params_checksum(&self.params())
    }
}

/// Stable 64-bit digest of parameter shapes and values.
pub fn params_checksum(params: &[&Tensor]) -> u64 {
    let mut h = Sha256::new();
    for p in params {
        for d in p.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Gathers per-step output handles into `[sample][node][K][2]`.
pub fn collect_outputs(tape: &Tape, outputs: &[Var], batch: &Batch) -> Vec<f64> {
    let (rows, k) = (batch.rows(), outputs.len());
    let mut out = vec![0.0; rows * k * 2];
    for (kk, &o) in outputs.iter().enumerate() {
        for (r, y) in tape.value(o).chunks_exact(2).enumerate() {
            out[(r * k + kk) * 2..(r * k + kk) * 2 + 2].copy_from_slice(y);
        }
    }
    out
}
