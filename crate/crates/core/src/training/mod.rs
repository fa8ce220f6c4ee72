//! Mini-batch training of [`Model`]s: loss, Adam, early stopping and a
//! deterministic hyperparameter sweep.

use std::fmt::Write as _;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::datagen::SampleSet;
use crate::models::{Batch, Model, ModelConfig, ModelError, ModelKind};
use crate::odeint::OdeError;
use crate::powergrid::GridTopology;
use crate::rng::stream_rng;

#[cfg(test)]
mod tests;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss or gradient at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// RK4 steps per sampling interval during training and validation.
    pub substeps: usize,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
    /// Independent tapes per mini-batch; shard gradients are summed.
    pub shards: usize,
    /// Parameter name prefixes excluded from updates. Empty by default.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            learning_rate: 1e-3,
            max_epochs: 2000,
            patience: 50,
            seed: 0,
            substeps: 1,
            eval_every: 1,
            shards: 1,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.substeps == 0 || self.eval_every == 0 || self.shards == 0 {
            return Err(TrainError::Config("substeps, eval_every and shards must be >= 1".into()));
        }
        Ok(())
    }
}

/// Plain (unweighted) loss `1/(|V| N K) Σ ||y - ŷ||²` over `[sample][node][K][2]` arrays.
pub fn mse_loss(pred: &[f64], targets: &[f64], n_nodes: usize, samples: usize, k: usize) -> Result<f64, TrainError> {
    let expected = n_nodes * samples * k * 2;
    if pred.len() != expected || targets.len() != expected {
        return Err(TrainError::Shape(format!(
            "expected {expected} values for {samples} samples x {n_nodes} nodes x {k} steps, got {} and {}",
            pred.len(),
            targets.len()
        )));
    }
    if expected == 0 {
        return Err(TrainError::Shape("empty prediction".into()));
    }
    let sse: f64 = pred.iter().zip(targets).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / (n_nodes * samples * k) as f64)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Advances the moments with `grads` and returns the updates `Δθ` without
    /// applying them. Entries with `mask[i] == false` get zero updates and
    /// keep their moments.
    pub fn updates(&mut self, grads: &[Vec<f64>], lr: f64, mask: &[bool]) -> Vec<Vec<f64>> {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut out = Vec::with_capacity(grads.len());
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            assert_eq!(g.len(), m.len(), "gradient {i} has the wrong length");
            if !mask.get(i).copied().unwrap_or(true) {
                out.push(vec![0.0; g.len()]);
                continue;
            }
            let d = g
                .iter()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|(&g, (m, v))| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    -lr * (*m / c1) / ((*v / c2).sqrt() + self.eps)
                })
                .collect();
            out.push(d);
        }
        out
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64, mask: &[bool]) {
        let upd = self.updates(grads, lr, mask);
        for (p, d) in params.iter_mut().zip(&upd) {
            p.data_mut().iter_mut().zip(d).for_each(|(x, d)| *x += d);
        }
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Lowest validation loss seen up to this epoch.
    pub best: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch 0 holds the losses of the initial parameters.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub wall_time_s: f64,
    pub checksum: u64,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss,best`; unvalidated epochs leave `val_loss` empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,best\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, val, e.best).expect("writing to a String");
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "epochs={} best_epoch={} best_val_loss={} initial_train_loss={} final_train_loss={} stopped_early={} wall_time_s={:.1} checksum={:016x}",
            self.epochs.len().saturating_sub(1),
            self.best_epoch,
            self.best_val_loss,
            self.epochs.first().map_or(f64::NAN, |e| e.train_loss),
            self.epochs.last().map_or(f64::NAN, |e| e.train_loss),
            self.stopped_early,
            self.wall_time_s,
            self.checksum
        )
    }

    /// Report without timing, for embedding in reproducible artifacts.
    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "epochs": self.epochs.len().saturating_sub(1),
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped_early": self.stopped_early,
            "checksum": format!("{:016x}", self.checksum),
        })
    }
}

fn check_compat(model: &Model, set: &SampleSet, what: &str) -> Result<(), TrainError> {
    if set.is_empty() {
        return Err(TrainError::Config(format!("{what} set is empty")));
    }
    if set.meta.node_ids != model.topology().node_ids() {
        return Err(TrainError::Model(ModelError::Topology(format!(
            "{what} set nodes {:?} differ from model nodes {:?}",
            set.meta.node_ids,
            model.topology().node_ids()
        ))));
    }
    if set.meta.h != model.config().history {
        return Err(TrainError::Config(format!(
            "{what} set has H = {}, model expects {}",
            set.meta.h,
            model.config().history
        )));
    }
    Ok(())
}

const EVAL_CHUNK: usize = 256;

/// Normalized training loss averaged over every sample of `set`.
pub fn dataset_loss(model: &Model, set: &SampleSet) -> Result<f64, TrainError> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = Batch::from_samples(set, chunk)?;
        let mut tape = Tape::new();
        tape.set_nan_check(false);
        let (_, loss) = model.loss_on_tape(&mut tape, false, &batch)?;
        total += tape.value(loss)[0] * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Loss and summed gradients of one mini-batch, split over `shards` tapes.
/// Each shard's loss is weighted by its share of the batch, so the result
/// equals the single-tape gradient up to rounding.
pub fn batch_gradients(model: &Model, set: &SampleSet, indices: &[usize], shards: usize) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let shards = shards.clamp(1, indices.len().max(1));
    let per = indices.len().div_ceil(shards);
    let one = |part: &[usize]| -> Result<(f64, Vec<Vec<f64>>), TrainError> {
        let batch = Batch::from_samples(set, part)?;
        let mut tape = Tape::new();
        tape.set_nan_check(false);
        let (vars, loss) = model.loss_on_tape(&mut tape, true, &batch)?;
        let w = part.len() as f64 / indices.len() as f64;
        let scaled = tape.scale(loss, w);
        tape.backward(scaled)?;
        let grads = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
        Ok((tape.value(scaled)[0], grads))
    };
    let results: Vec<_> = if shards == 1 {
        vec![one(indices)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = indices.chunks(per).map(|part| s.spawn(move || one(part))).collect();
            handles.into_iter().map(|h| h.join().expect("shard worker panicked")).collect()
        })
    };
    let mut loss = 0.0;
    let mut grads: Option<Vec<Vec<f64>>> = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => acc
                .iter_mut()
                .zip(&g)
                .for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y)),
        }
    }
    Ok((loss, grads.unwrap_or_default()))
}

/// Attaches the training position to solver blow-ups.
fn locate(e: TrainError, epoch: usize, batch: usize) -> TrainError {
    match e {
        TrainError::Model(ModelError::Ode(OdeError::NonFinite { .. })) => TrainError::NonFinite { epoch, batch },
        other => other,
    }
}

/// Trains with seeded per-epoch shuffling and early stopping on `val`.
/// Returns the parameters with the lowest validation loss.
pub fn train(mut model: Model, train_set: &SampleSet, val_set: &SampleSet, cfg: &TrainConfig) -> Result<(Model, TrainReport), TrainError> {
    cfg.validate()?;
    check_compat(&model, train_set, "training")?;
    check_compat(&model, val_set, "validation")?;
    model.set_substeps(cfg.substeps)?;
    let start = Instant::now();
    let names = model.param_names();
    let mask: Vec<bool> = names.iter().map(|n| !cfg.frozen.iter().any(|f| n.starts_with(f.as_str()))).collect();
    let mut adam = Adam::new(&model.params().iter().map(|p| p.len()).collect::<Vec<_>>());

    let initial_val = dataset_loss(&model, val_set)?;
    let initial_train = dataset_loss(&model, train_set)?;
    if !initial_val.is_finite() || !initial_train.is_finite() {
        return Err(TrainError::NonFinite { epoch: 0, batch: 0 });
    }
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_loss: initial_train,
        val_loss: Some(initial_val),
        best: initial_val,
    }];
    let mut best = (0, initial_val, model.clone());
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.seed, &format!("shuffle-{epoch}")));
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = batch_gradients(&model, train_set, chunk, cfg.shards).map_err(|e| locate(e, epoch, b))?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { epoch, batch: b });
            }
            sum += loss * chunk.len() as f64;
            adam.step(&mut model.params_mut(), &grads, cfg.learning_rate, &mask);
        }
        let train_loss = sum / train_set.len() as f64;
        let validate = epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs;
        let val_loss = if validate {
            let n_batches = order.len().div_ceil(cfg.batch_size);
            let v = dataset_loss(&model, val_set).map_err(|e| locate(e, epoch, n_batches))?;
            if !v.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: n_batches });
            }
            if v < best.1 {
                best = (epoch, v, model.clone());
            }
            Some(v)
        } else {
            None
        };
        debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:?}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            best: best.1,
        });
        if epoch - best.0 >= cfg.patience && epoch < cfg.max_epochs {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, best_val_loss, best_model) = best;
    let report = TrainReport {
        epochs,
        best_epoch,
        best_val_loss,
        stopped_early,
        wall_time_s: start.elapsed().as_secs_f64(),
        checksum: best_model.checksum(),
    };
    info!("{}", report.summary());
    Ok((best_model, report))
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
            .collect(),
    }
}

/// Cartesian hyperparameter grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub hidden_layers: Vec<usize>,
    pub hidden_width: Vec<usize>,
    pub tcn_channels: Vec<usize>,
    pub learning_rate: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self::menu(3)
    }
}

impl SweepGrid {
    /// Depths 1..3, widths and TCN channels in {128, 256, 512}, and
    /// `lr_points` learning rates log-spaced over [1e-4, 1e-2].
    pub fn menu(lr_points: usize) -> Self {
        Self {
            hidden_layers: vec![1, 2, 3],
            hidden_width: vec![128, 256, 512],
            tcn_channels: vec![128, 256, 512],
            learning_rate: log_grid(1e-4, 1e-2, lr_points),
        }
    }

    pub fn len(&self) -> usize {
        self.hidden_layers.len() * self.hidden_width.len() * self.tcn_channels.len() * self.learning_rate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Points in lexicographic order (depth, width, channels, lr).
    pub fn points(&self, model: &ModelConfig, train: &TrainConfig) -> Vec<(ModelConfig, TrainConfig)> {
        let mut out = Vec::with_capacity(self.len());
        for &hl in &self.hidden_layers {
            for &hw in &self.hidden_width {
                for &tc in &self.tcn_channels {
                    for &lr in &self.learning_rate {
                        let m = ModelConfig {
                            hidden_layers: hl,
                            hidden_width: hw,
                            tcn_channels: tc,
                            ..model.clone()
                        };
                        let t = TrainConfig {
                            learning_rate: lr,
                            ..train.clone()
                        };
                        out.push((m, t));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rank: usize,
    /// Position in the input list.
    pub index: usize,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Normalized loss on the selection set; infinite if training diverged.
    pub selection_loss: f64,
    pub report: Option<TrainReport>,
    pub model: Option<Model>,
}

/// Trains every configuration and ranks by loss on `sel`. Each model is
/// initialized from the `init` stream of its training seed; a diverging
/// configuration is ranked last instead of aborting the sweep.
pub fn sweep(
    kind: ModelKind,
    configs: &[(ModelConfig, TrainConfig)],
    topology: &GridTopology,
    train_set: &SampleSet,
    val_set: &SampleSet,
    sel_set: &SampleSet,
) -> Result<Vec<SweepResult>, TrainError> {
    if configs.is_empty() {
        return Err(TrainError::Config("sweep needs at least one configuration".into()));
    }
    let mut results = Vec::with_capacity(configs.len());
    for (index, (mc, tc)) in configs.iter().enumerate() {
        let mut rng = stream_rng(tc.seed, "init");
        let model = Model::new(kind, mc.clone(), topology, train_set, &mut rng)?;
        let (selection_loss, report, model) = match train(model, train_set, val_set, tc) {
            Ok((m, r)) => {
                let l = dataset_loss(&m, sel_set)?;
                (if l.is_finite() { l } else { f64::INFINITY }, Some(r), Some(m))
            }
            Err(TrainError::NonFinite { epoch, batch }) => {
                info!("sweep point {index} diverged at epoch {epoch}, batch {batch}");
                (f64::INFINITY, None, None)
            }
            Err(e) => return Err(e),
        };
        info!("sweep point {index}: selection loss {selection_loss:.6e}");
        results.push(SweepResult {
            rank: 0,
            index,
            model_config: mc.clone(),
            train_config: tc.clone(),
            selection_loss,
            report,
            model,
        });
    }
    results.sort_by(|a, b| a.selection_loss.total_cmp(&b.selection_loss).then(a.index.cmp(&b.index)));
    for (r, res) in results.iter_mut().enumerate() {
        res.rank = r + 1;
    }
    Ok(results)
}

/// `rank,index,hidden_layers,hidden_width,tcn_channels,learning_rate,selection_loss,best_epoch`
pub fn sweep_csv(results: &[SweepResult]) -> String {
    let mut s = String::from("rank,index,hidden_layers,hidden_width,tcn_channels,learning_rate,selection_loss,best_epoch\n");
    for r in results {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.rank,
            r.index,
            r.model_config.hidden_layers,
            r.model_config.hidden_width,
            r.model_config.tcn_channels,
            r.train_config.learning_rate,
            r.selection_loss,
            r.report.as_ref().map(|x| x.best_epoch.to_string()).unwrap_or_default()
        )
        .expect("writing to a String");
    }
    s
}

