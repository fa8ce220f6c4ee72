use rand::Rng;

use super::mpg::normalized_encoder_input;
use super::{Batch, Bound, ModelConfig, ModelError, Normalization, ParamBreakdown, ENCODER_CHANNELS, MEASURED_PER_NODE};
use crate::autodiff::{Tape, Tensor, Var};
use crate::nn::{bind_params, blocks_for_history, Mlp, MlpConfig, MlpVars, ParamCursor, Tcn, TcnConfig, TcnVars};
use crate::powergrid::GridTopology;

/// Dense neural ODE over the stacked state of all nodes. The state keeps the
/// per-node layout `[ω_i, v_i, latent_i]` for `i = 1..|V|`; one encoder sees
/// every node's history stacked channel-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct MonolithModel {
    cfg: ModelConfig,
    topology: GridTopology,
    norm: Normalization,
    f: Mlp,
    h: Tcn,
}

impl MonolithModel {
    pub fn f_config(cfg: &ModelConfig, n: usize) -> MlpConfig {
        MlpConfig {
            input_dim: n * (cfg.state_dim() + 1),
            hidden_layers: cfg.hidden_layers,
            hidden_width: cfg.hidden_width,
            output_dim: n * cfg.state_dim(),
            activation: cfg.activation,
        }
    }

    pub fn h_config(cfg: &ModelConfig, n: usize) -> Result<TcnConfig, ModelError> {
        Ok(TcnConfig {
            in_channels: n * ENCODER_CHANNELS,
            hidden_channels: cfg.tcn_channels.max(n * ENCODER_CHANNELS),
            out_dim: n * cfg.latent_dim,
            kernel_size: cfg.tcn_kernel,
            blocks: blocks_for_history(cfg.tcn_kernel, cfg.history)?,
        })
    }

    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, topology: &GridTopology, norm: Normalization, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let n = topology.n_nodes();
        let f = Mlp::new(Self::f_config(&cfg, n), rng)?;
        let h = Tcn::new(Self::h_config(&cfg, n)?, rng)?;
        Self::from_parts(cfg, topology.clone(), norm, f, h)
    }

    pub fn from_parts(cfg: ModelConfig, topology: GridTopology, norm: Normalization, f: Mlp, h: Tcn) -> Result<Self, ModelError> {
        cfg.validate()?;
        let n = topology.n_nodes();
        if n == 0 {
            return Err(ModelError::Config("monolith model needs at least one node".into()));
        }
        if norm.groups.len() != n && norm.groups.len() != 1 {
            return Err(ModelError::Config(format!(
                "normalization has {} groups for {n} nodes",
                norm.groups.len()
            )));
        }
        if f.config() != &Self::f_config(&cfg, n) || h.config() != &Self::h_config(&cfg, n)? {
            return Err(ModelError::Config("network shapes do not match the model configuration".into()));
        }
        Ok(Self { cfg, topology, norm, f, h })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub(super) fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.cfg
    }

    pub fn topology(&self) -> &GridTopology {
        &self.topology
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub(super) fn normalization_mut(&mut self) -> &mut Normalization {
        &mut self.norm
    }

    pub fn dynamics(&self) -> &Mlp {
        &self.f
    }

    pub fn encoder(&self) -> &Tcn {
        &self.h
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.f.params();
        p.extend(self.h.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.f.params_mut();
        p.extend(self.h.params_mut());
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.f.param_names("f");
        n.extend(self.h.param_names("h"));
        n
    }

    pub fn count_parameters(&self) -> ParamBreakdown {
        ParamBreakdown {
            dynamics: self.f.config().param_count(),
            message: 0,
            encoder: self.h.config().param_count(),
            node_embeddings: 0,
            edge_embeddings: 0,
        }
    }

    pub fn bind(&self, tape: &mut Tape, track: bool, samples: usize) -> Result<(Vec<Var>, MonolithBound<'_>), ModelError> {
        let vars = bind_params(tape, &self.params(), track);
        let bound = self.bind_with(tape, &vars, samples)?;
        Ok((vars, bound))
    }

    /// Binds to parameter handles already on the tape, in [`Self::params`] order.
    pub fn bind_with(&self, tape: &mut Tape, vars: &[Var], samples: usize) -> Result<MonolithBound<'_>, ModelError> {
        if vars.len() != self.params().len() {
            return Err(ModelError::Config(format!("expected {} parameter handles, got {}", self.params().len(), vars.len())));
        }
        let mut cur = ParamCursor::new(vars);
        let f = self.f.bind_from(&mut cur);
        let h = self.h.bind_from(&mut cur);
        let n = self.topology.n_nodes();
        let sd = self.cfg.state_dim();
        let mut shift = vec![0.0; n * sd];
        let mut scale = vec![1.0; n * sd];
        let mut out = vec![1.0; n * sd];
        let mut u_shift = vec![0.0; n];
        let mut u_scale = vec![1.0; n];
        for i in 0..n {
            let g = self.norm.group(i);
            (shift[i * sd], scale[i * sd], out[i * sd]) = (-g.omega.mean, 1.0 / g.omega.std, g.omega_rate);
            (shift[i * sd + 1], scale[i * sd + 1], out[i * sd + 1]) = (-g.v.mean, 1.0 / g.v.std, g.v_rate);
            (u_shift[i], u_scale[i]) = (-g.u.mean, 1.0 / g.u.std);
        }
        let bound = MonolithBound {
            model: self,
            f,
            h,
            samples,
            x_shift: tape.constant(&[n * sd], shift)?,
            x_scale: tape.constant(&[n * sd], scale)?,
            out_scale: tape.constant(&[n * sd], out)?,
            u_shift: tape.constant(&[n], u_shift)?,
            u_scale: tape.constant(&[n], u_scale)?,
        };
        Ok(bound)
    }
}

/// [`MonolithModel`] recorded on a tape. States are `[samples, nodes * (2 + latent)]`.
pub struct MonolithBound<'a> {
    model: &'a MonolithModel,
    f: MlpVars,
    h: TcnVars,
    samples: usize,
    x_shift: Var,
    x_scale: Var,
    out_scale: Var,
    u_shift: Var,
    u_scale: Var,
}

impl Bound for MonolithBound<'_> {
    fn encode(&self, tape: &mut Tape, batch: &Batch) -> Result<Var, ModelError> {
        let n = self.model.topology.n_nodes();
        if batch.samples != self.samples || batch.n_nodes != n {
            return Err(ModelError::Request(format!(
                "batch of {} samples x {} nodes, model bound for {} x {n}",
                batch.samples, batch.n_nodes, self.samples
            )));
        }
        let per_node = normalized_encoder_input(batch, &self.model.norm);
        // [sample][node][H][3] -> [sample][H][node * 3]
        let h = batch.h;
        let c = ENCODER_CHANNELS;
        let mut seq = vec![0.0; per_node.len()];
        for s in 0..self.samples {
            for i in 0..n {
                for j in 0..h {
                    let src = ((s * n + i) * h + j) * c;
                    let dst = ((s * h + j) * n + i) * c;
                    seq[dst..dst + c].copy_from_slice(&per_node[src..src + c]);
                }
            }
        }
        let seq = tape.constant(&[self.samples, h, n * c], seq)?;
        let latent = self.h.encode(tape, seq)?;
        let latent = tape.reshape(latent, &[self.samples * n, self.model.cfg.latent_dim])?;
        let measured = tape.constant(&[self.samples * n, MEASURED_PER_NODE], batch.last_obs.clone())?;
        let x = tape.concat(&[measured, latent], 1)?;
        Ok(tape.reshape(x, &[self.samples, n * self.model.cfg.state_dim()])?)
    }

    fn controls(&self, tape: &mut Tape, batch: &Batch) -> Result<Vec<Var>, ModelError> {
        let n = batch.n_nodes;
        batch
            .controls
            .chunks_exact(self.samples * n)
            .map(|u| Ok(tape.constant(&[self.samples, n], u.to_vec())?))
            .collect()
    }

    fn rhs(&self, tape: &mut Tape, x: Var, u: Var) -> Result<Var, ModelError> {
        let xs = tape.add(x, self.x_shift)?;
        let xn = tape.mul(xs, self.x_scale)?;
        let us = tape.add(u, self.u_shift)?;
        let un = tape.mul(us, self.u_scale)?;
        let input = tape.concat(&[xn, un], 1)?;
        let out = self.f.forward(tape, input)?;
        Ok(tape.mul(out, self.out_scale)?)
    }

    fn outputs(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        let n = self.model.topology.n_nodes();
        let per_node = tape.reshape(x, &[self.samples * n, self.model.cfg.state_dim()])?;
        Ok(tape.slice(per_node, 1, 0, MEASURED_PER_NODE)?)
    }
}
