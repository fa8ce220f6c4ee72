use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{
    Affine, Batch, Bound, ModelConfig, ModelError, Normalization, ParamBreakdown, EDGE_EMBEDDING_DIM, ENCODER_CHANNELS,
    MEASURED_PER_NODE, MESSAGE_DIM, NODE_EMBEDDING_DIM,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::nn::{bind_params, blocks_for_history, Mlp, MlpConfig, MlpVars, ParamCursor, Tcn, TcnConfig, TcnVars};
use crate::powergrid::GridTopology;

/// Message-passing graph neural ODE. Per node `i` with state
/// `x_i = [ω_i, v_i, latent_i]`:
///
/// ```text
/// m_i  = Σ_{j ∈ N(i)} m_θ(x_i, x_j, e_ij)
/// dx_i = f_θ(x_i, u_i, m_i, n_i)
/// ```
///
/// `f_θ`, `m_θ` and the encoder `h_θ` are shared by all nodes and edges;
/// only the node embeddings `n_i` and edge embeddings `e_ij` differ.
#[derive(Clone, Debug, PartialEq)]
pub struct MpgNodeModel {
    cfg: ModelConfig,
    topology: GridTopology,
    norm: Normalization,
    f: Mlp,
    m: Mlp,
    h: Tcn,
    /// `[nodes, 8]`, rows in topology node order.
    node_embeddings: Tensor,
    /// `[edges, 4]`, rows in topology edge order.
    edge_embeddings: Tensor,
}

impl MpgNodeModel {
    pub fn f_config(cfg: &ModelConfig) -> MlpConfig {
        MlpConfig {
            input_dim: cfg.state_dim() + 1 + MESSAGE_DIM + NODE_EMBEDDING_DIM,
            hidden_layers: cfg.hidden_layers,
            hidden_width: cfg.hidden_width,
            output_dim: cfg.state_dim(),
            activation: cfg.activation,
        }
    }

    pub fn m_config(cfg: &ModelConfig) -> MlpConfig {
        MlpConfig {
            input_dim: 2 * cfg.state_dim() + EDGE_EMBEDDING_DIM,
            hidden_layers: cfg.hidden_layers,
            hidden_width: cfg.hidden_width,
            output_dim: MESSAGE_DIM,
            activation: cfg.activation,
        }
    }

    pub fn h_config(cfg: &ModelConfig) -> Result<TcnConfig, ModelError> {
        Ok(TcnConfig {
            in_channels: ENCODER_CHANNELS,
            hidden_channels: cfg.tcn_channels.max(ENCODER_CHANNELS),
            out_dim: cfg.latent_dim,
            kernel_size: cfg.tcn_kernel,
            blocks: blocks_for_history(cfg.tcn_kernel, cfg.history)?,
        })
    }

    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, topology: &GridTopology, norm: Normalization, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let f = Mlp::new(Self::f_config(&cfg), rng)?;
        let m = Mlp::new(Self::m_config(&cfg), rng)?;
        let h = Tcn::new(Self::h_config(&cfg)?, rng)?;
        let node_embeddings = gaussian(&[topology.n_nodes(), NODE_EMBEDDING_DIM], cfg.embedding_init_std, rng);
        let edge_embeddings = gaussian(&[topology.n_edges(), EDGE_EMBEDDING_DIM], cfg.embedding_init_std, rng);
        Self::from_parts(cfg, topology.clone(), norm, f, m, h, node_embeddings, edge_embeddings)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        cfg: ModelConfig,
        topology: GridTopology,
        norm: Normalization,
        f: Mlp,
        m: Mlp,
        h: Tcn,
        mut node_embeddings: Tensor,
        mut edge_embeddings: Tensor,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        if norm.groups.len() != 1 {
            return Err(ModelError::Config(format!(
                "graph model needs pooled normalization, got {} groups",
                norm.groups.len()
            )));
        }
        if !norm.output_std.is_empty() && norm.output_std.len() != topology.n_nodes() {
            return Err(ModelError::Config("loss scales do not match the node count".into()));
        }
        if f.config() != &Self::f_config(&cfg) || m.config() != &Self::m_config(&cfg) || h.config() != &Self::h_config(&cfg)? {
            return Err(ModelError::Config("network shapes do not match the model configuration".into()));
        }
        if node_embeddings.shape() != [topology.n_nodes(), NODE_EMBEDDING_DIM]
            || edge_embeddings.shape() != [topology.n_edges(), EDGE_EMBEDDING_DIM]
        {
            return Err(ModelError::Config(format!(
                "embedding shapes {:?} / {:?} do not match {} nodes and {} edges",
                node_embeddings.shape(),
                edge_embeddings.shape(),
                topology.n_nodes(),
                topology.n_edges()
            )));
        }
        node_embeddings.set_requires_grad(true);
        edge_embeddings.set_requires_grad(true);
        Ok(Self {
            cfg,
            topology,
            norm,
            f,
            m,
            h,
            node_embeddings,
            edge_embeddings,
        })
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

    pub fn message(&self) -> &Mlp {
        &self.m
    }

    pub fn encoder(&self) -> &Tcn {
        &self.h
    }

    pub fn node_embeddings(&self) -> &Tensor {
        &self.node_embeddings
    }

    pub fn edge_embeddings(&self) -> &Tensor {
        &self.edge_embeddings
    }

    pub fn node_embeddings_mut(&mut self) -> &mut Tensor {
        &mut self.node_embeddings
    }

    pub fn edge_embeddings_mut(&mut self) -> &mut Tensor {
        &mut self.edge_embeddings
    }

    pub fn node_embedding(&self, id: usize) -> Option<&[f64]> {
        let i = self.topology.index_of(id)?;
        Some(&self.node_embeddings.data()[i * NODE_EMBEDDING_DIM..(i + 1) * NODE_EMBEDDING_DIM])
    }

    pub fn edge_embedding(&self, a: usize, b: usize) -> Option<&[f64]> {
        let e = self.topology.edge_by_ids(a, b)?;
        Some(&self.edge_embeddings.data()[e * EDGE_EMBEDDING_DIM..(e + 1) * EDGE_EMBEDDING_DIM])
    }

    /// Order: dynamics MLP, message MLP, encoder, node embeddings, edge embeddings.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.f.params();
        p.extend(self.m.params());
        p.extend(self.h.params());
        p.push(&self.node_embeddings);
        p.push(&self.edge_embeddings);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.f.params_mut();
        p.extend(self.m.params_mut());
        p.extend(self.h.params_mut());
        p.push(&mut self.node_embeddings);
        p.push(&mut self.edge_embeddings);
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.f.param_names("f");
        n.extend(self.m.param_names("m"));
        n.extend(self.h.param_names("h"));
        n.push("node_embeddings".into());
        n.push("edge_embeddings".into());
        n
    }

    pub fn count_parameters(&self) -> ParamBreakdown {
        ParamBreakdown {
            dynamics: self.f.config().param_count(),
            message: self.m.config().param_count(),
            encoder: self.h.config().param_count(),
            node_embeddings: self.node_embeddings.len(),
            edge_embeddings: self.edge_embeddings.len(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, track: bool, samples: usize) -> Result<(Vec<Var>, MpgBound<'_>), ModelError> {
        let vars = bind_params(tape, &self.params(), track);
        let bound = self.bind_with(tape, &vars, samples)?;
        Ok((vars, bound))
    }

    /// Binds to parameter handles already on the tape, in [`Self::params`] order.
    pub fn bind_with(&self, tape: &mut Tape, vars: &[Var], samples: usize) -> Result<MpgBound<'_>, ModelError> {
        if vars.len() != self.params().len() {
            return Err(ModelError::Config(format!("expected {} parameter handles, got {}", self.params().len(), vars.len())));
        }
        let mut cur = ParamCursor::new(vars);
        let f = self.f.bind_from(&mut cur);
        let m = self.m.bind_from(&mut cur);
        let h = self.h.bind_from(&mut cur);
        let (node_var, edge_var) = (cur.next_var(), cur.next_var());

        let n = self.topology.n_nodes();
        let rows = samples * n;
        let node_rows: Vec<usize> = (0..rows).map(|r| r % n).collect();
        let node_e = tape.gather_rows(node_var, &node_rows)?;

        let directed = self.topology.directed_edges();
        let mut recv = Vec::with_capacity(samples * directed.len());
        let mut send = Vec::with_capacity(recv.capacity());
        let mut edge_rows = Vec::with_capacity(recv.capacity());
        for s in 0..samples {
            for d in &directed {
                recv.push(s * n + d.receiver);
                send.push(s * n + d.sender);
                edge_rows.push(d.edge);
            }
        }
        let edge_e = if edge_rows.is_empty() {
            None
        } else {
            Some(tape.gather_rows(edge_var, &edge_rows)?)
        };

        let g = self.norm.group(0);
        let sd = self.cfg.state_dim();
        let mut shift = vec![0.0; sd];
        let mut scale = vec![1.0; sd];
        let mut out = vec![1.0; sd];
        (shift[0], scale[0], out[0]) = (-g.omega.mean, 1.0 / g.omega.std, g.omega_rate);
        (shift[1], scale[1], out[1]) = (-g.v.mean, 1.0 / g.v.std, g.v_rate);
        let bound = MpgBound {
            model: self,
            f,
            m,
            h,
            rows,
            recv,
            send,
            node_e,
            edge_e,
            x_shift: tape.constant(&[sd], shift)?,
            x_scale: tape.constant(&[sd], scale)?,
            out_scale: tape.constant(&[sd], out)?,
        };
        Ok(bound)
    }

    /// Adds an isolated node whose embedding is a copy of `copy_from`'s.
    pub fn add_node(&mut self, id: usize, copy_from: usize) -> Result<(), ModelError> {
        let src = self
            .node_embedding(copy_from)
            .ok_or_else(|| ModelError::Topology(format!("unknown source node {copy_from}")))?
            .to_vec();
        let from = self.topology.index_of(copy_from).expect("source node exists");
        self.topology.add_node(id)?;
        self.node_embeddings = append_row(&self.node_embeddings, &src);
        self.norm.push_node_like(from);
        Ok(())
    }

    /// Adds edge `{a, b}` whose embedding is a copy of edge `copy_from`'s.
    pub fn add_edge(&mut self, a: usize, b: usize, copy_from: (usize, usize)) -> Result<(), ModelError> {
        let src = self
            .edge_embedding(copy_from.0, copy_from.1)
            .ok_or_else(|| ModelError::Topology(format!("unknown source edge {{{}, {}}}", copy_from.0, copy_from.1)))?
            .to_vec();
        self.topology.add_edge(a, b)?;
        self.edge_embeddings = append_row(&self.edge_embeddings, &src);
        Ok(())
    }

    pub fn remove_edge(&mut self, a: usize, b: usize) -> Result<(), ModelError> {
        let e = self.topology.remove_edge(a, b)?;
        self.edge_embeddings = remove_row(&self.edge_embeddings, e);
        Ok(())
    }

    /// Removes an isolated node; incident edges must be removed first.
    pub fn remove_node(&mut self, id: usize) -> Result<(), ModelError> {
        let i = self.topology.remove_node(id)?;
        self.node_embeddings = remove_row(&self.node_embeddings, i);
        self.norm.remove_node(i);
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if std > 0.0 {
        let dist = Normal::new(0.0, std).expect("std is positive");
        (0..n).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; n]
    };
    Tensor::new(shape, data).expect("shape matches data").with_grad()
}

fn append_row(t: &Tensor, row: &[f64]) -> Tensor {
    let mut data = t.data().to_vec();
    data.extend_from_slice(row);
    Tensor::new(&[t.shape()[0] + 1, row.len()], data).expect("row width matches").with_grad()
}

fn remove_row(t: &Tensor, i: usize) -> Tensor {
    let w = t.shape()[1];
    let mut data = t.data().to_vec();
    data.drain(i * w..(i + 1) * w);
    Tensor::new(&[t.shape()[0] - 1, w], data).expect("row width matches").with_grad()
}

/// [`MpgNodeModel`] recorded on a tape. States are `[samples * nodes, 2 + latent]`.
pub struct MpgBound<'a> {
    model: &'a MpgNodeModel,
    f: MlpVars,
    m: MlpVars,
    h: TcnVars,
    rows: usize,
    recv: Vec<usize>,
    send: Vec<usize>,
    node_e: Var,
    edge_e: Option<Var>,
    x_shift: Var,
    x_scale: Var,
    out_scale: Var,
}

impl MpgBound<'_> {
    /// Aggregated messages `[rows, 2]` from normalized states.
    pub fn messages(&self, tape: &mut Tape, xn: Var) -> Result<Var, ModelError> {
        match self.edge_e {
            None => Ok(tape.zeros(&[self.rows, MESSAGE_DIM])),
            Some(edge_e) => {
                let xr = tape.gather_rows(xn, &self.recv)?;
                let xs = tape.gather_rows(xn, &self.send)?;
                let input = tape.concat(&[xr, xs, edge_e], 1)?;
                let msg = self.m.forward(tape, input)?;
                Ok(tape.scatter_add_rows(msg, &self.recv, self.rows)?)
            }
        }
    }

    pub fn normalize_state(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        let xs = tape.add(x, self.x_shift)?;
        Ok(tape.mul(xs, self.x_scale)?)
    }
}

fn encoder_sequence(batch: &Batch, stats: impl Fn(usize) -> [Affine; 3]) -> Vec<f64> {
    let per_row = batch.h * ENCODER_CHANNELS;
    batch
        .encoder_input
        .chunks_exact(per_row)
        .enumerate()
        .flat_map(|(r, seq)| {
            let a = stats(r % batch.n_nodes);
            seq.chunks_exact(ENCODER_CHANNELS)
                .flat_map(move |c| [a[0].apply(c[0]), a[1].apply(c[1]), a[2].apply(c[2])])
                .collect::<Vec<_>>()
        })
        .collect()
}

pub(super) fn normalized_encoder_input(batch: &Batch, norm: &Normalization) -> Vec<f64> {
    encoder_sequence(batch, |i| {
        let g = norm.group(i);
        [g.u, g.omega, g.v]
    })
}

impl Bound for MpgBound<'_> {
    fn encode(&self, tape: &mut Tape, batch: &Batch) -> Result<Var, ModelError> {
        if batch.rows() != self.rows {
            return Err(ModelError::Request(format!("batch has {} rows, model bound for {}", batch.rows(), self.rows)));
        }
        let seq = normalized_encoder_input(batch, &self.model.norm);
        let seq = tape.constant(&[self.rows, batch.h, ENCODER_CHANNELS], seq)?;
        let latent = self.h.encode(tape, seq)?;
        let measured = tape.constant(&[self.rows, MEASURED_PER_NODE], batch.last_obs.clone())?;
        Ok(tape.concat(&[measured, latent], 1)?)
    }

    fn controls(&self, tape: &mut Tape, batch: &Batch) -> Result<Vec<Var>, ModelError> {
        batch
            .controls
            .chunks_exact(self.rows)
            .map(|u| Ok(tape.constant(&[self.rows, 1], u.to_vec())?))
            .collect()
    }

    fn rhs(&self, tape: &mut Tape, x: Var, u: Var) -> Result<Var, ModelError> {
        let xn = self.normalize_state(tape, x)?;
        let g = self.model.norm.group(0);
        let un = tape.add_scalar(u, -g.u.mean);
        let un = tape.scale(un, 1.0 / g.u.std);
        let agg = self.messages(tape, xn)?;
        let input = tape.concat(&[xn, un, agg, self.node_e], 1)?;
        let out = self.f.forward(tape, input)?;
        Ok(tape.mul(out, self.out_scale)?)
    }

    fn outputs(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        Ok(tape.slice(x, 1, 0, MEASURED_PER_NODE)?)
    }
}
