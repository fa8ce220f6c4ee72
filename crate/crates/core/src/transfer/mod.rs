//! Topology edits on trained MPG models and retraining on data subsets.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::datagen::SampleSet;
use crate::models::{Model, ModelError};
use crate::powergrid::{ieee9_model, triangle3_model, EdgeAdmittance, GridModel, PowerGridError, ShuntAdmittance, UnitParams};
use crate::rng::stream_rng;
use crate::training::{train, TrainConfig, TrainError, TrainReport};


#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("topology edits need an MPG model; monolith models are tied to a fixed node count")]
    NotEditable,
    #[error("invalid edit: {0}")]
    Edit(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] PowerGridError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// One structural change. New components take a copy of an existing
/// component's embedding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    AddNode { id: usize, copy_from: usize },
    AddEdge { from: usize, to: usize, copy_from: [usize; 2] },
    RemoveEdge { from: usize, to: usize },
    RemoveNode { id: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditScript {
    pub ops: Vec<EditOp>,
}

/// Applies `script` in order. On error the model may be partially edited.
pub fn apply_edits(model: &mut Model, script: &EditScript) -> Result<(), TransferError> {
    let Model::Mpg(m) = model else {
        return Err(TransferError::NotEditable);
    };
    for op in &script.ops {
        match *op {
            EditOp::AddNode { id, copy_from } => m.add_node(id, copy_from)?,
            EditOp::AddEdge { from, to, copy_from } => m.add_edge(from, to, (copy_from[0], copy_from[1]))?,
            EditOp::RemoveEdge { from, to } => m.remove_edge(from, to)?,
            EditOp::RemoveNode { id } => m.remove_node(id)?,
        }
    }
    Ok(())
}

/// A ground-truth grid change paired with the matching model edits.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferScenario {
    pub name: &'static str,
    pub original: GridModel,
    pub altered: GridModel,
    pub edits: EditScript,
}

/// Storage unit that idles at zero net exchange.
fn battery_unit(tau: f64) -> UnitParams {
    UnitParams {
        k_p: 1.0,
        k_q: 0.1,
        tau,
        omega_d: 1.0,
        v_d: 1.0,
        p_d_nom: 0.0,
        q_d_nom: 0.0,
    }
}

fn extend(
    name: &'static str,
    original: GridModel,
    new_node: usize,
    attach_to: usize,
    node_template: usize,
    edge_template: [usize; 2],
) -> TransferScenario {
    let mut altered = original.clone();
    altered
        .add_node(new_node, battery_unit(0.4), ShuntAdmittance { g: 0.0, b: 0.0 })
        .expect("new node id is unused");
    altered
        .add_edge(attach_to, new_node, EdgeAdmittance { g: 1.0, b: -10.0 })
        .expect("both endpoints exist");
    let edits = EditScript {
        ops: vec![
            EditOp::AddNode {
                id: new_node,
                copy_from: node_template,
            },
            EditOp::AddEdge {
                from: attach_to,
                to: new_node,
                copy_from: edge_template,
            },
        ],
    };
    TransferScenario {
        name,
        original,
        altered,
        edits,
    }
}

/// Fast unit (τ = 0.4) at new node 10, tied to node 6 by a line with
/// `g = 1, b = -10`; embeddings copied from node 6 and edge {6, 7}.
pub fn ieee9_transfer_scenario() -> TransferScenario {
    extend("ieee9-add-node", ieee9_model(), 10, 6, 6, [6, 7])
}

/// The same extension on the three-node grid: node 4 tied to node 3,
/// embeddings copied from node 3 and edge {2, 3}.
pub fn triangle3_transfer_scenario() -> TransferScenario {
    extend("triangle3-add-node", triangle3_model(), 4, 3, 3, [2, 3])
}

pub fn scenario_by_name(name: &str) -> Option<TransferScenario> {
    match name {
        "ieee9-add-node" => Some(ieee9_transfer_scenario()),
        "triangle3-add-node" => Some(triangle3_transfer_scenario()),
        _ => None,
    }
}

/// `floor(fraction * n)` distinct indices drawn from the `subsample` stream
/// of `seed`, in ascending order.
pub fn fraction_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, TransferError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TransferError::Edit(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let m = (fraction * n as f64).floor() as usize;
    if m == 0 {
        return Err(TransferError::Edit(format!("fraction {fraction} of {n} samples selects nothing")));
    }
    let mut idx = sample(&mut stream_rng(seed, "subsample"), n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Trains every parameter on a seeded subsample of `train_set`, with loss
/// scales refit on that subsample.
pub fn retrain_fraction(
    mut model: Model,
    train_set: &SampleSet,
    val_set: &SampleSet,
    fraction: f64,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport), TransferError> {
    let idx = fraction_indices(train_set.len(), fraction, cfg.seed)?;
    let subset = train_set.subset(&idx);
    model.refit_loss_scales(&subset)?;
    Ok(train(model, &subset, val_set, cfg)?)
}
