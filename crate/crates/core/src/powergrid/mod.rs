//! Ground-truth power network: topology, admittances, droop-controlled units
//! and the full-system right-hand side.
//!
//! Plain state vectors are node-major `[δ₁, ω₁, v₁, δ₂, ...]`; outputs are
//! `[ω₁, v₁, ω₂, v₂, ...]`.

mod cases;
mod physics;
mod topology;

pub use cases::{ieee9_model, pair2_model, triangle3_model, IEEE9_TAU_SEED};
pub use physics::{
    line_flow, measure, node_injection, system_rhs, system_rhs_unchecked, unit_rhs, GridRhsVars, OMEGA_REF,
    STATE_PER_NODE,
};
pub use topology::{DirectedEdge, GridTopology};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerGridError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeAdmittance {
    pub g: f64,
    pub b: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ShuntAdmittance {
    pub g: f64,
    pub b: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitParams {
    pub k_p: f64,
    pub k_q: f64,
    pub tau: f64,
    pub omega_d: f64,
    pub v_d: f64,
    pub p_d_nom: f64,
    pub q_d_nom: f64,
}

impl UnitParams {
    pub fn validate(&self) -> Result<(), PowerGridError> {
        let ok = self.k_p > 0.0 && self.k_q > 0.0 && self.tau > 0.0 && self.v_d > 0.0;
        let finite = [self.omega_d, self.p_d_nom, self.q_d_nom].iter().all(|v| v.is_finite());
        if ok && finite {
            Ok(())
        } else {
            Err(PowerGridError::Param(format!("unit parameters out of range: {self:?}")))
        }
    }
}

/// One node record of the structured grid description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub id: usize,
    pub k_p: f64,
    pub k_q: f64,
    pub tau: f64,
    #[serde(default = "one")]
    pub omega_d: f64,
    #[serde(default = "one")]
    pub v_d: f64,
    pub p_d_nom: f64,
    pub q_d_nom: f64,
    #[serde(default)]
    pub g_shunt: f64,
    #[serde(default)]
    pub b_shunt: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub from: usize,
    pub to: usize,
    pub g: f64,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub nodes: Vec<NodeConfig>,
    pub edges: Vec<EdgeConfig>,
}

/// Topology plus per-node units and shunts and per-edge series admittances
/// (aligned with `topology.edges()`).
#[derive(Clone, Debug, PartialEq)]
pub struct GridModel {
    topology: GridTopology,
    units: Vec<UnitParams>,
    shunts: Vec<ShuntAdmittance>,
    lines: Vec<EdgeAdmittance>,
}

impl GridModel {
    pub fn new(
        topology: GridTopology,
        units: Vec<UnitParams>,
        shunts: Vec<ShuntAdmittance>,
        lines: Vec<EdgeAdmittance>,
    ) -> Result<Self, PowerGridError> {
        let n = topology.n_nodes();
        if units.len() != n || shunts.len() != n {
            return Err(PowerGridError::Dimension {
                expected: n,
                got: units.len().min(shunts.len()),
            });
        }
        if lines.len() != topology.n_edges() {
            return Err(PowerGridError::Dimension {
                expected: topology.n_edges(),
                got: lines.len(),
            });
        }
        for u in &units {
            u.validate()?;
        }
        for s in &shunts {
            if !(s.g >= 0.0) || !s.b.is_finite() {
                return Err(PowerGridError::Param(format!("shunt admittance out of range: {s:?}")));
            }
        }
        for l in &lines {
            if !(l.g >= 0.0) || !l.b.is_finite() {
                return Err(PowerGridError::Param(format!("line admittance out of range: {l:?}")));
            }
        }
        Ok(Self {
            topology,
            units,
            shunts,
            lines,
        })
    }

    pub fn from_config(cfg: &GridConfig) -> Result<Self, PowerGridError> {
        let ids: Vec<usize> = cfg.nodes.iter().map(|n| n.id).collect();
        let edges: Vec<(usize, usize)> = cfg.edges.iter().map(|e| (e.from, e.to)).collect();
        let topology = GridTopology::new(&ids, &edges)?;
        let units = cfg
            .nodes
            .iter()
            .map(|n| UnitParams {
                k_p: n.k_p,
                k_q: n.k_q,
                tau: n.tau,
                omega_d: n.omega_d,
                v_d: n.v_d,
                p_d_nom: n.p_d_nom,
                q_d_nom: n.q_d_nom,
            })
            .collect();
        let shunts = cfg
            .nodes
            .iter()
            .map(|n| ShuntAdmittance {
                g: n.g_shunt,
                b: n.b_shunt,
            })
            .collect();
        let lines = cfg.edges.iter().map(|e| EdgeAdmittance { g: e.g, b: e.b }).collect();
        Self::new(topology, units, shunts, lines)
    }

    pub fn to_config(&self) -> GridConfig {
        let nodes = (0..self.n_nodes())
            .map(|i| {
                let (u, s) = (&self.units[i], &self.shunts[i]);
                NodeConfig {
                    id: self.topology.node_ids()[i],
                    k_p: u.k_p,
                    k_q: u.k_q,
                    tau: u.tau,
                    omega_d: u.omega_d,
                    v_d: u.v_d,
                    p_d_nom: u.p_d_nom,
                    q_d_nom: u.q_d_nom,
                    g_shunt: s.g,
                    b_shunt: s.b,
                }
            })
            .collect();
        let ids = self.topology.node_ids();
        let edges = self
            .topology
            .edges()
            .iter()
            .zip(&self.lines)
            .map(|(&(i, j), l)| EdgeConfig {
                from: ids[i],
                to: ids[j],
                g: l.g,
                b: l.b,
            })
            .collect();
        GridConfig { nodes, edges }
    }

    pub fn topology(&self) -> &GridTopology {
        &self.topology
    }

    pub fn units(&self) -> &[UnitParams] {
        &self.units
    }

    pub fn shunts(&self) -> &[ShuntAdmittance] {
        &self.shunts
    }

    pub fn lines(&self) -> &[EdgeAdmittance] {
        &self.lines
    }

    pub fn n_nodes(&self) -> usize {
        self.topology.n_nodes()
    }

    pub fn n_edges(&self) -> usize {
        self.topology.n_edges()
    }

    pub fn nominal_setpoints(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.p_d_nom).collect()
    }

    /// Flat start: `δ = 0`, `ω = ω_d`, `v = v_d` at every node.
    pub fn flat_start(&self) -> Vec<f64> {
        self.units.iter().flat_map(|u| [0.0, u.omega_d, u.v_d]).collect()
    }

    pub fn add_node(&mut self, id: usize, unit: UnitParams, shunt: ShuntAdmittance) -> Result<(), PowerGridError> {
        unit.validate()?;
        self.topology.add_node(id)?;
        self.units.push(unit);
        self.shunts.push(shunt);
        Ok(())
    }

    pub fn add_edge(&mut self, from: usize, to: usize, line: EdgeAdmittance) -> Result<(), PowerGridError> {
        if !(line.g >= 0.0) || !line.b.is_finite() {
            return Err(PowerGridError::Param(format!("line admittance out of range: {line:?}")));
        }
        self.topology.add_edge(from, to)?;
        self.lines.push(line);
        Ok(())
    }

    pub fn remove_edge(&mut self, from: usize, to: usize) -> Result<(), PowerGridError> {
        let e = self.topology.remove_edge(from, to)?;
        self.lines.remove(e);
        Ok(())
    }

    pub fn remove_node(&mut self, id: usize) -> Result<(), PowerGridError> {
        let i = self.topology.remove_node(id)?;
        self.units.remove(i);
        self.shunts.remove(i);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let grid = ieee9_model();
        let cfg = grid.to_config();
        let back = GridModel::from_config(&cfg).unwrap();
        assert_eq!(back, grid);
        let json = serde_json::to_string(&cfg).unwrap();
        let parsed: GridConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn rejects_invalid_parameters() {
        let mut cfg = triangle3_model().to_config();
        cfg.nodes[0].tau = 0.0;
        assert!(GridModel::from_config(&cfg).is_err());
        let mut cfg = triangle3_model().to_config();
        cfg.edges[0].g = -0.1;
        assert!(GridModel::from_config(&cfg).is_err());
        let mut cfg = triangle3_model().to_config();
        cfg.edges.push(cfg.edges[0].clone());
        assert!(GridModel::from_config(&cfg).is_err());
    }

    #[test]
    fn edits_keep_arrays_aligned() {
        let mut grid = triangle3_model();
        let unit = grid.units()[2];
        grid.add_node(4, unit, ShuntAdmittance::default()).unwrap();
        grid.add_edge(3, 4, EdgeAdmittance { g: 1.0, b: -10.0 }).unwrap();
        assert_eq!((grid.n_nodes(), grid.n_edges()), (4, 4));
        assert!(grid.remove_node(4).is_err());
        grid.remove_edge(4, 3).unwrap();
        grid.remove_node(4).unwrap();
        assert_eq!(grid, triangle3_model());
    }
}
