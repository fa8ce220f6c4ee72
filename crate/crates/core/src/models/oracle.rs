use super::{Batch, Bound, ModelError, MEASURED_PER_NODE};
use crate::autodiff::{Tape, Var};
use crate::powergrid::{GridModel, GridRhsVars};

/// The true grid dynamics plugged into the learned models' prediction path:
/// the "encoder" appends the true angle to the last observation and the
/// right-hand side is the physical model.
pub struct GroundTruth<'a> {
    grid: &'a GridModel,
    /// `[sample][node]`: `δ(t_s)`.
    delta: Vec<f64>,
    stacked: bool,
}

impl<'a> GroundTruth<'a> {
    /// Per-node state layout `[samples * nodes, 3]`, as the graph model uses.
    pub fn new(grid: &'a GridModel, delta: Vec<f64>) -> Self {
        Self {
            grid,
            delta,
            stacked: false,
        }
    }

    /// Stacked state layout `[samples, nodes * 3]`, as the monolith uses.
    pub fn stacked(grid: &'a GridModel, delta: Vec<f64>) -> Self {
        Self {
            grid,
            delta,
            stacked: true,
        }
    }

    pub fn bind(&self, tape: &mut Tape, samples: usize) -> Result<GroundTruthBound<'_>, ModelError> {
        let n = self.grid.n_nodes();
        if self.delta.len() != samples * n {
            return Err(ModelError::Request(format!(
                "need one angle per sample and node ({}), got {}",
                samples * n,
                self.delta.len()
            )));
        }
        Ok(GroundTruthBound {
            oracle: self,
            rhs: GridRhsVars::bind(tape, self.grid, samples)?,
            samples,
        })
    }
}

pub struct GroundTruthBound<'a> {
    oracle: &'a GroundTruth<'a>,
    rhs: GridRhsVars,
    samples: usize,
}

impl GroundTruthBound<'_> {
    fn rows(&self) -> usize {
        self.samples * self.oracle.grid.n_nodes()
    }

    fn to_rows(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        Ok(if self.oracle.stacked {
            tape.reshape(x, &[self.rows(), 3])?
        } else {
            x
        })
    }

    fn from_rows(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        Ok(if self.oracle.stacked {
            tape.reshape(x, &[self.samples, 3 * self.oracle.grid.n_nodes()])?
        } else {
            x
        })
    }
}

impl Bound for GroundTruthBound<'_> {
    fn encode(&self, tape: &mut Tape, batch: &Batch) -> Result<Var, ModelError> {
        if batch.rows() != self.rows() {
            return Err(ModelError::Request("batch does not match the oracle's sample count".into()));
        }
        let measured = tape.constant(&[self.rows(), MEASURED_PER_NODE], batch.last_obs.clone())?;
        let delta = tape.constant(&[self.rows(), 1], self.oracle.delta.clone())?;
        let x = tape.concat(&[measured, delta], 1)?;
        self.from_rows(tape, x)
    }

    fn controls(&self, tape: &mut Tape, batch: &Batch) -> Result<Vec<Var>, ModelError> {
        let rows = self.rows();
        batch
            .controls
            .chunks_exact(rows)
            .map(|u| {
                let u = tape.constant(&[rows, 1], u.to_vec())?;
                self.from_rows_controls(tape, u)
            })
            .collect()
    }

    fn rhs(&self, tape: &mut Tape, x: Var, u: Var) -> Result<Var, ModelError> {
        let x = self.to_rows(tape, x)?;
        let u = if self.oracle.stacked {
            tape.reshape(u, &[self.rows(), 1])?
        } else {
            u
        };
        let dx = self.rhs.eval(tape, x, u)?;
        self.from_rows(tape, dx)
    }

    fn outputs(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        let x = self.to_rows(tape, x)?;
        Ok(tape.slice(x, 1, 0, MEASURED_PER_NODE)?)
    }
}

impl GroundTruthBound<'_> {
    fn from_rows_controls(&self, tape: &mut Tape, u: Var) -> Result<Var, ModelError> {
        Ok(if self.oracle.stacked {
            tape.reshape(u, &[self.samples, self.oracle.grid.n_nodes()])?
        } else {
            u
        })
    }
}
