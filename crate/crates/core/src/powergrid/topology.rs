use sha2::{Digest, Sha256};

use super::PowerGridError;

/// Undirected graph over externally numbered nodes. Internally nodes are
/// addressed by position; neighbor lists are kept in ascending id order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridTopology {
    node_ids: Vec<usize>,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    incident: Vec<Vec<usize>>,
}

/// One direction of an undirected edge; `edge` indexes `GridTopology::edges`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirectedEdge {
    pub receiver: usize,
    pub sender: usize,
    pub edge: usize,
}

impl GridTopology {
    /// `edges` are given as pairs of node ids.
    pub fn new(node_ids: &[usize], edges: &[(usize, usize)]) -> Result<Self, PowerGridError> {
        let mut topo = Self {
            node_ids: Vec::new(),
            edges: Vec::new(),
            adjacency: Vec::new(),
            incident: Vec::new(),
        };
        for &id in node_ids {
            topo.add_node(id)?;
        }
        for &(a, b) in edges {
            topo.add_edge(a, b)?;
        }
        Ok(topo)
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_ids(&self) -> &[usize] {
        &self.node_ids
    }

    /// Edges as pairs of node positions, in insertion order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Neighbor positions of node position `i`, ascending by id.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    /// Edge positions parallel to [`Self::neighbors`].
    pub fn incident_edges(&self, i: usize) -> &[usize] {
        &self.incident[i]
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.node_ids.iter().position(|&n| n == id)
    }

    fn require(&self, id: usize) -> Result<usize, PowerGridError> {
        self.index_of(id)
            .ok_or_else(|| PowerGridError::Topology(format!("unknown node id {id}")))
    }

    /// Position of the undirected edge between node positions `i` and `j`.
    pub fn edge_between(&self, i: usize, j: usize) -> Option<usize> {
        self.edges.iter().position(|&(a, b)| (a, b) == (i, j) || (a, b) == (j, i))
    }

    pub fn edge_by_ids(&self, a: usize, b: usize) -> Option<usize> {
        self.edge_between(self.index_of(a)?, self.index_of(b)?)
    }

    /// Both directions of every edge, ordered by receiver position and then
    /// by ascending sender id.
    pub fn directed_edges(&self) -> Vec<DirectedEdge> {
        let mut out = Vec::with_capacity(2 * self.edges.len());
        for (receiver, nbrs) in self.adjacency.iter().enumerate() {
            for (&sender, &edge) in nbrs.iter().zip(&self.incident[receiver]) {
                out.push(DirectedEdge { receiver, sender, edge });
            }
        }
        out
    }

    pub fn add_node(&mut self, id: usize) -> Result<usize, PowerGridError> {
        if self.index_of(id).is_some() {
            return Err(PowerGridError::Topology(format!("duplicate node id {id}")));
        }
        self.node_ids.push(id);
        self.adjacency.push(Vec::new());
        self.incident.push(Vec::new());
        Ok(self.node_ids.len() - 1)
    }

    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<usize, PowerGridError> {
        let (i, j) = (self.require(a)?, self.require(b)?);
        if i == j {
            return Err(PowerGridError::Topology(format!("self-loop at node {a}")));
        }
        if self.edge_between(i, j).is_some() {
            return Err(PowerGridError::Topology(format!("duplicate edge {{{a}, {b}}}")));
        }
        self.edges.push((i, j));
        let e = self.edges.len() - 1;
        self.insert_neighbor(i, j, e);
        self.insert_neighbor(j, i, e);
        Ok(e)
    }

    fn insert_neighbor(&mut self, at: usize, nbr: usize, edge: usize) {
        let id = self.node_ids[nbr];
        let ids = &self.node_ids;
        let pos = self.adjacency[at].partition_point(|&k| ids[k] < id);
        self.adjacency[at].insert(pos, nbr);
        self.incident[at].insert(pos, edge);
    }

    fn detach(&mut self, at: usize, nbr: usize) {
        if let Some(pos) = self.adjacency[at].iter().position(|&k| k == nbr) {
            self.adjacency[at].remove(pos);
            self.incident[at].remove(pos);
        }
    }

    /// Removes the edge and returns its former position.
    pub fn remove_edge(&mut self, a: usize, b: usize) -> Result<usize, PowerGridError> {
        let (i, j) = (self.require(a)?, self.require(b)?);
        let e = self
            .edge_between(i, j)
            .ok_or_else(|| PowerGridError::Topology(format!("no edge {{{a}, {b}}}")))?;
        self.edges.remove(e);
        self.detach(i, j);
        self.detach(j, i);
        for inc in &mut self.incident {
            for k in inc.iter_mut() {
                if *k > e {
                    *k -= 1;
                }
            }
        }
        Ok(e)
    }

    /// Removes an isolated node and returns its former position; incident
    /// edges must be removed first.
    pub fn remove_node(&mut self, id: usize) -> Result<usize, PowerGridError> {
        let i = self.require(id)?;
        if !self.adjacency[i].is_empty() {
            return Err(PowerGridError::Topology(format!(
                "node {id} still has {} incident edge(s)",
                self.adjacency[i].len()
            )));
        }
        self.node_ids.remove(i);
        self.adjacency.remove(i);
        self.incident.remove(i);
        let shift = |k: usize| if k > i { k - 1 } else { k };
        for nbrs in &mut self.adjacency {
            for k in nbrs.iter_mut() {
                *k = shift(*k);
            }
        }
        for (a, b) in &mut self.edges {
            *a = shift(*a);
            *b = shift(*b);
        }
        Ok(i)
    }

    /// Stable 64-bit digest of node ids and the undirected edge set.
    pub fn hash(&self) -> u64 {
        let mut edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (self.node_ids[i], self.node_ids[j]);
                (a.min(b), a.max(b))
            })
            .collect();
        edges.sort_unstable();
        let mut h = Sha256::new();
        h.update((self.node_ids.len() as u64).to_le_bytes());
        for id in &self.node_ids {
            h.update((*id as u64).to_le_bytes());
        }
        h.update((edges.len() as u64).to_le_bytes());
        for (a, b) in edges {
            h.update((a as u64).to_le_bytes());
            h.update((b as u64).to_le_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }
}
