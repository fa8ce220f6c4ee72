//! Checkpoint layout (little endian):
//!
//! ```text
//! "GNCK" | version u32 | kind u8 (0 mpg, 1 monolith)
//! config         u32 length | JSON bytes
//! topology hash  u64
//! topology       nodes u32 | ids u64... | edges u32 | (id u64, id u64)...
//! normalization  u32 length | JSON bytes
//! metadata       u32 length | JSON bytes
//! parameters     count u32 | per tensor: name (u32 length | UTF-8)
//!                | ndim u32 | dims u64... | values f64...
//! ```
//!
//! Parameters appear in [`Model::param_names`] order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, ModelError, ModelKind, MonolithModel, MpgNodeModel, Normalization};
use crate::autodiff::Tensor;
use crate::nn::{Mlp, Tcn};
use crate::powergrid::GridTopology;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> ModelError {
    ModelError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Writes `model` with free-form JSON `metadata` (e.g. a training summary).
pub fn save_checkpoint(model: &Model, metadata: &serde_json::Value, path: &Path) -> Result<(), ModelError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let config = serde_json::to_vec(model.config()).expect("plain data serializes");
    let norm = serde_json::to_vec(model.normalization()).expect("plain data serializes");
    let meta = serde_json::to_vec(metadata).map_err(|e| fmt_err(path, e.to_string()))?;
    let topo = model.topology();
    let names = model.param_names();
    let params = model.params();
    let mut body = || -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[model.kind().tag()])?;
        write_blob(&mut w, &config)?;
        w.write_all(&topo.hash().to_le_bytes())?;
        w.write_all(&(topo.n_nodes() as u32).to_le_bytes())?;
        for id in topo.node_ids() {
            w.write_all(&(*id as u64).to_le_bytes())?;
        }
        w.write_all(&(topo.n_edges() as u32).to_le_bytes())?;
        for &(i, j) in topo.edges() {
            w.write_all(&(topo.node_ids()[i] as u64).to_le_bytes())?;
            w.write_all(&(topo.node_ids()[j] as u64).to_le_bytes())?;
        }
        write_blob(&mut w, &norm)?;
        write_blob(&mut w, &meta)?;
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, p) in names.iter().zip(&params) {
            write_blob(&mut w, name.as_bytes())?;
            w.write_all(&(p.shape().len() as u32).to_le_bytes())?;
            for d in p.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    body().map_err(|e| io_err(path, e))
}

fn write_blob(w: &mut impl Write, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)
}

struct Reader<'p> {
    inner: BufReader<File>,
    path: &'p Path,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, ModelError> {
        let mut b = vec![0u8; n];
        self.inner.read_exact(&mut b).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                fmt_err(self.path, "truncated checkpoint")
            } else {
                io_err(self.path, e)
            }
        })?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self) -> Result<Vec<u8>, ModelError> {
        let n = self.u32()? as usize;
        self.bytes(n)
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, what: &str) -> Result<T, ModelError> {
        let b = self.blob()?;
        serde_json::from_slice(&b).map_err(|e| fmt_err(self.path, format!("invalid {what}: {e}")))
    }
}

/// Loads a checkpoint for use on `expected` topology. A topology mismatch is
/// rejected unless `allow_topology_mismatch` is set, in which case the model
/// keeps the topology stored in the file (to be edited by the caller).
/// Returns the model and its metadata.
pub fn load_checkpoint(
    path: &Path,
    expected: &GridTopology,
    allow_topology_mismatch: bool,
) -> Result<(Model, serde_json::Value), ModelError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
    };
    if r.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(fmt_err(path, "not a checkpoint file (bad magic bytes)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(
            path,
            format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let tag = r.bytes(1)?[0];
    let kind = ModelKind::from_tag(tag).ok_or_else(|| fmt_err(path, format!("unknown model kind tag {tag}")))?;
    let cfg: ModelConfig = r.json("model configuration")?;
    let stored_hash = r.u64()?;
    let n_nodes = r.u32()? as usize;
    let ids = (0..n_nodes).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let n_edges = r.u32()? as usize;
    let edges = (0..n_edges)
        .map(|_| Ok((r.u64()? as usize, r.u64()? as usize)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    let topology = GridTopology::new(&ids, &edges).map_err(|e| fmt_err(path, format!("invalid topology: {e}")))?;
    if topology.hash() != stored_hash {
        return Err(fmt_err(path, "stored topology does not match its hash"));
    }
    if stored_hash != expected.hash() && !allow_topology_mismatch {
        return Err(ModelError::Topology(format!(
            "{}: checkpoint was trained on a different topology ({} nodes, {} edges; grid has {} nodes, {} edges)",
            path.display(),
            topology.n_nodes(),
            topology.n_edges(),
            expected.n_nodes(),
            expected.n_edges()
        )));
    }
    let norm: Normalization = r.json("normalization")?;
    let metadata: serde_json::Value = r.json("metadata")?;
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(r.blob()?).map_err(|_| fmt_err(path, "parameter name is not UTF-8"))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let raw = r.bytes(len * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| fmt_err(path, e.to_string()))?;
        names.push(name);
        tensors.push(t.with_grad());
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(|e| io_err(path, e))? != 0 {
        return Err(fmt_err(path, "trailing bytes after checkpoint payload"));
    }

    let bad = |e: ModelError| fmt_err(path, format!("inconsistent parameters: {e}"));
    let mut it = tensors.into_iter();
    let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
    let mlp_tensors = 2 * (cfg.hidden_layers + 1);
    let model = match kind {
        ModelKind::Mpg => {
            let h_cfg = MpgNodeModel::h_config(&cfg).map_err(bad)?;
            let f = Mlp::from_params(MpgNodeModel::f_config(&cfg), take(mlp_tensors)).map_err(|e| bad(e.into()))?;
            let m = Mlp::from_params(MpgNodeModel::m_config(&cfg), take(mlp_tensors)).map_err(|e| bad(e.into()))?;
            let h = Tcn::from_params(h_cfg.clone(), take(4 * h_cfg.blocks + 2)).map_err(|e| bad(e.into()))?;
            let mut emb = take(2);
            if emb.len() != 2 {
                return Err(fmt_err(path, "missing embedding tensors"));
            }
            let edge = emb.pop().expect("two tensors");
            let node = emb.pop().expect("two tensors");
            Model::Mpg(MpgNodeModel::from_parts(cfg, topology, norm, f, m, h, node, edge).map_err(bad)?)
        }
        ModelKind::Monolith => {
            let n = topology.n_nodes();
            let h_cfg = MonolithModel::h_config(&cfg, n).map_err(bad)?;
            let f = Mlp::from_params(MonolithModel::f_config(&cfg, n), take(mlp_tensors)).map_err(|e| bad(e.into()))?;
            let h = Tcn::from_params(h_cfg.clone(), take(4 * h_cfg.blocks + 2)).map_err(|e| bad(e.into()))?;
            Model::Monolith(MonolithModel::from_parts(cfg, topology, norm, f, h).map_err(bad)?)
        }
    };
    if model.param_names() != names {
        return Err(fmt_err(path, "parameter names or order do not match the model layout"));
    }
    Ok((model, metadata))
}
