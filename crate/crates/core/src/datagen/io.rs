//! Trajectory CSV and the binary dataset format.
//!
//! Dataset layout (all integers and floats little endian):
//!
//! ```text
//! "GNDS" | version u32
//! H u32 | K u32 | D u32 | nodes u32 | samples u64 | dt f64
//! seed count u32 | seeds u64...
//! has_snr u8 | snr_db f64
//! node ids u64 x nodes
//! per sample: trajectory u32 | t_s u64
//! has_clean u8
//! u        f64 [sample][node][H+K+1]
//! history  f64 [sample][node][H][2]
//! targets  f64 [sample][node][K][2]
//! clean    f64 [sample][node][K][2]   (if has_clean)
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, DatasetMeta, SampleOrigin, SampleSet, Trajectory};

pub const DATASET_MAGIC: &[u8; 4] = b"GNDS";
pub const DATASET_VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Long format, one row per time and node: `time,node,u,omega,v,omega_noisy,v_noisy,delta_diag`.
pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let n = traj.n_nodes();
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "time,node,u,omega,v,omega_noisy,v_noisy,delta_diag")?;
        for r in 0..traj.rows() {
            let t = traj.time(r);
            for (i, id) in traj.node_ids.iter().enumerate() {
                let c = (r * n + i) * 2;
                writeln!(
                    w,
                    "{t:.6},{id},{},{},{},{},{},{}",
                    traj.u[r * n + i],
                    traj.clean[c],
                    traj.clean[c + 1],
                    traj.noisy[c],
                    traj.noisy[c + 1],
                    traj.delta[r * n + i]
                )?;
            }
        }
        w.flush()
    };
    body().map_err(|e| io_err(path, e))
}

pub fn read_trajectory_csv(path: &Path, id: u32) -> Result<Trajectory, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| fmt_err(path, "empty file"))?
        .map_err(|e| io_err(path, e))?;
    if header.trim() != "time,node,u,omega,v,omega_noisy,v_noisy,delta_diag" {
        return Err(fmt_err(path, format!("unexpected header `{header}`")));
    }
    let mut times = Vec::new();
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: String| fmt_err(path, format!("line {}: {what}", ln + 2));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 8 {
            return Err(bad(format!("expected 8 fields, got {}", f.len())));
        }
        times.push(f[0].parse::<f64>().map_err(|_| bad(format!("invalid time `{}`", f[0])))?);
        ids.push(f[1].parse::<usize>().map_err(|_| bad(format!("invalid node id `{}`", f[1])))?);
        for v in &f[2..] {
            values.push(v.parse::<f64>().map_err(|_| bad(format!("invalid number `{v}`")))?);
        }
    }
    if times.is_empty() {
        return Err(fmt_err(path, "no data rows"));
    }
    let n = times.iter().take_while(|&&t| t == times[0]).count();
    let node_ids = ids[..n].to_vec();
    if times.len() % n != 0 {
        return Err(fmt_err(path, "incomplete final node block"));
    }
    let rows = times.len() / n;
    for r in 0..rows {
        let block = &times[r * n..(r + 1) * n];
        if block.iter().any(|&t| t != block[0]) || ids[r * n..(r + 1) * n] != node_ids[..] {
            return Err(fmt_err(path, format!("node block at row {r} is inconsistent")));
        }
        if r > 0 && block[0] <= times[(r - 1) * n] {
            return Err(fmt_err(path, format!("time is not ascending at row {r}")));
        }
    }
    let mut traj = Trajectory {
        id,
        dt: if rows >= 2 {
            ((times[n] - times[0]) * 1e6).round() / 1e6
        } else {
            0.0
        },
        node_ids,
        u: Vec::with_capacity(times.len()),
        clean: Vec::with_capacity(2 * times.len()),
        noisy: Vec::with_capacity(2 * times.len()),
        delta: Vec::with_capacity(times.len()),
    };
    for v in values.chunks_exact(6) {
        traj.u.push(v[0]);
        traj.clean.extend_from_slice(&v[1..3]);
        traj.noisy.extend_from_slice(&v[3..5]);
        traj.delta.push(v[5]);
    }
    Ok(traj)
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.0.write_all(&[v])
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f64s(&mut self, v: &[f64]) -> std::io::Result<()> {
        for x in v {
            self.f64(*x)?;
        }
        Ok(())
    }
}

pub fn save_dataset(set: &SampleSet, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = Writer(BufWriter::new(file));
    let m = &set.meta;
    let mut body = || -> std::io::Result<()> {
        w.0.write_all(DATASET_MAGIC)?;
        w.u32(DATASET_VERSION)?;
        w.u32(m.h as u32)?;
        w.u32(m.k as u32)?;
        w.u32(m.d as u32)?;
        w.u32(m.n_nodes() as u32)?;
        w.u64(set.len() as u64)?;
        w.f64(m.dt)?;
        w.u32(m.seeds.len() as u32)?;
        for s in &m.seeds {
            w.u64(*s)?;
        }
        w.u8(m.snr_db.is_some() as u8)?;
        w.f64(m.snr_db.unwrap_or(0.0))?;
        for id in &m.node_ids {
            w.u64(*id as u64)?;
        }
        for o in &set.origins {
            w.u32(o.trajectory)?;
            w.u64(o.t_s as u64)?;
        }
        w.u8(set.clean_targets.is_some() as u8)?;
        w.f64s(&set.u)?;
        w.f64s(&set.history)?;
        w.f64s(&set.targets)?;
        if let Some(c) = &set.clean_targets {
            w.f64s(c)?;
        }
        w.0.flush()
    };
    body().map_err(|e| io_err(path, e))
}

struct Reader<'p, R: Read> {
    inner: R,
    path: &'p Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], DataError> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                fmt_err(self.path, "truncated file")
            } else {
                io_err(self.path, e)
            }
        })?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DataError> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn load_dataset(path: &Path) -> Result<SampleSet, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
    };
    if &r.bytes::<4>()? != DATASET_MAGIC {
        return Err(fmt_err(path, "not a dataset file (bad magic bytes)"));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(fmt_err(
            path,
            format!("unsupported dataset version {version} (expected {DATASET_VERSION})"),
        ));
    }
    let h = r.u32()? as usize;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let n = r.u32()? as usize;
    let count = r.u64()? as usize;
    let dt = r.f64()?;
    let n_seeds = r.u32()? as usize;
    let seeds = (0..n_seeds).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
    let has_snr = r.u8()? != 0;
    let snr = r.f64()?;
    let node_ids = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let origins = (0..count)
        .map(|_| {
            Ok(SampleOrigin {
                trajectory: r.u32()?,
                t_s: r.u64()? as usize,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    let has_clean = r.u8()? != 0;
    let u = r.f64s(count * n * (h + k + 1))?;
    let history = r.f64s(count * n * 2 * h)?;
    let targets = r.f64s(count * n * 2 * k)?;
    let clean_targets = if has_clean {
        Some(r.f64s(count * n * 2 * k)?)
    } else {
        None
    };
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(|e| io_err(path, e))? != 0 {
        return Err(fmt_err(path, "trailing bytes after dataset payload"));
    }
    Ok(SampleSet {
        meta: DatasetMeta {
            h,
            k,
            d,
            dt,
            node_ids,
            seeds,
            snr_db: has_snr.then_some(snr),
        },
        origins,
        u,
        history,
        targets,
        clean_targets,
    })
}
