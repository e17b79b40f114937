//! Binary containers: the versioned f32 checkpoint of named parameter
//! arrays (consumed by evaluation) and the full-precision training state
//! used for exact resume.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::contrast::MemoryBank;
use crate::encoder::{EncoderConfig, EncoderPair, ModelParams};
use crate::error::{Error, Result};

const CKPT_MAGIC: &[u8; 4] = b"AIMC";
const CKPT_VERSION: u32 = 1;
const STATE_MAGIC: &[u8; 4] = b"AIMS";
const STATE_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.clone(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::CheckpointMismatch(format!("bad utf8 name in {}", self.path)))
    }

    fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

fn put_f64_vec(buf: &mut Vec<u8>, v: &[f64]) {
    put_u64(buf, v.len() as u64);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn write_file(path: &Path, buf: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(bytes)
}

// ── Evaluation checkpoint (named f32 arrays) ────────────────────────────

/// Save model parameters: magic, version, count, then per tensor the name,
/// dims and little-endian f32 values.
pub fn save_checkpoint(path: &Path, params: &ModelParams, cfg: &EncoderConfig) -> Result<()> {
    let shapes = ModelParams::named_shapes(cfg);
    let tensors = params.tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut buf, CKPT_VERSION);
    put_u32(&mut buf, shapes.len() as u32);
    for ((name, shape), t) in shapes.iter().zip(tensors.iter()) {
        put_str(&mut buf, name);
        put_u32(&mut buf, shape.len() as u32);
        for &d in shape {
            put_u32(&mut buf, d as u32);
        }
        for &v in t.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_file(path, &buf)
}

/// Load a checkpoint into the parameter layout implied by `cfg`, rejecting
/// any name or shape mismatch.
pub fn load_checkpoint(path: &Path, cfg: &EncoderConfig) -> Result<ModelParams> {
    let bytes = read_file(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    let magic = r.take(4)?;
    if magic != CKPT_MAGIC {
        return Err(Error::BadMagic {
            path: r.path.clone(),
            expected: "AIMC".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let shapes = ModelParams::named_shapes(cfg);
    if count != shapes.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {count} tensors, config expects {}",
            shapes.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in &shapes {
        let got_name = r.string()?;
        if &got_name != name {
            return Err(Error::CheckpointMismatch(format!(
                "expected tensor '{name}', found '{got_name}'"
            )));
        }
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        if &dims != shape {
            return Err(Error::CheckpointMismatch(format!(
                "tensor '{name}': expected shape {shape:?}, found {dims:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f32()? as f64);
        }
        tensors.push(data);
    }
    ModelParams::from_tensors(cfg, tensors)
}

// ── Training state (full precision, exact resume) ───────────────────────

/// Everything needed to continue a run bit-exactly: both parameter sets,
/// optimizer velocity, memory bank contents and the epoch cursor.
#[derive(Debug, Clone)]
pub struct TrainStateSnapshot {
    pub seed: u64,
    /// Next epoch to run.
    pub epoch_next: usize,
    pub momentum: f64,
    pub query: Vec<Vec<f64>>,
    pub key: Vec<Vec<f64>>,
    pub velocity: Vec<Vec<f64>>,
    pub bank_capacity: usize,
    pub bank_dim: usize,
    pub bank_items: Vec<Vec<f64>>,
    pub loss_history: Vec<f64>,
}

impl TrainStateSnapshot {
    pub fn capture(
        seed: u64,
        epoch_next: usize,
        pair: &EncoderPair,
        velocity: &[Vec<f64>],
        bank: &MemoryBank,
        loss_history: &[f64],
    ) -> Self {
        TrainStateSnapshot {
            seed,
            epoch_next,
            momentum: pair.momentum,
            query: pair.query.tensors().into_iter().cloned().collect(),
            key: pair.key.tensors().into_iter().cloned().collect(),
            velocity: velocity.to_vec(),
            bank_capacity: bank.capacity(),
            bank_dim: bank.dim(),
            bank_items: bank.items().to_vec(),
            loss_history: loss_history.to_vec(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(STATE_MAGIC);
        put_u32(&mut buf, STATE_VERSION);
        put_u64(&mut buf, self.seed);
        put_u64(&mut buf, self.epoch_next as u64);
        buf.extend_from_slice(&self.momentum.to_le_bytes());
        for group in [&self.query, &self.key, &self.velocity] {
            put_u32(&mut buf, group.len() as u32);
            for t in group.iter() {
                put_f64_vec(&mut buf, t);
            }
        }
        put_u64(&mut buf, self.bank_capacity as u64);
        put_u64(&mut buf, self.bank_dim as u64);
        put_u32(&mut buf, self.bank_items.len() as u32);
        for item in &self.bank_items {
            put_f64_vec(&mut buf, item);
        }
        put_f64_vec(&mut buf, &self.loss_history);
        write_file(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            path: path.display().to_string(),
        };
        let magic = r.take(4)?;
        if magic != STATE_MAGIC {
            return Err(Error::BadMagic {
                path: r.path.clone(),
                expected: "AIMS".into(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u32()?;
        if version != STATE_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "unsupported state version {version}"
            )));
        }
        let seed = r.u64()?;
        let epoch_next = r.u64()? as usize;
        let momentum = r.f64()?;
        let mut groups = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = r.u32()? as usize;
            let mut g = Vec::with_capacity(n);
            for _ in 0..n {
                g.push(r.f64_vec()?);
            }
            groups.push(g);
        }
        let velocity = groups.pop().unwrap();
        let key = groups.pop().unwrap();
        let query = groups.pop().unwrap();
        let bank_capacity = r.u64()? as usize;
        let bank_dim = r.u64()? as usize;
        let n_items = r.u32()? as usize;
        let mut bank_items = Vec::with_capacity(n_items);
        for _ in 0..n_items {
            bank_items.push(r.f64_vec()?);
        }
        let loss_history = r.f64_vec()?;
        Ok(TrainStateSnapshot {
            seed,
            epoch_next,
            momentum,
            query,
            key,
            velocity,
            bank_capacity,
            bank_dim,
            bank_items,
            loss_history,
        })
    }

    /// Rebuild encoder pair and bank, validating against the config layout.
    pub fn restore(&self, cfg: &EncoderConfig) -> Result<(EncoderPair, Vec<Vec<f64>>, MemoryBank)> {
        let query = ModelParams::from_tensors(cfg, self.query.clone())?;
        let key = ModelParams::from_tensors(cfg, self.key.clone())?;
        let pair = EncoderPair {
            query,
            key,
            momentum: self.momentum,
        };
        let mut bank = MemoryBank::new(self.bank_capacity, self.bank_dim);
        for item in &self.bank_items {
            bank.push_exact(item.clone())?;
        }
        Ok((pair, self.velocity.clone(), bank))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, Purpose};
    use tempfile::tempdir;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            channels: vec![2, 3],
            temporal_kernel: 3,
            temporal_strides: vec![1, 1],
            feature_dim: 3,
            projection_dim: 2,
        }
    }

    #[test]
    fn checkpoint_round_trip_at_f32_precision() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, &mut derive_rng(1, Purpose::ParamInit, 0, 0));
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &params, &cfg).unwrap();
        let loaded = load_checkpoint(&p, &cfg).unwrap();
        for (a, b) in params.tensors().iter().zip(loaded.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y as f32);
                assert_eq!(*y, (*x as f32) as f64);
            }
        }
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, &mut derive_rng(2, Purpose::ParamInit, 0, 0));
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &params, &cfg).unwrap();
        let mut other = tiny_cfg();
        other.channels = vec![2, 4];
        other.feature_dim = 4;
        match load_checkpoint(&p, &other) {
            Err(Error::CheckpointMismatch(msg)) => {
                assert!(msg.contains("shape") || msg.contains("tensor"), "{msg}")
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("junk.ckpt");
        std::fs::write(&p, b"NOPEnope").unwrap();
        assert!(matches!(
            load_checkpoint(&p, &tiny_cfg()),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn train_state_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, &mut derive_rng(3, Purpose::ParamInit, 0, 0));
        let pair = EncoderPair::new(params, 0.999);
        let velocity: Vec<Vec<f64>> = pair
            .query
            .tensors()
            .iter()
            .map(|t| t.iter().map(|v| v * 0.1).collect())
            .collect();
        let mut bank = MemoryBank::new(4, 2);
        bank.enqueue(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap();
        let snap = TrainStateSnapshot::capture(7, 3, &pair, &velocity, &bank, &[1.0, 0.5]);
        let p = dir.path().join("state.bin");
        snap.save(&p).unwrap();
        let loaded = TrainStateSnapshot::load(&p).unwrap();
        assert_eq!(loaded.seed, 7);
        assert_eq!(loaded.epoch_next, 3);
        assert_eq!(loaded.query, snap.query);
        assert_eq!(loaded.key, snap.key);
        assert_eq!(loaded.velocity, snap.velocity);
        assert_eq!(loaded.bank_items, snap.bank_items);
        assert_eq!(loaded.loss_history, snap.loss_history);
        let (pair2, vel2, bank2) = loaded.restore(&cfg).unwrap();
        assert_eq!(pair2.query, pair.query);
        assert_eq!(vel2, velocity);
        assert_eq!(bank2.items(), bank.items());
    }
}
