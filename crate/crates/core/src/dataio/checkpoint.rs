//! Single-file checkpoints: a short text header followed by a little-endian
//! binary payload.
//!
//! ```text
//! NERFCAM-CKPT
//! version 1
//! scalar f64
//! epoch 120
//! dataset <hex>
//! payload <bytes>
//! sha256 <hex of payload>
//! ---
//! <payload>
//! ```
//!
//! Payload: `u64` config length + UTF-8 config, `u64` tensor count, then per
//! tensor a name, `u32` rank, `u64` dims and the values; `u64` optimizer
//! count, then per optimizer a name, `u64` step count, `u64` slot count and
//! per slot a parameter name, `u64` t, then `m` and `v` values. Names are
//! `u32` length + UTF-8.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Tensor};
use crate::scalar::Real;

pub const CHECKPOINT_MAGIC: &str = "NERFCAM-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint stores {found} values, expected {expected}")]
    Scalar { found: String, expected: &'static str },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint truncated: payload has {got} of {expected} bytes")]
    Truncated { expected: usize, got: usize },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint payload: {0}")]
    Payload(String),
    #[error("checkpoint does not match the model: missing {missing:?}, unexpected {unexpected:?}, wrong shape {shape:?}")]
    Architecture {
        missing: Vec<String>,
        unexpected: Vec<String>,
        shape: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotSnapshot<T> {
    pub param: String,
    pub t: u64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot<T> {
    pub name: String,
    pub steps: u64,
    pub slots: Vec<SlotSnapshot<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub epoch: u64,
    /// Serialized training configuration.
    pub config: String,
    pub dataset_hash: String,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub optimizers: Vec<OptimizerSnapshot<T>>,
}

impl<T: Real> Checkpoint<T> {
    /// Snapshot of every parameter value in `store`, in registration order.
    pub fn tensors_from(store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        store
            .ids()
            .map(|id| (store.name(id).to_string(), store.value(id).clone()))
            .collect()
    }

    /// Checks that names and shapes match `store` exactly.
    pub fn check_params(&self, store: &ParamStore<T>) -> Result<(), CheckpointError> {
        let mut missing = Vec::new();
        let mut shape = Vec::new();
        for id in store.ids() {
            let name = store.name(id);
            match self.tensors.iter().find(|(n, _)| n == name) {
                None => missing.push(name.to_string()),
                Some((_, t)) if t.shape() != store.value(id).shape() => shape.push(name.to_string()),
                _ => {}
            }
        }
        let unexpected: Vec<String> = self
            .tensors
            .iter()
            .filter(|(n, _)| store.id(n).is_none())
            .map(|(n, _)| n.clone())
            .collect();
        if missing.is_empty() && unexpected.is_empty() && shape.is_empty() {
            Ok(())
        } else {
            Err(CheckpointError::Architecture { missing, unexpected, shape })
        }
    }

    /// Copies parameter values into `store`; nothing is written unless every
    /// name and shape matches.
    pub fn apply_params(&self, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        self.check_params(store)?;
        for (name, t) in &self.tensors {
            let id = store.id(name).expect("checked");
            store.set_value(id, t.clone()).expect("checked");
        }
        Ok(())
    }
}

fn put_name(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_values<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &x in t.data() {
        x.write_le(out);
    }
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    put_values(out, t);
}

fn encode_payload<T: Real>(ck: &Checkpoint<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(ck.config.len() as u64).to_le_bytes());
    out.extend_from_slice(ck.config.as_bytes());
    out.extend_from_slice(&(ck.tensors.len() as u64).to_le_bytes());
    for (name, t) in &ck.tensors {
        put_name(&mut out, name);
        put_tensor(&mut out, t);
    }
    out.extend_from_slice(&(ck.optimizers.len() as u64).to_le_bytes());
    for opt in &ck.optimizers {
        put_name(&mut out, &opt.name);
        out.extend_from_slice(&opt.steps.to_le_bytes());
        out.extend_from_slice(&(opt.slots.len() as u64).to_le_bytes());
        for s in &opt.slots {
            put_name(&mut out, &s.param);
            out.extend_from_slice(&s.t.to_le_bytes());
            put_tensor(&mut out, &s.m);
            put_values(&mut out, &s.v);
        }
    }
    out
}

/// Serializes a checkpoint to bytes.
pub fn write_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Vec<u8> {
    let payload = encode_payload(ck);
    let digest = hex::encode(Sha256::digest(&payload));
    let mut out = format!(
        "{CHECKPOINT_MAGIC}\nversion {CHECKPOINT_VERSION}\nscalar {}\nepoch {}\ndataset {}\npayload {}\nsha256 {digest}\n---\n",
        T::NAME,
        ck.epoch,
        ck.dataset_hash,
        payload.len()
    )
    .into_bytes();
    out.extend_from_slice(&payload);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            CheckpointError::Payload(format!("needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| CheckpointError::Payload(format!("implausible length {n}")))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Payload(e.to_string()))
    }

    fn values<T: Real>(&mut self, shape: Vec<usize>) -> Result<Tensor<T>, CheckpointError> {
        let numel: usize = shape.iter().product();
        let bytes = self.take(numel.checked_mul(T::BYTES).ok_or_else(|| CheckpointError::Payload("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::new(shape, data).map_err(|e| CheckpointError::Payload(e.to_string()))
    }

    fn tensor<T: Real>(&mut self) -> Result<Tensor<T>, CheckpointError> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Payload(format!("tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>, _>>()?;
        self.values(shape)
    }
}

fn header_field<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<&'a str, CheckpointError> {
    let line = lines.next().ok_or_else(|| CheckpointError::Header(format!("missing {key}")))?;
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| CheckpointError::Header(format!("expected {key}, found {line:?}")))
}

/// Parses checkpoint bytes, validating magic, version, scalar type, length
/// and checksum before decoding anything.
pub fn read_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    const SEP: &[u8] = b"\n---\n";
    if !bytes.starts_with(CHECKPOINT_MAGIC.as_bytes()) {
        return Err(CheckpointError::BadMagic);
    }
    let split = bytes
        .windows(SEP.len())
        .position(|w| w == SEP)
        .ok_or_else(|| CheckpointError::Header("no header terminator".into()))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[split + SEP.len()..];
    let mut lines = header.lines().skip(1);

    let version: u32 = header_field(&mut lines, "version")?
        .parse()
        .map_err(|e| CheckpointError::Header(format!("version: {e}")))?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let scalar = header_field(&mut lines, "scalar")?;
    if scalar != T::NAME {
        return Err(CheckpointError::Scalar { found: scalar.to_string(), expected: T::NAME });
    }
    let epoch: u64 = header_field(&mut lines, "epoch")?
        .parse()
        .map_err(|e| CheckpointError::Header(format!("epoch: {e}")))?;
    let dataset_hash = header_field(&mut lines, "dataset")?.to_string();
    let len: usize = header_field(&mut lines, "payload")?
        .parse()
        .map_err(|e| CheckpointError::Header(format!("payload: {e}")))?;
    let digest = header_field(&mut lines, "sha256")?;
    if payload.len() < len {
        return Err(CheckpointError::Truncated { expected: len, got: payload.len() });
    }
    if payload.len() > len {
        return Err(CheckpointError::Payload(format!("{} trailing bytes", payload.len() - len)));
    }
    if hex::encode(Sha256::digest(payload)) != digest {
        return Err(CheckpointError::Checksum);
    }

    let mut r = Reader { buf: payload, pos: 0 };
    let clen = r.len()?;
    let config = String::from_utf8(r.take(clen)?.to_vec()).map_err(|e| CheckpointError::Payload(e.to_string()))?;
    let nt = r.len()?;
    let mut tensors = Vec::with_capacity(nt);
    for _ in 0..nt {
        let name = r.name()?;
        if tensors.iter().any(|(n, _): &(String, Tensor<T>)| *n == name) {
            return Err(CheckpointError::Payload(format!("duplicate tensor {name}")));
        }
        tensors.push((name, r.tensor()?));
    }
    let no = r.len()?;
    let mut optimizers = Vec::with_capacity(no);
    for _ in 0..no {
        let name = r.name()?;
        let steps = r.u64()?;
        let ns = r.len()?;
        let mut slots = Vec::with_capacity(ns);
        for _ in 0..ns {
            let param = r.name()?;
            let t = r.u64()?;
            let m: Tensor<T> = r.tensor()?;
            let v = r.values(m.shape().to_vec())?;
            slots.push(SlotSnapshot { param, t, m, v });
        }
        optimizers.push(OptimizerSnapshot { name, steps, slots });
    }
    if r.pos != payload.len() {
        return Err(CheckpointError::Payload("unread trailing bytes".into()));
    }
    Ok(Checkpoint {
        epoch,
        config,
        dataset_hash,
        tensors,
        optimizers,
    })
}

/// Writes atomically: a temporary file in the target directory is renamed
/// over `path`.
pub fn save_checkpoint<T: Real>(ck: &Checkpoint<T>, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(&write_checkpoint(ck)).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f64> {
        Checkpoint {
            epoch: 42,
            config: "[schedule]\nepochs = 10\n".into(),
            dataset_hash: "abc123".into(),
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
                ("b".into(), Tensor::vector(&[0.1])),
            ],
            optimizers: vec![OptimizerSnapshot {
                name: "field".into(),
                steps: 7,
                slots: vec![SlotSnapshot {
                    param: "a".into(),
                    t: 7,
                    m: Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap(),
                    v: Tensor::new(vec![2, 2], vec![0.25; 4]).unwrap(),
                }],
            }],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = write_checkpoint(&ck);
        let back: Checkpoint<f64> = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(write_checkpoint(&back), bytes);
        assert_eq!(back.tensors[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_damage() {
        let bytes = write_checkpoint(&sample());
        assert!(matches!(read_checkpoint::<f64>(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated { .. })));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(read_checkpoint::<f64>(&flipped), Err(CheckpointError::Checksum)));
        let versioned = String::from_utf8_lossy(&bytes).replacen("version 1", "version 9", 1);
        assert!(read_checkpoint::<f64>(versioned.as_bytes()).is_err());
        let text = std::str::from_utf8(&bytes[..60]).unwrap().replace("version 1", "version 9");
        let mut v = text.into_bytes();
        v.extend_from_slice(&bytes[60..]);
        assert!(matches!(read_checkpoint::<f64>(&v), Err(CheckpointError::Version { found: 9, .. })));
        assert!(matches!(read_checkpoint::<f32>(&bytes), Err(CheckpointError::Scalar { .. })));
        assert!(matches!(read_checkpoint::<f64>(b"hello"), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn architecture_mismatch_lists_names() {
        let ck = sample();
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", crate::autodiff::ParamGroup::Other, Tensor::zeros(&[3])).unwrap();
        store.insert("c", crate::autodiff::ParamGroup::Other, Tensor::zeros(&[1])).unwrap();
        match ck.apply_params(&mut store) {
            Err(CheckpointError::Architecture { missing, unexpected, shape }) => {
                assert_eq!(missing, vec!["c"]);
                assert_eq!(unexpected, vec!["b"]);
                assert_eq!(shape, vec!["a"]);
            }
            other => panic!("{other:?}"),
        }
        assert!(store.value(a).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run/model.ckpt");
        save_checkpoint(&sample(), &path).unwrap();
        let back: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(back, sample());
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
