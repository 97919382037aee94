//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, 4-byte version (LE), 8-byte header length (LE),
//! a UTF-8 text header with one `name dims offset` line per tensor
//! (offsets count f64 values from the payload start), then the raw
//! little-endian f64 payloads. Round-trips are bitwise exact.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"MGRPOCKP";
const VERSION: u32 = 1;

pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_tensors(path: &Path, tensors: &[TensorRecord]) -> Result<()> {
    let mut header = String::new();
    let mut offset = 0usize;
    for t in tensors {
        let numel: usize = t.shape.iter().product();
        if numel != t.data.len() {
            return Err(Error::Checkpoint(format!("tensor {} shape/data mismatch", t.name)));
        }
        if t.name.contains(' ') || t.name.contains('\n') {
            return Err(Error::Checkpoint(format!("tensor name {:?} contains whitespace", t.name)));
        }
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("{} {} {}\n", t.name, dims.join("x"), offset));
        offset += numel;
    }
    let mut out = Vec::with_capacity(24 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<TensorRecord>> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic in {}", path.display())));
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut buf8 = [0u8; 8];
    f.read_exact(&mut buf8)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header = vec![0u8; header_len];
    f.read_exact(&mut header)?;
    let header = String::from_utf8(header)
        .map_err(|e| Error::Checkpoint(format!("non-utf8 header: {e}")))?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let mut tensors = Vec::new();
    for line in header.lines() {
        let mut parts = line.split(' ');
        let (name, dims, offset) = match (parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(d), Some(o)) => (n, d, o),
            _ => return Err(Error::Checkpoint(format!("malformed header line {line:?}"))),
        };
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Checkpoint(format!("bad dims in {line:?}: {e}")))?;
        let offset: usize = offset
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad offset in {line:?}: {e}")))?;
        let numel: usize = shape.iter().product();
        let start = offset * 8;
        let end = start + numel * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("payload truncated for tensor {name}")));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(TensorRecord { name: name.to_string(), shape, data });
    }
    Ok(tensors)
}

impl Model {
    /// Save every model parameter plus caller-supplied extra tensors
    /// (optimizer state, step counters, ...).
    pub fn save_checkpoint(&self, path: &Path, extras: &[TensorRecord]) -> Result<()> {
        let mut tensors: Vec<TensorRecord> = self
            .params
            .iter()
            .map(|(_, e)| TensorRecord {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: e.data.as_ref().clone(),
            })
            .collect();
        tensors.extend(extras.iter().map(|t| TensorRecord {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data: t.data.clone(),
        }));
        write_tensors(path, &tensors)
    }

    /// Load a checkpoint into a model of the given config. Every model
    /// parameter must be present with the exact shape the config
    /// implies; unknown tensors are returned as extras.
    pub fn load_checkpoint(
        config: ModelConfig,
        path: &Path,
    ) -> Result<(Model, BTreeMap<String, TensorRecord>)> {
        let mut model = Model::new(config, 0)?;
        let mut by_name: BTreeMap<String, TensorRecord> =
            read_tensors(path)?.into_iter().map(|t| (t.name.clone(), t)).collect();
        for id in 0..model.params.len() {
            let (name, shape) = {
                let e = model.params.entry(id);
                (e.name.clone(), e.shape.clone())
            };
            let rec = by_name.remove(&name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint/model-config mismatch: missing tensor {name}"))
            })?;
            if rec.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "checkpoint/model-config mismatch: tensor {name} has shape {:?}, expected {:?}",
                    rec.shape, shape
                )));
            }
            *model.params.values_mut(id) = rec.data;
        }
        Ok((model, by_name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::new(ModelConfig::default(), 7).unwrap();
        let extras = vec![TensorRecord {
            name: "train.step".into(),
            shape: vec![1],
            data: vec![123.0],
        }];
        model.save_checkpoint(&path, &extras).unwrap();
        let (loaded, rest) = Model::load_checkpoint(ModelConfig::default(), &path).unwrap();
        for (id, e) in model.params.iter() {
            assert_eq!(e.data.as_ref(), loaded.params.data(id).as_ref(), "{}", e.name);
        }
        assert_eq!(rest["train.step"].data, vec![123.0]);

        // Re-saving produces identical bytes.
        let path2 = dir.path().join("m2.ckpt");
        loaded.save_checkpoint(&path2, &extras).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn config_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::new(ModelConfig::default(), 7).unwrap();
        model.save_checkpoint(&path, &[]).unwrap();
        let other = ModelConfig { model_dim: 32, ..ModelConfig::default() };
        match Model::load_checkpoint(other, &path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("mismatch"), "{msg}"),
            other => panic!("expected checkpoint mismatch, got {:?}", other.map(|_| ())),
        }
    }
}
