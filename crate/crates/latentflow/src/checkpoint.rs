//! Checkpoint container: a JSON header followed by concatenated
//! little-endian `f32` payloads in header order.
//!
//! The header records a format version, a `model_type` tag, free-form
//! metadata (model configuration, training step, rng position), and one
//! entry per tensor with its name, shape, byte offset into the payload
//! section and element count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload section.
    pub offset: u64,
    /// Element count.
    pub len: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
struct Header {
    format_version: u32,
    model_type: String,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// An in-memory checkpoint, either staged for writing or freshly loaded.
pub struct Checkpoint {
    pub model_type: String,
    pub meta: serde_json::Value,
    entries: Vec<(TensorEntry, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(model_type: impl Into<String>, meta: serde_json::Value) -> Self {
        Checkpoint {
            model_type: model_type.into(),
            meta,
            entries: Vec::new(),
        }
    }

    pub fn push_raw(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push((
            TensorEntry {
                name: name.into(),
                shape,
                offset: 0,
                len: data.len(),
            },
            data,
        ));
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.push_raw(name, t.shape().to_vec(), t.to_vec());
    }

    pub fn push_params(&mut self, params: &[(String, Tensor)]) {
        for (name, t) in params {
            self.push_tensor(name.clone(), t);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(e, _)| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.entries
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(e, d)| (e.shape.as_slice(), d.as_slice()))
    }

    pub fn get_vec(&self, name: &str) -> Option<Vec<f32>> {
        self.get(name).map(|(_, d)| d.to_vec())
    }

    /// Copy a stored payload into an existing tensor, checking shape.
    pub fn load_into(&self, name: &str, t: &Tensor) -> Result<()> {
        let (shape, data) = self.get(name).ok_or_else(|| {
            Error::Format(format!("checkpoint has no tensor named `{name}`"))
        })?;
        if shape != t.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
                shape,
                t.shape()
            )));
        }
        t.overwrite(data)
    }

    /// Load every parameter in `params` from same-named entries.
    pub fn load_params(&self, params: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in params {
            self.load_into(name, t)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::with_capacity(self.entries.len());
        let mut offset = 0u64;
        for (e, d) in &self.entries {
            tensors.push(TensorEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                offset,
                len: d.len(),
            });
            offset += (d.len() * 4) as u64;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            model_type: self.model_type.clone(),
            meta: self.meta.clone(),
            tensors,
        };
        let mut header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Format(format!("header serialization failed: {e}")))?;
        header_bytes.push(b'\n');

        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for (_, d) in &self.entries {
            for v in d {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Format(format!("invalid checkpoint header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format version {}",
                header.format_version
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;

        let mut entries = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let start = e.offset as usize;
            let end = start + e.len * 4;
            if end > payload.len() {
                return Err(Error::Format(format!(
                    "checkpoint payload truncated for tensor `{}`",
                    e.name
                )));
            }
            if e.shape.iter().product::<usize>() != e.len {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{}` shape/len mismatch",
                    e.name
                )));
            }
            let mut data = Vec::with_capacity(e.len);
            for chunk in payload[start..end].chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            entries.push((e, data));
        }
        Ok(Checkpoint {
            model_type: header.model_type,
            meta: header.meta,
            entries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn roundtrip_preserves_tensors_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ckpt = Checkpoint::new("compressor", json!({"step": 42, "d": 16}));
        ckpt.push_raw("enc.w", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.25, -0.125]);
        ckpt.push_raw("enc.b", vec![3], vec![0.5, 0.25, -0.75]);
        ckpt.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.model_type, "compressor");
        assert_eq!(loaded.meta["step"], 42);
        let (shape, data) = loaded.get("enc.w").unwrap();
        assert_eq!(shape, &[2, 3]);
        assert_eq!(data, &[1.0, -2.0, 3.5, 0.0, 4.25, -0.125]);
        assert!(loaded.get("missing").is_none());
    }

    #[test]
    fn load_into_checks_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ckpt = Checkpoint::new("udit", json!({}));
        ckpt.push_raw("w", vec![4], vec![1.0; 4]);
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let t = Tensor::zeros(&[2, 2]);
        assert!(loaded.load_into("w", &t).is_err());
        let t = Tensor::zeros(&[4]);
        loaded.load_into("w", &t).unwrap();
        assert_eq!(t.to_vec(), vec![1.0; 4]);
    }
}
