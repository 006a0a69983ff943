//! Named-tensor file format.
//!
//! ```text
//! GNCDE-TENSORS 1\n
//! {"step":..,"tensors":[{"name":..,"shape":[..]},..],"meta":{..}}\n
//! <row-major little-endian f64 payload, tensors in header order>
//! ```
//!
//! The header is one line of JSON. `meta` carries caller-defined metadata
//! (configs, logs) and is round-tripped verbatim.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "GNCDE-TENSORS 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    step: u64,
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl TensorFile {
    pub fn new(step: u64, meta: serde_json::Value) -> Self {
        Self {
            step,
            tensors: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Removes and returns a tensor, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| AutodiffError::Checkpoint(format!("missing tensor `{name}`")))?;
        let (_, t) = self.tensors.remove(pos);
        if t.shape() != shape {
            return Err(AutodiffError::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            step: self.step,
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_string(&header).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "{json}")?;
        let mut buf = Vec::new();
        for (_, t) in &self.tensors {
            buf.clear();
            buf.reserve(t.numel() * 8);
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = std::io::BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(AutodiffError::Checkpoint(format!(
                "bad magic line {:?}",
                line.trim_end()
            )));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| AutodiffError::Checkpoint(format!("malformed header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)
                .map_err(|_| AutodiffError::Checkpoint(format!("truncated payload in tensor `{}`", entry.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(AutodiffError::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self {
            step: header.step,
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
