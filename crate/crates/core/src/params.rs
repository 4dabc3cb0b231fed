//! Named parameter storage and the checkpoint file format.
//!
//! A checkpoint is a UTF-8 manifest followed by raw little-endian `f64`
//! data:
//!
//! ```text
//! xmodal-checkpoint 1
//! config <key> = <value>          (zero or more)
//! tensor <name> <d0>x<d1>x... <offset>
//! end
//! <binary payload>
//! ```
//!
//! `offset` counts `f64` elements from the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

const MAGIC: &str = "xmodal-checkpoint 1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Fan-in scaled uniform initialization in `[-1/√fan_in, 1/√fan_in]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::filled(shape, v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies every tensor of `other` into the same-named slot of `self`.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let id = other
                .id_of(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {name}")))?;
            let src = other.get(id);
            if src.shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "tensor {name}: checkpoint shape {:?} != model shape {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self, config: &BTreeMap<String, String>) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in config {
            header.push_str(&format!("config {k} = {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {name} {} {offset}\n", dims.join("x")));
            offset += t.len();
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        bytes.reserve(offset * 8);
        for t in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
        let bad = |m: String| Error::format(path, m);
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated manifest".into()))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| bad("manifest is not UTF-8".into()))?
                .to_string();
            *pos += end + 1;
            Ok(line)
        };
        if next_line(&mut pos)? != MAGIC {
            return Err(bad("missing checkpoint magic line".into()));
        }
        let mut config = BTreeMap::new();
        let mut entries = Vec::new();
        loop {
            let line = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            if let Some(kv) = line.strip_prefix("config ") {
                let (k, v) = kv
                    .split_once(" = ")
                    .ok_or_else(|| bad(format!("malformed config line: {line}")))?;
                config.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    return Err(bad(format!("malformed tensor line: {line}")));
                }
                let shape = parts[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad shape in: {line}")))?;
                let offset: usize = parts[2]
                    .parse()
                    .map_err(|_| bad(format!("bad offset in: {line}")))?;
                entries.push((parts[0].to_string(), shape, offset));
            } else {
                return Err(bad(format!("unexpected manifest line: {line}")));
            }
        }
        let payload = &bytes[pos..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values".into()));
        }
        let n_values = payload.len() / 8;
        let mut store = ParamStore::new();
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            if offset + n > n_values {
                return Err(bad(format!("tensor {name} runs past end of payload")));
            }
            let data = (offset..offset + n)
                .map(|i| {
                    let mut b = [0u8; 8];
                    b.copy_from_slice(&payload[i * 8..i * 8 + 8]);
                    f64::from_le_bytes(b)
                })
                .collect();
            store.add(name, Tensor::new(&shape, data)?);
        }
        Ok((store, config))
    }

    pub fn save(&self, path: &Path, config: &BTreeMap<String, String>) -> Result<()> {
        fs::write(path, self.to_bytes(config)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Gradients aligned index-for-index with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads {
            grads: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().for_each(|g| g.scale(s));
    }
}
