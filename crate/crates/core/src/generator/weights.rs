//! Generator parameter sets and the weights file format.
//!
//! Layout: the 8-byte magic `FLVWTS\0\0`, a little-endian `u32` header
//! length, a JSON manifest (architecture, and per tensor its name, shape and
//! byte offset into the payload), then the payload as contiguous
//! little-endian `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::neural::Architecture;
use super::GridGeometry;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"FLVWTS\0\0";
const WEIGHTS_VERSION: u32 = 1;

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Same names with replaced tensors; shapes must match.
    pub fn replaced(&self, tensors: Vec<Tensor>) -> Result<ParamSet> {
        if tensors.len() != self.entries.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        let mut out = ParamSet::new();
        for ((name, old), new) in self.entries.iter().zip(tensors) {
            if old.shape() != new.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {:?} does not match {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
            out.push(name.clone(), new);
        }
        Ok(out)
    }

    /// Checks that names and shapes equal `expected`, reporting the first
    /// offending tensor by name.
    pub fn check_layout(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in expected {
            match self.get(name) {
                None => return Err(Error::Format(format!("tensor {name} missing"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Format(format!(
                        "tensor {name}: shape {:?}, descriptor declares {:?}",
                        t.shape(),
                        shape
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.names().find(|n| !expected.iter().any(|(e, _)| e == n)) {
            return Err(Error::Format(format!("tensor {extra} not in descriptor")));
        }
        Ok(())
    }

    /// Order-sensitive fingerprint over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, t) in &self.entries {
            name.bytes().for_each(|b| mix(b as u64));
            t.shape().iter().for_each(|&s| mix(s as u64));
            t.data().iter().for_each(|v| mix(v.to_bits()));
        }
        h
    }

    /// Euclidean distance between two parameter sets of equal layout.
    pub fn distance(&self, other: &ParamSet) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    }
}

/// What a weights file instantiates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeneratorSpec {
    Procedural { geometry: GridGeometry, latent_dim: usize },
    Neural(Architecture),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights {
    pub spec: GeneratorSpec,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    architecture: GeneratorSpec,
    tensors: Vec<TensorEntry>,
}

pub fn write_weights(w: &GeneratorWeights, mut out: impl Write) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, t) in w.params.iter() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let manifest = Manifest {
        version: WEIGHTS_VERSION,
        architecture: w.spec.clone(),
        tensors: entries,
    };
    let header = serde_json::to_vec(&manifest)?;
    let io = |e| Error::io("<weights stream>", e);
    out.write_all(WEIGHTS_MAGIC).map_err(io)?;
    out.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    out.write_all(&header).map_err(io)?;
    let mut payload = Vec::with_capacity(offset as usize);
    for t in w.params.tensors() {
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&payload).map_err(io)?;
    Ok(())
}

pub fn read_weights(mut input: impl Read) -> Result<GeneratorWeights> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<weights stream>", e))?;
    if bytes.len() < 12 || &bytes[..8] != WEIGHTS_MAGIC {
        return Err(Error::Format("weights file: bad magic bytes".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(Error::Format("weights file: truncated header".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..12 + hlen])
        .map_err(|e| Error::Format(format!("weights manifest: {e}")))?;
    if manifest.version != WEIGHTS_VERSION {
        return Err(Error::Format(format!(
            "weights file version {} unsupported (expected {WEIGHTS_VERSION})",
            manifest.version
        )));
    }
    let payload = &bytes[12 + hlen..];
    let mut params = ParamSet::new();
    for (i, e) in manifest.tensors.iter().enumerate() {
        let start = e.offset as usize;
        let end = manifest
            .tensors
            .get(i + 1)
            .map_or(payload.len(), |n| n.offset as usize);
        if start > end || end > payload.len() {
            return Err(Error::Format(format!("tensor {}: truncated payload", e.name)));
        }
        let n: usize = e.shape.iter().product();
        if e.shape.is_empty() || 4 * n != end - start {
            return Err(Error::Format(format!(
                "tensor {}: shape {:?} needs {} bytes, payload holds {}",
                e.name,
                e.shape,
                4 * n,
                end - start
            )));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.push(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(GeneratorWeights {
        spec: manifest.architecture,
        params,
    })
}

pub fn save_weights(w: &GeneratorWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(f);
    write_weights(w, &mut out)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<GeneratorWeights> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_weights(BufReader::new(f))
}
