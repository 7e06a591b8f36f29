//! Binary weight files.
//!
//! Layout: magic "FPEW", u32 version (1), u32 tensor count; per tensor a u16
//! name length, the UTF-8 name, a u8 rank, rank u32 dims, then raw
//! little-endian f32 data; finally a u64 checksum (wrapping byte sum of all
//! preceding bytes). Every registry entry is stored, running statistics
//! included, so a loaded graph is inference-ready.

use std::fmt;
use std::io::{Read, Write};

use crate::graph::LayerGraph;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"FPEW";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum WeightError {
    Io(std::io::Error),
    BadMagic,
    BadVersion(u32),
    Corrupt(String),
    MissingTensor(String),
    UnexpectedTensor(String),
    ShapeMismatch { name: String, expected: Shape, actual: Vec<u32> },
}

impl fmt::Display for WeightError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightError::Io(e) => write!(f, "weight i/o: {e}"),
            WeightError::BadMagic => write!(f, "not a weight file (bad magic)"),
            WeightError::BadVersion(v) => write!(f, "unsupported weight file version {v}"),
            WeightError::Corrupt(msg) => write!(f, "corrupt weight file: {msg}"),
            WeightError::MissingTensor(name) => write!(f, "weight file is missing tensor '{name}'"),
            WeightError::UnexpectedTensor(name) => write!(f, "weight file has unexpected tensor '{name}'"),
            WeightError::ShapeMismatch { name, expected, actual } => {
                write!(f, "tensor '{name}': file shape {actual:?} does not match graph shape {expected}")
            }
        }
    }
}

impl std::error::Error for WeightError {}

impl From<std::io::Error> for WeightError {
    fn from(e: std::io::Error) -> Self {
        WeightError::Io(e)
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

/// Serialize every registry entry of `graph`, in registry order.
pub fn save_weights<W: Write>(graph: &LayerGraph<f32>, sink: &mut W) -> Result<(), WeightError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(graph.registry().len() as u32).to_le_bytes());
    for (_, entry) in graph.registry().iter() {
        let name = entry.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        let s = entry.tensor.shape();
        buf.push(4u8);
        for dim in s.axes() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in entry.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    sink.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WeightError> {
        if self.pos + n > self.bytes.len() {
            return Err(WeightError::Corrupt(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, WeightError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, WeightError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Load a weight file into `graph`. The file must agree with the registry on
/// the exact tensor name set and all shapes; on any error the graph is left
/// unmodified.
pub fn load_weights<R: Read>(graph: &mut LayerGraph<f32>, source: &mut R) -> Result<(), WeightError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 8 + 8 {
        return Err(WeightError::Corrupt("file shorter than header + checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if checksum(body) != stored {
        return Err(WeightError::Corrupt("checksum mismatch".into()));
    }

    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(WeightError::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(WeightError::BadVersion(version));
    }
    let count = cur.u32("tensor count")? as usize;

    let mut parsed: Vec<(String, Vec<u32>, Vec<f32>)> = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = cur.u16(&format!("name length of tensor {i}"))? as usize;
        let name = String::from_utf8(cur.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| WeightError::Corrupt(format!("tensor {i}: name is not UTF-8")))?;
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("dimension")?);
        }
        let len: usize = dims.iter().map(|&d| d as usize).product();
        let raw = cur.take(len * 4, &format!("data of '{name}'"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        parsed.push((name, dims, data));
    }
    if cur.pos != body.len() {
        return Err(WeightError::Corrupt(format!("{} trailing bytes", body.len() - cur.pos)));
    }

    // Validate the full name/shape agreement before touching the graph.
    let registry = graph.registry();
    for (name, dims, _) in &parsed {
        match registry.id_of(name) {
            None => return Err(WeightError::UnexpectedTensor(name.clone())),
            Some(id) => {
                let expected = registry.get(id).tensor.shape();
                let matches = dims.len() == 4
                    && expected.axes().iter().zip(dims).all(|(&a, &d)| a == d as usize);
                if !matches {
                    return Err(WeightError::ShapeMismatch {
                        name: name.clone(),
                        expected,
                        actual: dims.clone(),
                    });
                }
            }
        }
    }
    for (_, entry) in registry.iter() {
        if !parsed.iter().any(|(name, _, _)| name == &entry.name) {
            return Err(WeightError::MissingTensor(entry.name.clone()));
        }
    }

    for (name, dims, data) in parsed {
        let shape = Shape::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize);
        graph
            .registry_mut()
            .set(&name, Tensor::from_vec(shape, data))
            .expect("validated above");
    }
    Ok(())
}
