use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const DESCRIPTOR_MAGIC: &[u8; 8] = b"GIDPDS01";
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Train,
    Database,
    Query,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorEntry {
    pub id: u64,
    pub descriptor: Vec<f64>,
    pub coord: [f64; 2],
    pub origin: Origin,
}

/// Global descriptors keyed by submap id.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorStore {
    dim: usize,
    entries: Vec<DescriptorEntry>,
    by_id: HashMap<u64, usize>,
}

impl DescriptorStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("descriptor dimension must be positive"));
        }
        Ok(Self {
            dim,
            entries: Vec::new(),
            by_id: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DescriptorEntry] {
        &self.entries
    }

    pub fn get(&self, id: u64) -> Option<&DescriptorEntry> {
        self.by_id.get(&id).map(|&i| &self.entries[i])
    }

    /// Adds a unit-norm descriptor.
    pub fn insert(&mut self, id: u64, descriptor: Vec<f64>, coord: [f64; 2], origin: Origin) -> Result<()> {
        let norm = descriptor.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::invalid(format!("descriptor {id} has norm {norm}, expected 1")));
        }
        self.insert_unchecked(id, descriptor, coord, origin)
    }

    /// Adds a descriptor without the unit-norm check, for enhanced vectors
    /// and single-precision files.
    pub fn insert_unchecked(&mut self, id: u64, descriptor: Vec<f64>, coord: [f64; 2], origin: Origin) -> Result<()> {
        if descriptor.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: descriptor.len(),
            });
        }
        if descriptor.iter().chain(&coord).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("descriptor entry {id}")));
        }
        if self.by_id.contains_key(&id) {
            return Err(Error::invalid(format!("duplicate descriptor id {id}")));
        }
        self.by_id.insert(id, self.entries.len());
        self.entries.push(DescriptorEntry {
            id,
            descriptor,
            coord,
            origin,
        });
        Ok(())
    }

    /// Copy of this store with every descriptor replaced through `f`.
    pub(crate) fn map_descriptors(&self, mut f: impl FnMut(&DescriptorEntry) -> Vec<f64>) -> Self {
        let mut out = self.clone();
        for e in out.entries.iter_mut() {
            let v = f(e);
            e.descriptor = v;
        }
        out
    }
}

pub fn save_descriptors(store: &DescriptorStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(16 + store.len() * (24 + 4 * store.dim));
    out.extend_from_slice(DESCRIPTOR_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    out.extend_from_slice(&(store.dim as u32).to_le_bytes());
    for e in &store.entries {
        out.extend_from_slice(&e.id.to_le_bytes());
        out.extend_from_slice(&e.coord[0].to_le_bytes());
        out.extend_from_slice(&e.coord[1].to_le_bytes());
        for &v in &e.descriptor {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a descriptor file, tagging every entry with `origin`.
pub fn load_descriptors(path: impl AsRef<Path>, origin: Origin) -> Result<DescriptorStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != DESCRIPTOR_MAGIC {
        return Err(Error::MalformedHeader(format!("{} is not a descriptor file", path.display())));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let entry = 24 + 4 * dim;
    let expected = 16 + count * entry;
    if bytes.len() < expected {
        return Err(Error::Truncated(format!("{}: {} bytes, expected {expected}", path.display(), bytes.len())));
    }
    if bytes.len() > expected {
        return Err(Error::MalformedHeader(format!("{}: trailing bytes after {count} entries", path.display())));
    }
    let mut store = DescriptorStore::new(dim)?;
    for chunk in bytes[16..].chunks_exact(entry) {
        let id = u64::from_le_bytes(chunk[..8].try_into().unwrap());
        let e = f64::from_le_bytes(chunk[8..16].try_into().unwrap());
        let n = f64::from_le_bytes(chunk[16..24].try_into().unwrap());
        let v = chunk[24..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        store.insert_unchecked(id, v, [e, n], origin)?;
    }
    Ok(store)
}
