//! Binary model container.
//!
//! Layout: `SGFI`, `u32` version (LE), `u64` header length (LE), JSON
//! header, then every tensor as contiguous little-endian `f32` values in
//! tensor-table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adacof::AdaCofConfig;
use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sparse_opt::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGFI";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub epoch: usize,
    pub optimizer: String,
    pub seed: u64,
    #[serde(default)]
    pub stage: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    adacof: AdaCofConfig,
    tensors: Vec<TensorEntry>,
    metadata: Metadata,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: Metadata,
}

impl Checkpoint {
    pub fn new(model: Model, metadata: Metadata) -> Self {
        Self { model, metadata }
    }

    /// Tensor table that [`Checkpoint::to_bytes`] writes.
    pub fn tensor_table(&self) -> Vec<TensorEntry> {
        let mut offset = 0u64;
        self.model
            .spec
            .param_slots()
            .into_iter()
            .map(|(name, shape)| {
                let length = 4 * shape.iter().product::<usize>() as u64;
                let e = TensorEntry {
                    name,
                    shape,
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            arch: self.model.spec.clone(),
            adacof: self.model.adacof,
            tensors: self.tensor_table(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &header.tensors {
            for &v in self.model.params[&e.name].data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 {
            return Err(fail("truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| fail("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        header.arch.validate()?;

        let expected: Vec<(String, Vec<usize>)> = header.arch.param_slots();
        if expected.len() != header.tensors.len() {
            return Err(fail("tensor table mismatch"));
        }
        let mut offset = 0u64;
        for ((name, shape), e) in expected.iter().zip(&header.tensors) {
            let numel: usize = e.shape.iter().product();
            if &e.name != name || &e.shape != shape || e.offset != offset || e.length != 4 * numel as u64 {
                return Err(fail("tensor table mismatch"));
            }
            offset += e.length;
        }
        let data = &bytes[body..];
        if (data.len() as u64) < offset {
            return Err(fail("truncated tensor data"));
        }
        if data.len() as u64 != offset {
            return Err(fail("trailing bytes after tensor data"));
        }
        let mut params = ParamStore::new();
        for e in &header.tensors {
            let raw = &data[e.offset as usize..(e.offset + e.length) as usize];
            let vals: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), vals)?);
        }
        let model = Model::new(header.arch, params, header.adacof)?;
        Ok(Self {
            model,
            metadata: header.metadata,
        })
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, metadata: &Metadata) -> Result<()> {
    let bytes = Checkpoint::new(model.clone(), metadata.clone()).to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

/// Round every parameter to 32-bit precision, as a save/load would.
pub fn round_to_f32(params: &ParamStore) -> ParamStore {
    params
        .iter()
        .map(|(k, t)| (k.clone(), t.map(|v| v as f32 as f64)))
        .collect()
}
