//! Binary weights file.
//!
//! ```text
//! "EXVT"                      4 bytes
//! version                     u16
//! metadata length             u32, then UTF-8 JSON
//! tensor count                u32
//! per tensor, in store order:
//!   name length               u32, then UTF-8
//!   rank                      u32
//!   extents                   rank × u32
//!   data                      numel × f32
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Profile, Rho, VariantConfig, NUM_BLOCKS};
use crate::error::{Error, Result};
use crate::model::{Head, ModelGraph};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EXVT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Exshortcut,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub variant: String,
    pub profile: Profile,
    pub seed: Option<u64>,
    pub class_count: usize,
    pub input_size: usize,
    pub rho: [Rho; NUM_BLOCKS],
    pub head: HeadKind,
}

impl WeightsMeta {
    pub fn for_model(model: &ModelGraph) -> Self {
        let c = model.config();
        WeightsMeta {
            variant: c.name.clone(),
            profile: c.profile,
            seed: model.seed(),
            class_count: c.class_count,
            input_size: c.input_size,
            rho: c.rho,
            head: match model.head() {
                Head::ExShortcut(_) => HeadKind::Exshortcut,
                Head::Baseline(_) => HeadKind::Baseline,
            },
        }
    }

    pub fn config(&self) -> VariantConfig {
        VariantConfig {
            name: self.variant.clone(),
            rho: self.rho,
            block_channels: self.profile.block_channels(),
            class_count: self.class_count,
            input_size: self.input_size,
            profile: self.profile,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub meta: WeightsMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn encode(model: &ModelGraph) -> Vec<u8> {
    let meta = serde_json::to_vec(&WeightsMeta::for_model(model)).expect("metadata serialises");
    let entries = model.params().entries();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        let shape = e.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let start = self.pos;
        let b = self.take(n, what)?;
        std::str::from_utf8(b).map_err(|e| Error::Parse {
            offset: start + e.valid_up_to(),
            msg: format!("{what} is not UTF-8"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<WeightsFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("missing EXVT magic"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        r.pos -= 2;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let meta_len = r.u32("metadata length")?;
    let meta_at = r.pos;
    let meta_text = r.utf8(meta_len, "metadata")?;
    let meta: WeightsMeta = serde_json::from_str(meta_text).map_err(|e| Error::Parse {
        offset: meta_at,
        msg: format!("bad metadata: {e}"),
    })?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32("name length")?;
        let name = r.utf8(n, "tensor name")?.to_string();
        let rank = r.u32("rank")?;
        if rank > 8 {
            r.pos -= 4;
            return Err(r.err(format!("rank {rank} of `{name}` is implausible")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= (bytes.len() - r.pos) / 4)
            .ok_or_else(|| r.err(format!("data of `{name}` {shape:?} exceeds the file")))?;
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after the tensor table"));
    }
    Ok(WeightsFile { meta, tensors })
}

/// Rebuilds the graph described by the metadata and fills in the tensors,
/// rejecting any name or shape mismatch.
pub fn into_model(file: WeightsFile) -> Result<ModelGraph> {
    let meta = &file.meta;
    let mut model = match meta.head {
        HeadKind::Baseline => ModelGraph::build_baseline(&meta.config(), None)?,
        HeadKind::Exshortcut => ModelGraph::structure(&meta.config())?,
    };
    apply(&mut model, &file.tensors)?;
    Ok(model.with_seed(meta.seed))
}

/// Copies `tensors` into `model` in canonical order.
pub fn apply(model: &mut ModelGraph, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let store = model.params_mut();
    if tensors.len() != store.len() {
        return Err(Error::WeightsMismatch(format!(
            "file has {} tensors, graph has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (id, (name, t)) in store.ids().collect::<Vec<_>>().into_iter().zip(tensors) {
        let e = store.entry(id);
        if &e.name != name {
            return Err(Error::WeightsMismatch(format!(
                "expected `{}`, found `{name}`",
                e.name
            )));
        }
        if e.tensor.shape() != t.shape() {
            return Err(Error::WeightsMismatch(format!(
                "`{name}`: expected {:?}, found {:?}",
                e.tensor.shape(),
                t.shape()
            )));
        }
        store.tensor_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

pub fn save(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    into_model(decode(&bytes)?)
}
