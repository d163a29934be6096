//! Weights files, images and feature dumps.

pub mod image;
pub mod weights;

pub use image::{decode_pnm, encode_ppm, load_image, Image};
pub use weights::{WeightsFile, WeightsMeta};

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// JSON written next to a raw feature dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureSidecar {
    pub shape: Vec<usize>,
    /// 1-based block index; `None` for the classifier input.
    pub block: Option<usize>,
    pub variant: String,
    pub dtype: &'static str,
}

/// Writes `tensor` as little-endian f32 to `path` and the sidecar to
/// `path` with `.json` appended.
pub fn write_features(path: impl AsRef<Path>, tensor: &Tensor<f32>, block: Option<usize>, variant: &str) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = tensor.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, raw).map_err(|e| Error::io(path, e))?;
    let sidecar = FeatureSidecar {
        shape: tensor.shape().to_vec(),
        block,
        variant: variant.to_string(),
        dtype: "f32le",
    };
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    std::fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(side, e))
}
