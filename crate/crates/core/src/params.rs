//! Flat, ordered storage for every learnable parameter and running
//! statistic of a model, grouped into named layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in the store's canonical order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId(pub(crate) usize);

/// What a stored tensor is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    /// Counted as a model parameter and updated by the optimizer.
    pub fn is_parameter(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    /// Weight decay applies to weights only.
    pub fn decays(self) -> bool {
        self == ParamRole::Weight
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    PointwiseConv,
    ShortcutConv,
    BatchNorm,
    LayerNorm,
    Linear,
    Classifier,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::DepthwiseConv => "depthwise_conv",
            LayerKind::PointwiseConv => "pointwise_conv",
            LayerKind::ShortcutConv => "shortcut_conv",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::LayerNorm => "layer_norm",
            LayerKind::Linear => "linear",
            LayerKind::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub role: ParamRole,
    pub layer: LayerId,
    pub tensor: Tensor<f32>,
    /// Cleared to freeze a parameter.
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct LayerMeta {
    pub name: String,
    pub kind: LayerKind,
    pub params: Vec<ParamId>,
}

/// Initialisation scheme for a new tensor.
#[derive(Debug, Clone, Copy)]
pub enum InitKind {
    Zeros,
    Ones,
    /// Normal with `std = sqrt(2 / fan_out)`.
    KaimingFanOut { fan_out: usize },
    /// Normal with the given std, resampled outside ±2 std.
    TruncNormal { std: f64 },
}

/// Source of initial values. Without a seed every random init is zero,
/// which is enough for structure-only analysis.
pub struct Initializer {
    rng: Option<ChaCha8Rng>,
}

impl Initializer {
    pub fn seeded(seed: u64) -> Self {
        Initializer {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn structural() -> Self {
        Initializer { rng: None }
    }

    fn fill(&mut self, shape: &[usize], kind: InitKind) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let data = match (kind, self.rng.as_mut()) {
            (InitKind::Ones, _) => vec![1.0; n],
            (InitKind::Zeros, _) | (_, None) => vec![0.0; n],
            (InitKind::KaimingFanOut { fan_out }, Some(rng)) => {
                let std = (2.0 / fan_out as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| normal.sample(rng) as f32).collect()
            }
            (InitKind::TruncNormal { std }, Some(rng)) => (0..n)
                .map(|_| loop {
                    let v: f64 = rng.sample(rand_distr::StandardNormal);
                    if v.abs() <= 2.0 {
                        break (v * std) as f32;
                    }
                })
                .collect(),
        };
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    layers: Vec<LayerMeta>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_layer(&mut self, name: impl Into<String>, kind: LayerKind) -> LayerId {
        self.layers.push(LayerMeta {
            name: name.into(),
            kind,
            params: Vec::new(),
        });
        LayerId(self.layers.len() - 1)
    }

    pub fn add(
        &mut self,
        layer: LayerId,
        suffix: &str,
        role: ParamRole,
        shape: &[usize],
        init: InitKind,
        initializer: &mut Initializer,
    ) -> ParamId {
        let tensor = initializer.fill(shape, init);
        let id = ParamId(self.entries.len());
        let meta = &mut self.layers[layer.0];
        meta.params.push(id);
        self.entries.push(ParamEntry {
            name: format!("{}.{suffix}", meta.name),
            role,
            layer,
            tensor,
            trainable: role.is_parameter(),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn layers(&self) -> &[LayerMeta] {
        &self.layers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<f32> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.entries[id.0].tensor
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let e = &mut self.entries[id.0];
        e.trainable = trainable && e.role.is_parameter();
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn layer(&self, id: LayerId) -> &LayerMeta {
        &self.layers[id.0]
    }

    /// Scalar count of learnable parameters (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.role.is_parameter())
            .map(|e| e.tensor.numel())
            .sum()
    }
}
