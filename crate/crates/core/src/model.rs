//! Complete networks: backbone plus either the shortcut head or the plain
//! MobileViT-S head.

use crate::backbone::{build_backbone, Backbone, BackboneDims, BlockOutputs};
use crate::config::{self, Profile, VariantConfig, NUM_BLOCKS};
use crate::error::{Error, Result};
use crate::exshortcut::{BaselineHead, ExShortcutHead, BASELINE_EXPANSION};
use crate::layers::{Forward, Mode, TraceRow, Tracer};
use crate::params::{Initializer, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub enum Head {
    ExShortcut(ExShortcutHead),
    Baseline(BaselineHead),
}

/// A built network and its parameters. The layer tree is fixed after
/// construction; only parameter values change during training.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    config: VariantConfig,
    seed: Option<u64>,
    backbone: Backbone,
    head: Head,
    params: ParamStore,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub blocks: BlockOutputs<Var>,
    pub classifier_input: Var,
    pub logits: Var,
}

/// Materialised outputs of [`ModelGraph::infer`].
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub blocks: BlockOutputs,
    pub classifier_input: Tensor<f32>,
    pub logits: Tensor<f32>,
}

impl ModelGraph {
    fn assemble(config: VariantConfig, seed: Option<u64>, baseline: bool) -> Result<Self> {
        let mut init = match seed {
            Some(s) => Initializer::seeded(s),
            None => Initializer::structural(),
        };
        let mut params = ParamStore::new();
        let dims = BackboneDims::for_config(&config);
        let backbone = build_backbone(&dims, &mut params, &mut init);
        let head = if baseline {
            Head::Baseline(BaselineHead::new(
                &mut params,
                &mut init,
                config.block_channels[NUM_BLOCKS - 1],
                config.class_count,
            ))
        } else {
            Head::ExShortcut(ExShortcutHead::new(&mut params, &mut init, &config)?)
        };
        Ok(ModelGraph {
            config,
            seed,
            backbone,
            head,
            params,
        })
    }

    /// Shortcut model with parameters drawn from `seed`.
    pub fn build(config: &VariantConfig, seed: u64) -> Result<Self> {
        let config = config::check(config.clone(), true)?;
        Self::assemble(config, Some(seed), false)
    }

    /// Shortcut model with placeholder values, for counting and tracing.
    pub fn structure(config: &VariantConfig) -> Result<Self> {
        let config = config::check(config.clone(), true)?;
        Self::assemble(config, None, false)
    }

    /// MobileViT-S built directly with its own head, not through the
    /// shortcut path.
    pub fn build_mobilevit_s(profile: Profile, class_count: usize, seed: Option<u64>) -> Result<Self> {
        let mut config = config::registry()
            .values()
            .find(|c| c.name.starts_with("mobilevit-s") && c.profile == profile)
            .cloned()
            .expect("registry holds mobilevit-s for every profile");
        config.class_count = class_count;
        Self::build_baseline(&config, seed)
    }

    /// Baseline head on the backbone described by `config`; its ρ must be
    /// that of MobileViT-S.
    pub fn build_baseline(config: &VariantConfig, seed: Option<u64>) -> Result<Self> {
        let config = config::check(config.clone(), false)?;
        if config.active_blocks() != [NUM_BLOCKS] || config.classifier_width()? != config.block_channels[NUM_BLOCKS - 1] * BASELINE_EXPANSION {
            return Err(Error::InvalidArgument(format!(
                "`{}` is not a MobileViT-S configuration",
                config.name
            )));
        }
        Self::assemble(config, seed, true)
    }

    /// Records the seed the parameters were drawn from.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn config(&self) -> &VariantConfig {
        &self.config
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn classifier_width(&self) -> usize {
        match &self.head {
            Head::ExShortcut(h) => h.classifier.spec.input_width,
            Head::Baseline(h) => h.classifier.spec.input_width,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, input: Var) -> Result<ModelVars> {
        let blocks = self.backbone.forward(f, input)?;
        let (classifier_input, logits) = match &self.head {
            Head::ExShortcut(h) => h.forward(f, &blocks)?,
            Head::Baseline(h) => h.forward(f, &blocks)?,
        };
        Ok(ModelVars {
            blocks,
            classifier_input,
            logits,
        })
    }

    /// Eval-mode forward pass without gradient bookkeeping.
    pub fn infer(&self, input: &Tensor<f32>) -> Result<ModelOutput> {
        let mut tape: Tape<f32> = Tape::inference();
        let mut f = Forward::new(&mut tape, &self.params, Mode::Eval);
        let x = f.tape.constant(input.clone());
        let vars = self.forward(&mut f, x)?;
        Ok(ModelOutput {
            blocks: BlockOutputs {
                features: vars.blocks.features.map(|v| tape.value(v).clone()),
            },
            classifier_input: tape.value(vars.classifier_input).clone(),
            logits: tape.value(vars.logits).clone(),
        })
    }

    /// Layer-by-layer output shapes and MACs for a `[batch, 3, size, size]`
    /// input, computed without evaluating anything.
    pub fn trace(&self, batch: usize, size: usize) -> Result<Vec<TraceRow>> {
        let mut t = Tracer::default();
        let blocks = self.backbone.trace(&mut t, &self.params, batch, size)?;
        match &self.head {
            Head::ExShortcut(h) => h.trace(&mut t, &self.params, &blocks)?,
            Head::Baseline(h) => h.trace(&mut t, &self.params, &blocks)?,
        };
        Ok(t.rows)
    }

    /// Copies every tensor from `other`, which must have the same layout.
    pub fn copy_params_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::WeightsMismatch(format!(
                "{} tensors supplied, model has {}",
                other.len(),
                self.params.len()
            )));
        }
        for id in self.params.ids().collect::<Vec<_>>() {
            let (src, dst) = (other.entry(id), self.params.entry(id));
            if src.name != dst.name || src.tensor.shape() != dst.tensor.shape() {
                return Err(Error::WeightsMismatch(format!(
                    "`{}` {:?} does not match `{}` {:?}",
                    src.name,
                    src.tensor.shape(),
                    dst.name,
                    dst.tensor.shape()
                )));
            }
            self.params
                .tensor_mut(id)
                .data_mut()
                .copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}
