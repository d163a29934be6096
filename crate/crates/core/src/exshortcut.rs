//! Per-block shortcuts into the classifier and the widened classifier.
//!
//! Each active block `k` contributes `GAP(SiLU(PW(F̃_k)))`, a vector of
//! `ρ_k · C̃_k` values. The vectors are concatenated in ascending block
//! order and fed to a single linear classifier. The block-5 branch is the
//! backbone's final expansion conv, so `ρ = (0, 0, 0, 0, 4)` is exactly the
//! baseline head.

use crate::backbone::BlockOutputs;
use crate::config::{expand_width, Rho, VariantConfig, NUM_BLOCKS};
use crate::error::{Error, Result};
use crate::layers::{Conv, Forward, Linear, Tracer};
use crate::params::{Initializer, LayerKind, ParamStore};
use crate::tensor::{Activation, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShortcutSpec {
    /// 1-based.
    pub block_index: usize,
    pub rho: Rho,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ShortcutSpec {
    /// `None` when `rho` is zero (no shortcut for this block).
    pub fn new(block_index: usize, rho: Rho, in_channels: usize) -> Result<Option<Self>> {
        if !(1..=NUM_BLOCKS).contains(&block_index) {
            return Err(Error::InvalidArgument(format!(
                "block index {block_index} outside 1..={NUM_BLOCKS}"
            )));
        }
        if rho.is_negative() {
            return Err(Error::InvalidArgument(format!("rho{block_index} = {rho} is negative")));
        }
        if rho.is_zero() {
            return Ok(None);
        }
        let out_channels = rho.scale(in_channels).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "rho{block_index} = {rho} times {in_channels} channels is not a whole number"
            ))
        })?;
        Ok(Some(ShortcutSpec {
            block_index,
            rho,
            in_channels,
            out_channels,
        }))
    }

    /// Active shortcuts of a config, ascending by block.
    pub fn for_config(config: &VariantConfig) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for k in 0..NUM_BLOCKS {
            if let Some(s) = Self::new(k + 1, config.rho[k], config.block_channels[k])? {
                out.push(s);
            }
        }
        Ok(out)
    }

    /// Weights plus biases of the pointwise conv.
    pub fn parameter_count(&self) -> usize {
        self.in_channels * self.out_channels + self.out_channels
    }
}

/// Pointwise conv (with bias) → activation → global average pool.
#[derive(Debug, Clone)]
pub struct Shortcut {
    pub spec: ShortcutSpec,
    pub conv: Conv,
    /// `None` only in tests that need a linear branch.
    pub act: Option<Activation>,
}

impl Shortcut {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, spec: ShortcutSpec) -> Self {
        let conv = Conv::new(
            store,
            init,
            name,
            LayerKind::ShortcutConv,
            spec.in_channels,
            spec.out_channels,
            1,
            1,
            1,
            true,
        );
        Shortcut {
            spec,
            conv,
            act: Some(Activation::Silu),
        }
    }

    pub fn trace(&self, t: &mut Tracer, store: &ParamStore, input: &[usize]) -> Result<Vec<usize>> {
        let out = self.conv.trace(t, store, input)?;
        let name = &store.layer(self.conv.layer).name;
        t.push(format!("{name}.gap"), "global_avg_pool", vec![out[0], out[1]], 0);
        Ok(vec![out[0], out[1]])
    }
}

/// `[B, C̃_k, H, W] → [B, ρ_k·C̃_k]`.
pub fn make_shortcut<T: Scalar>(f: &mut Forward<'_, T>, feature: Var, shortcut: &Shortcut) -> Result<Var> {
    let c = f.tape.try_value(feature)?.dims4("make_shortcut")?.1;
    if c != shortcut.spec.in_channels {
        return Err(Error::shape(
            "make_shortcut",
            format!(
                "block {} shortcut expects {} channels, got {c}",
                shortcut.spec.block_index, shortcut.spec.in_channels
            ),
        ));
    }
    let mut y = shortcut.conv.forward(f, feature)?;
    if let Some(act) = shortcut.act {
        y = f.tape.activation(y, act)?;
    }
    f.tape.global_avg_pool(y)
}

/// Runs every shortcut and concatenates the results in the order given.
pub fn assemble_classifier_input<T: Scalar>(
    f: &mut Forward<'_, T>,
    outputs: &BlockOutputs<Var>,
    shortcuts: &[Shortcut],
) -> Result<Var> {
    if shortcuts.is_empty() {
        return Err(Error::InvalidArgument("no active shortcut".into()));
    }
    let parts = shortcuts
        .iter()
        .map(|s| make_shortcut(f, outputs.features[s.spec.block_index - 1], s))
        .collect::<Result<Vec<_>>>()?;
    f.tape.concat_channels(&parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierSpec {
    pub input_width: usize,
    pub class_count: usize,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub linear: Linear,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, spec: ClassifierSpec) -> Self {
        let linear = Linear::new(
            store,
            init,
            name,
            LayerKind::Classifier,
            spec.input_width,
            spec.class_count,
        );
        Classifier { spec, linear }
    }
}

/// `[B, P_total] → [B, classes]` logits.
pub fn classify<T: Scalar>(f: &mut Forward<'_, T>, input: Var, classifier: &Classifier) -> Result<Var> {
    let shape = f.tape.try_value(input)?.shape().to_vec();
    if shape.len() != 2 || shape[1] != classifier.spec.input_width {
        return Err(Error::shape(
            "classify",
            format!(
                "expected [B, {}], got {shape:?}",
                classifier.spec.input_width
            ),
        ));
    }
    classifier.linear.forward(f, input)
}

/// Shortcut branches plus the widened classifier.
#[derive(Debug, Clone)]
pub struct ExShortcutHead {
    pub shortcuts: Vec<Shortcut>,
    pub classifier: Classifier,
}

impl ExShortcutHead {
    /// Registers the shortcuts (ascending block) and then the classifier.
    pub fn new(store: &mut ParamStore, init: &mut Initializer, config: &VariantConfig) -> Result<Self> {
        let specs = ShortcutSpec::for_config(config)?;
        if specs.is_empty() {
            return Err(Error::InvalidArgument("no active shortcut".into()));
        }
        let shortcuts: Vec<Shortcut> = specs
            .into_iter()
            .map(|s| Shortcut::new(store, init, &format!("head.shortcut{}", s.block_index), s))
            .collect();
        let width: usize = shortcuts.iter().map(|s| s.spec.out_channels).sum();
        let expected = expand_width(&config.rho, &config.block_channels)?;
        assert_eq!(width, expected, "classifier input width disagrees with expand_width");
        let classifier = Classifier::new(
            store,
            init,
            "head.classifier",
            ClassifierSpec {
                input_width: width,
                class_count: config.class_count,
            },
        );
        Ok(ExShortcutHead {
            shortcuts,
            classifier,
        })
    }

    /// Returns `(classifier_input, logits)`.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, blocks: &BlockOutputs<Var>) -> Result<(Var, Var)> {
        let x = assemble_classifier_input(f, blocks, &self.shortcuts)?;
        let logits = classify(f, x, &self.classifier)?;
        Ok((x, logits))
    }

    pub fn trace(
        &self,
        t: &mut Tracer,
        store: &ParamStore,
        blocks: &[Vec<usize>; NUM_BLOCKS],
    ) -> Result<Vec<usize>> {
        let mut width = 0;
        let mut batch = 0;
        for s in &self.shortcuts {
            let out = s.trace(t, store, &blocks[s.spec.block_index - 1])?;
            batch = out[0];
            width += out[1];
        }
        t.push("head.concat", "concat", vec![batch, width], 0);
        self.classifier.linear.trace(t, store, &[batch, width])
    }
}

/// MobileViT-S head: 1×1 expansion conv on block 5, pool, classifier.
#[derive(Debug, Clone)]
pub struct BaselineHead {
    pub expand: Conv,
    pub classifier: Classifier,
}

/// Expansion factor of the baseline head conv (`160 → 640`).
pub const BASELINE_EXPANSION: usize = 4;

impl BaselineHead {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, channels: usize, class_count: usize) -> Self {
        let width = channels * BASELINE_EXPANSION;
        let expand = Conv::new(store, init, "head.expand", LayerKind::PointwiseConv, channels, width, 1, 1, 1, true);
        let classifier = Classifier::new(
            store,
            init,
            "head.classifier",
            ClassifierSpec {
                input_width: width,
                class_count,
            },
        );
        BaselineHead { expand, classifier }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, blocks: &BlockOutputs<Var>) -> Result<(Var, Var)> {
        let y = self.expand.forward(f, blocks.features[NUM_BLOCKS - 1])?;
        let y = f.tape.activation(y, Activation::Silu)?;
        let x = f.tape.global_avg_pool(y)?;
        let logits = classify(f, x, &self.classifier)?;
        Ok((x, logits))
    }

    pub fn trace(
        &self,
        t: &mut Tracer,
        store: &ParamStore,
        blocks: &[Vec<usize>; NUM_BLOCKS],
    ) -> Result<Vec<usize>> {
        let out = self.expand.trace(t, store, &blocks[NUM_BLOCKS - 1])?;
        let pooled = vec![out[0], out[1]];
        t.push("head.gap", "global_avg_pool", pooled.clone(), 0);
        self.classifier.linear.trace(t, store, &pooled)
    }
}
