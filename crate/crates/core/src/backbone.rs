//! MobileViT-S feature extractor arranged as five down-sampling blocks.
//!
//! | block | stages                          | output (256² input) |
//! |-------|---------------------------------|---------------------|
//! | 1     | 3×3 conv ↓2, MV2                | C̃₁ × 128²           |
//! | 2     | MV2 ↓2, MV2 × 2                 | C̃₂ × 64²            |
//! | 3     | MV2 ↓2, MobileViT (d, L)        | C̃₃ × 32²            |
//! | 4     | MV2 ↓2, MobileViT (d, L)        | C̃₄ × 16²            |
//! | 5     | MV2 ↓2, MobileViT (d, L)        | C̃₅ × 8²             |

use crate::config::{Profile, VariantConfig, NUM_BLOCKS};
use crate::error::{Error, Result};
use crate::layers::{ConvUnit, Forward, LayerNorm, Linear, Mode, Tracer};
use crate::model::ModelGraph;
use crate::params::{Initializer, LayerKind, ParamStore};
use crate::tensor::{Activation, AttentionWeights, Scalar, Tape, Tensor, Var};

/// Total down-sampling factor from input to block 5.
pub const OUTPUT_STRIDE: usize = 32;

/// Backbone hyperparameters not carried by [`VariantConfig`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneDims {
    pub stem_channels: usize,
    pub block_channels: [usize; NUM_BLOCKS],
    pub expansion: usize,
    /// Transformer width `d` of blocks 3, 4, 5.
    pub transformer_dims: [usize; 3],
    /// Transformer depth `L` of blocks 3, 4, 5.
    pub transformer_depths: [usize; 3],
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub patch: (usize, usize),
}

impl BackboneDims {
    pub fn for_config(config: &VariantConfig) -> Self {
        let (transformer_dims, transformer_depths) = match config.profile {
            Profile::Imagenet => ([144, 192, 240], [2, 4, 3]),
            Profile::Tiny => ([16, 16, 16], [1, 1, 1]),
        };
        BackboneDims {
            stem_channels: (config.block_channels[0] / 2).max(1),
            block_channels: config.block_channels,
            expansion: 4,
            transformer_dims,
            transformer_depths,
            heads: 4,
            ffn_multiplier: 2,
            patch: (2, 2),
        }
    }
}

/// Inverted residual block parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mv2Spec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub expansion: usize,
}

impl Mv2Spec {
    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn hidden(&self) -> usize {
        self.in_channels * self.expansion
    }
}

/// 1×1 expand → 3×3 depthwise → 1×1 linear projection, with an identity
/// skip when [`Mv2Spec::has_residual`].
#[derive(Debug, Clone)]
pub struct Mv2Block {
    pub spec: Mv2Spec,
    pub expand: ConvUnit,
    pub depthwise: ConvUnit,
    pub project: ConvUnit,
    pub residual: bool,
}

impl Mv2Block {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, spec: Mv2Spec) -> Self {
        let hidden = spec.hidden();
        let silu = Some(Activation::Silu);
        Mv2Block {
            spec,
            expand: ConvUnit::new(store, init, &format!("{name}.expand"), spec.in_channels, hidden, 1, 1, 1, true, silu),
            depthwise: ConvUnit::new(store, init, &format!("{name}.depthwise"), hidden, hidden, 3, spec.stride, hidden, true, silu),
            project: ConvUnit::new(store, init, &format!("{name}.project"), hidden, spec.out_channels, 1, 1, 1, true, None),
            residual: spec.has_residual(),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let c = f.tape.try_value(x)?.dims4("mv2_block")?.1;
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "mv2_block",
                format!("expected {} input channels, got {c}", self.spec.in_channels),
            ));
        }
        let y = self.expand.forward(f, x)?;
        let y = self.depthwise.forward(f, y)?;
        let y = self.project.forward(f, y)?;
        if self.residual {
            f.tape.add(x, y)
        } else {
            Ok(y)
        }
    }

    pub fn trace(&self, t: &mut Tracer, store: &ParamStore, input: &[usize]) -> Result<Vec<usize>> {
        let y = self.expand.trace(t, store, input)?;
        let y = self.depthwise.trace(t, store, &y)?;
        self.project.trace(t, store, &y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MobileVitBlockSpec {
    pub channels: usize,
    pub transformer_dim: usize,
    pub transformer_depth: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub patch: (usize, usize),
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub attn_norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub heads: usize,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        ffn_dim: usize,
        heads: usize,
    ) -> Self {
        let lin = |store: &mut ParamStore, init: &mut Initializer, n: &str, i: usize, o: usize| {
            Linear::new(store, init, &format!("{name}.{n}"), LayerKind::Linear, i, o)
        };
        let attn_norm = LayerNorm::new(store, init, &format!("{name}.attn_norm"), dim);
        let query = lin(store, init, "attn.query", dim, dim);
        let key = lin(store, init, "attn.key", dim, dim);
        let value = lin(store, init, "attn.value", dim, dim);
        let output = lin(store, init, "attn.output", dim, dim);
        let ffn_norm = LayerNorm::new(store, init, &format!("{name}.ffn_norm"), dim);
        let ffn_in = lin(store, init, "ffn.0", dim, ffn_dim);
        let ffn_out = lin(store, init, "ffn.1", ffn_dim, dim);
        TransformerLayer {
            attn_norm,
            query,
            key,
            value,
            output,
            ffn_norm,
            ffn_in,
            ffn_out,
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let h = self.attn_norm.forward(f, x)?;
        let weights = AttentionWeights {
            query: self.query.vars(f),
            key: self.key.vars(f),
            value: self.value.vars(f),
            output: self.output.vars(f),
        };
        let h = f.tape.multi_head_attention(h, &weights, self.heads)?;
        let x = f.tape.add(x, h)?;
        let h = self.ffn_norm.forward(f, x)?;
        let h = self.ffn_in.forward(f, h)?;
        let h = f.tape.activation(h, Activation::Silu)?;
        let h = self.ffn_out.forward(f, h)?;
        f.tape.add(x, h)
    }

    pub fn trace(&self, t: &mut Tracer, store: &ParamStore, input: &[usize]) -> Result<Vec<usize>> {
        let h = self.attn_norm.trace(t, store, input)?;
        self.query.trace(t, store, &h)?;
        self.key.trace(t, store, &h)?;
        self.value.trace(t, store, &h)?;
        // QKᵀ and PV: 2 · sequences · N² · D
        let (seqs, n, d) = (input[0], input[1], input[2]);
        let name = store.layer(self.query.layer).name.trim_end_matches(".query").to_string();
        t.push(format!("{name}.scores"), "attention", input.to_vec(), (2 * seqs * n * n * d) as u64);
        self.output.trace(t, store, &h)?;
        let h = self.ffn_norm.trace(t, store, input)?;
        let h = self.ffn_in.trace(t, store, &h)?;
        self.ffn_out.trace(t, store, &h)
    }
}

/// Local (conv) → global (transformer over unfolded patches) → local
/// (fold, project, fuse with the block input).
#[derive(Debug, Clone)]
pub struct MobileVitBlock {
    pub spec: MobileVitBlockSpec,
    pub local: ConvUnit,
    pub to_dim: ConvUnit,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
    pub project: ConvUnit,
    pub fusion: ConvUnit,
}

impl MobileVitBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        spec: MobileVitBlockSpec,
    ) -> Self {
        let (c, d) = (spec.channels, spec.transformer_dim);
        let silu = Some(Activation::Silu);
        let local = ConvUnit::new(store, init, &format!("{name}.local"), c, c, 3, 1, 1, true, silu);
        let to_dim = ConvUnit::new(store, init, &format!("{name}.to_dim"), c, d, 1, 1, 1, false, None);
        let layers = (0..spec.transformer_depth)
            .map(|i| {
                TransformerLayer::new(store, init, &format!("{name}.transformer.{i}"), d, spec.ffn_dim, spec.heads)
            })
            .collect();
        let norm = LayerNorm::new(store, init, &format!("{name}.norm"), d);
        let project = ConvUnit::new(store, init, &format!("{name}.project"), d, c, 1, 1, 1, true, silu);
        let fusion = ConvUnit::new(store, init, &format!("{name}.fusion"), 2 * c, c, 3, 1, 1, true, silu);
        MobileVitBlock {
            spec,
            local,
            to_dim,
            layers,
            norm,
            project,
            fusion,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = f.tape.try_value(x)?.dims4("mobilevit_block")?;
        let (ph, pw) = self.spec.patch;
        if h % ph != 0 || w % pw != 0 {
            return Err(Error::shape(
                "mobilevit_block",
                format!("spatial {h}x{w} is not divisible by patch {ph}x{pw}"),
            ));
        }
        let y = self.local.forward(f, x)?;
        let y = self.to_dim.forward(f, y)?;
        let mut seq = f.tape.unfold_patches(y, ph, pw)?;
        for layer in &self.layers {
            seq = layer.forward(f, seq)?;
        }
        let seq = self.norm.forward(f, seq)?;
        let y = f.tape.fold_patches(seq, ph, pw, h, w)?;
        let y = self.project.forward(f, y)?;
        let cat = f.tape.concat_channels(&[x, y])?;
        self.fusion.forward(f, cat)
    }

    pub fn trace(&self, t: &mut Tracer, store: &ParamStore, input: &[usize]) -> Result<Vec<usize>> {
        let (b, c, h, w) = match *input {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::shape("mobilevit_block", format!("{input:?}"))),
        };
        let (ph, pw) = self.spec.patch;
        if h % ph != 0 || w % pw != 0 {
            return Err(Error::shape(
                "mobilevit_block",
                format!("spatial {h}x{w} is not divisible by patch {ph}x{pw}"),
            ));
        }
        let y = self.local.trace(t, store, input)?;
        let y = self.to_dim.trace(t, store, &y)?;
        let seq = vec![b * ph * pw, (h / ph) * (w / pw), y[1]];
        for layer in &self.layers {
            layer.trace(t, store, &seq)?;
        }
        self.norm.trace(t, store, &seq)?;
        let y = self.project.trace(t, store, &[b, seq[2], h, w])?;
        self.fusion.trace(t, store, &[b, c + y[1], h, w])
    }
}

#[derive(Debug, Clone)]
pub enum Stage {
    Conv(ConvUnit),
    Mv2(Mv2Block),
    MobileVit(MobileVitBlock),
}

impl Stage {
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        match self {
            Stage::Conv(c) => c.forward(f, x),
            Stage::Mv2(m) => m.forward(f, x),
            Stage::MobileVit(m) => m.forward(f, x),
        }
    }

    pub fn trace(&self, t: &mut Tracer, store: &ParamStore, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Stage::Conv(c) => c.trace(t, store, input),
            Stage::Mv2(m) => m.trace(t, store, input),
            Stage::MobileVit(m) => m.trace(t, store, input),
        }
    }
}

/// One resolution level; the first stage is the down-sampling one.
#[derive(Debug, Clone)]
pub struct Block {
    pub index: usize,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub dims: BackboneDims,
    pub blocks: Vec<Block>,
}

/// Per-block feature maps `F̃₁ … F̃₅` in block order.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutputs<V = Tensor<f32>> {
    pub features: [V; NUM_BLOCKS],
}

/// Assembles the five-block backbone, registering its parameters in
/// depth-first order.
pub fn build_backbone(dims: &BackboneDims, store: &mut ParamStore, init: &mut Initializer) -> Backbone {
    let ch = dims.block_channels;
    let mv2 = |store: &mut ParamStore, init: &mut Initializer, name: String, i: usize, o: usize, s: usize| {
        Stage::Mv2(Mv2Block::new(
            store,
            init,
            &name,
            Mv2Spec {
                in_channels: i,
                out_channels: o,
                stride: s,
                expansion: dims.expansion,
            },
        ))
    };
    let mut blocks = Vec::with_capacity(NUM_BLOCKS);

    let stem = ConvUnit::new(store, init, "block1.stem", 3, dims.stem_channels, 3, 2, 1, true, Some(Activation::Silu));
    blocks.push(Block {
        index: 1,
        stages: vec![
            Stage::Conv(stem),
            mv2(store, init, "block1.mv2_0".into(), dims.stem_channels, ch[0], 1),
        ],
    });
    blocks.push(Block {
        index: 2,
        stages: vec![
            mv2(store, init, "block2.mv2_0".into(), ch[0], ch[1], 2),
            mv2(store, init, "block2.mv2_1".into(), ch[1], ch[1], 1),
            mv2(store, init, "block2.mv2_2".into(), ch[1], ch[1], 1),
        ],
    });
    for k in 2..NUM_BLOCKS {
        let t = k - 2;
        let down = mv2(store, init, format!("block{}.mv2_0", k + 1), ch[k - 1], ch[k], 2);
        let d = dims.transformer_dims[t];
        let vit = MobileVitBlock::new(
            store,
            init,
            &format!("block{}.mobilevit", k + 1),
            MobileVitBlockSpec {
                channels: ch[k],
                transformer_dim: d,
                transformer_depth: dims.transformer_depths[t],
                heads: dims.heads,
                ffn_dim: d * dims.ffn_multiplier,
                patch: dims.patch,
            },
        );
        blocks.push(Block {
            index: k + 1,
            stages: vec![down, Stage::MobileVit(vit)],
        });
    }
    Backbone {
        dims: dims.clone(),
        blocks,
    }
}

impl Backbone {
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, input: Var) -> Result<BlockOutputs<Var>> {
        let (_, c, h, w) = f.tape.try_value(input)?.dims4("backbone")?;
        if c != 3 {
            return Err(Error::shape("backbone", format!("expected 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::shape(
                "backbone",
                format!("input {h}x{w} is not divisible by {OUTPUT_STRIDE}"),
            ));
        }
        let mut x = input;
        let mut features = [input; NUM_BLOCKS];
        for (k, block) in self.blocks.iter().enumerate() {
            for stage in &block.stages {
                x = stage.forward(f, x)?;
            }
            features[k] = x;
        }
        Ok(BlockOutputs { features })
    }

    /// Symbolic shapes of every layer for a `[batch, 3, size, size]` input,
    /// plus the output shape of each block.
    pub fn trace(
        &self,
        t: &mut Tracer,
        store: &ParamStore,
        batch: usize,
        size: usize,
    ) -> Result<[Vec<usize>; NUM_BLOCKS]> {
        if size == 0 || !size.is_multiple_of(OUTPUT_STRIDE) {
            return Err(Error::shape(
                "trace",
                format!("input size {size} is not divisible by {OUTPUT_STRIDE}"),
            ));
        }
        let mut shape = vec![batch, 3, size, size];
        let mut out: [Vec<usize>; NUM_BLOCKS] = Default::default();
        for (k, block) in self.blocks.iter().enumerate() {
            for stage in &block.stages {
                shape = stage.trace(t, store, &shape)?;
            }
            t.push(format!("block{}", block.index), "block_output", shape.clone(), 0);
            out[k] = shape.clone();
        }
        Ok(out)
    }
}

/// Runs the backbone in eval mode and returns every block's output.
pub fn forward_collect(model: &ModelGraph, input: &Tensor<f32>) -> Result<BlockOutputs> {
    let mut tape: Tape<f32> = Tape::inference();
    let mut f = Forward::new(&mut tape, model.params(), Mode::Eval);
    let x = f.tape.constant(input.clone());
    let out = model.backbone().forward(&mut f, x)?;
    Ok(BlockOutputs {
        features: out.features.map(|v| tape.value(v).clone()),
    })
}
