//! Hierarchical Swin-style backbone.
//!
//! Patch embedding cuts the image into `p x p` patches and projects them to
//! `C` channels. Four stages of Swin blocks follow (alternating plain and
//! shifted windows), separated by patch merging, so stage `s` emits a map at
//! stride `p * 2^(s-1)` with `C * 2^(s-1)` channels.

use std::sync::Arc;

use rand::Rng;

use crate::attention::AttentionParams;
use crate::autodiff::{Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::nn::{hidden_width, LayerNorm, Linear, Mlp};
use crate::params::ParamStore;
use crate::tensor::{spatial_dims, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub name: String,
    pub patch: usize,
    /// Stage-1 width `C`.
    pub embed: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub mlp_ratio: f64,
}

impl BackboneConfig {
    /// Desk-scale preset.
    pub fn nano() -> Self {
        BackboneConfig { name: "swin-nano".into(), patch: 4, embed: 32, depths: [2, 2, 2, 2], heads: [1, 2, 4, 8], window: 4, mlp_ratio: 4.0 }
    }

    pub fn swin_t() -> Self {
        BackboneConfig { name: "swin-t".into(), patch: 4, embed: 96, depths: [2, 2, 6, 2], heads: [3, 6, 12, 24], window: 7, mlp_ratio: 4.0 }
    }

    pub fn swin_s() -> Self {
        BackboneConfig { name: "swin-s".into(), patch: 4, embed: 96, depths: [2, 2, 18, 2], heads: [3, 6, 12, 24], window: 7, mlp_ratio: 4.0 }
    }

    pub fn swin_b() -> Self {
        BackboneConfig { name: "swin-b".into(), patch: 4, embed: 128, depths: [2, 2, 18, 2], heads: [4, 8, 16, 32], window: 12, mlp_ratio: 4.0 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "swin-nano" | "nano" => Ok(Self::nano()),
            "swin-t" => Ok(Self::swin_t()),
            "swin-s" => Ok(Self::swin_s()),
            "swin-b" => Ok(Self::swin_b()),
            other => Err(Error::Config(format!("unknown backbone preset `{other}`"))),
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.embed << stage
    }

    pub fn stage_stride(&self, stage: usize) -> usize {
        self.patch << stage
    }

    /// Total downsampling factor of the last stage.
    pub fn max_stride(&self) -> usize {
        self.stage_stride(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.embed == 0 || self.window == 0 {
            return Err(Error::Config("backbone patch, width and window must be positive".into()));
        }
        for s in 0..4 {
            if self.depths[s] == 0 {
                return Err(Error::Config(format!("stage {} has no blocks", s + 1)));
            }
            if self.heads[s] == 0 || self.stage_channels(s) % self.heads[s] != 0 {
                return Err(Error::Config(format!("stage {} width {} not divisible by {} heads", s + 1, self.stage_channels(s), self.heads[s])));
            }
        }
        Ok(())
    }
}

/// Non-overlapping patch flattening, linear projection and layer norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, patch: usize, in_ch: usize, embed: usize) -> Self {
        PatchEmbed {
            patch,
            proj: Linear::new(ps, rng, &format!("{name}.proj"), patch * patch * in_ch, embed, true),
            norm: LayerNorm::new(ps, &format!("{name}.norm"), embed),
        }
    }

    /// Flattened `p x p x C` patches of a `[B?, H, W, C]` image.
    pub fn patches<'g, T: Scalar>(&self, img: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = img.shape();
        let (b, h, w, c) = spatial_dims(&shape)?;
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!("image {h}x{w} not divisible by patch size {p}")));
        }
        let (gh, gw) = (h / p, w / p);
        let mut idx = Vec::with_capacity(b * h * w);
        for bi in 0..b {
            for py in 0..gh {
                for px in 0..gw {
                    for dy in 0..p {
                        for dx in 0..p {
                            idx.push(((bi * h + py * p + dy) * w + px * p + dx) as u32);
                        }
                    }
                }
            }
        }
        let out = if shape.len() == 3 { vec![gh, gw, p * p * c] } else { vec![b, gh, gw, p * p * c] };
        img.gather("patch_flatten", OpKind::Reshape, c, Arc::new(idx), out)
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, img: Var<'g, T>) -> Result<Var<'g, T>> {
        let flat = self.patches(img)?;
        let x = self.proj.forward(g, flat)?;
        self.norm.forward(g, x)
    }
}

/// 2x2 neighbourhood concatenation, layer norm and projection to `2C`.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, width: usize) -> Self {
        PatchMerging {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), 4 * width),
            reduction: Linear::new(ps, rng, &format!("{name}.reduction"), 4 * width, 2 * width, false),
        }
    }

    /// `[B?, H, W, C]` to `[B?, ceil(H/2), ceil(W/2), 4C]`. Odd extents are
    /// padded by replicating the last row/column.
    pub fn concat_neighbourhoods<'g, T: Scalar>(x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        let (b, h, w, c) = spatial_dims(&shape)?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut idx = Vec::with_capacity(b * oh * ow * 4);
        for bi in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    // (0,0), (1,0), (0,1), (1,1)
                    for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let sy = (2 * y + dy).min(h - 1);
                        let sx = (2 * xx + dx).min(w - 1);
                        idx.push(((bi * h + sy) * w + sx) as u32);
                    }
                }
            }
        }
        let out = if shape.len() == 3 { vec![oh, ow, 4 * c] } else { vec![b, oh, ow, 4 * c] };
        x.gather("patch_merge", OpKind::Concat, c, Arc::new(idx), out)
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let cat = Self::concat_neighbourhoods(x)?;
        let normed = self.norm.forward(g, cat)?;
        self.reduction.forward(g, normed)
    }
}

/// Pre-norm transformer block with windowed attention and an MLP, both
/// residual.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: f64,
    ) -> Result<Self> {
        Ok(SwinBlock {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), width),
            attn: AttentionParams::new(ps, rng, &format!("{name}.attn"), width, heads, window, shift, false)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), width),
            mlp: Mlp::new(ps, rng, &format!("{name}.mlp"), width, hidden_width(width, mlp_ratio)),
        })
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.attn.forward(g, self.norm1.forward(g, x)?)?;
        let y = x.add(a)?;
        let m = self.mlp.forward(g, self.norm2.forward(g, y)?)?;
        y.add(m)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<SwinBlock>,
    /// Merging that feeds the next stage.
    pub merge: Option<PatchMerging>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut impl Rng, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let embed = PatchEmbed::new(ps, rng, "backbone.patch_embed", config.patch, 3, config.embed);
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let width = config.stage_channels(s);
            let blocks = (0..config.depths[s])
                .map(|i| {
                    let shift = if i % 2 == 1 { config.window / 2 } else { 0 };
                    SwinBlock::new(ps, rng, &format!("backbone.stage{}.block{i}", s + 1), width, config.heads[s], config.window, shift, config.mlp_ratio)
                })
                .collect::<Result<Vec<_>>>()?;
            let merge = (s < 3).then(|| PatchMerging::new(ps, rng, &format!("backbone.stage{}.merge", s + 1), width));
            stages.push(Stage { blocks, merge });
        }
        Ok(Backbone { config: config.clone(), embed, stages })
    }

    /// The four stage outputs `X1..X4`.
    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, img: Var<'g, T>) -> Result<[Var<'g, T>; 4]> {
        let mut x = self.embed.forward(g, img)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.forward(g, x)?;
            }
            outs.push(x);
            if let Some(merge) = &stage.merge {
                x = merge.forward(g, x)?;
            }
        }
        Ok(outs.try_into().expect("four stages"))
    }
}
