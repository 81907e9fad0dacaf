//! Analytic FLOPs estimate of an inference forward pass.
//!
//! Counting conventions (identical to the per-node counts recorded on the
//! tape, so the two can be compared exactly):
//!
//! * linear: `2 * positions * d_in * d_out` (bias adds not counted);
//! * window attention core: `4 * windows * t^2 * embed` for the score and
//!   value products, `t = m^2` including padded tokens;
//! * norms, activations, softmax and elementwise products: one per element;
//! * bilinear resize: eight per output element;
//! * additions, reshapes, gathers and concatenations: free.

use crate::backbone::BackboneConfig;
use crate::decoder::DecoderKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, AUX_STAGE};
use crate::nn::hidden_width;

/// Per-module FLOPs of one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsReport {
    pub parts: Vec<(String, u64)>,
    pub total: u64,
}

impl FlopsReport {
    fn from_parts(parts: Vec<(String, u64)>) -> Self {
        let total = parts.iter().map(|(_, v)| v).sum();
        FlopsReport { parts, total }
    }

    pub fn part(&self, name: &str) -> Option<u64> {
        self.parts.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Total in units of 1e9.
    pub fn giga(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

pub fn linear_flops(positions: usize, d_in: usize, d_out: usize) -> u64 {
    2 * (positions * d_in * d_out) as u64
}

/// Windowed attention over an `h x w x embed` map, projections included.
/// The cross variant has no query projection.
pub fn attention_flops(h: usize, w: usize, embed: usize, m: usize, cross: bool) -> u64 {
    let windows = h.div_ceil(m) * w.div_ceil(m);
    let t = m * m;
    let rows = windows * t;
    let projections = if cross { 3 } else { 4 };
    projections * linear_flops(rows, embed, embed) + 4 * (windows * t * t * embed) as u64
}

fn resize_flops(h: usize, w: usize, out_h: usize, out_w: usize, c: usize) -> u64 {
    if (h, w) == (out_h, out_w) {
        0
    } else {
        8 * (out_h * out_w * c) as u64
    }
}

fn mlp_flops(positions: usize, width: usize, hidden: usize) -> u64 {
    linear_flops(positions, width, hidden) + (positions * hidden) as u64 + linear_flops(positions, hidden, width)
}

/// Pre-norm attention + MLP block.
fn block_flops(h: usize, w: usize, width: usize, m: usize, mlp_ratio: f64) -> u64 {
    let n = (h * w * width) as u64;
    n + attention_flops(h, w, width, m, false) + n + mlp_flops(h * w, width, hidden_width(width, mlp_ratio))
}

/// Spatial extents of the four stage outputs for an `h x w` image.
pub fn stage_extents(cfg: &BackboneConfig, h: usize, w: usize) -> [(usize, usize); 4] {
    let mut e = [(h / cfg.patch, w / cfg.patch); 4];
    for s in 1..4 {
        e[s] = (e[s - 1].0.div_ceil(2), e[s - 1].1.div_ceil(2));
    }
    e
}

pub fn backbone_flops(cfg: &BackboneConfig, h: usize, w: usize) -> u64 {
    let ext = stage_extents(cfg, h, w);
    let (h1, w1) = ext[0];
    let mut total = linear_flops(h1 * w1, cfg.patch * cfg.patch * 3, cfg.embed) + (h1 * w1 * cfg.embed) as u64;
    for s in 0..4 {
        let (sh, sw) = ext[s];
        let c = cfg.stage_channels(s);
        total += cfg.depths[s] as u64 * block_flops(sh, sw, c, cfg.window, cfg.mlp_ratio);
        if s < 3 {
            let (nh, nw) = ext[s + 1];
            total += (nh * nw * 4 * c) as u64 + linear_flops(nh * nw, 4 * c, 2 * c);
        }
    }
    total
}

pub fn encoder_flops(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
    let ext = stage_extents(&cfg.backbone, h, w);
    let d = cfg.d_enc;
    let mut total = 0;
    for (s, &(sh, sw)) in ext.iter().enumerate() {
        total += linear_flops(sh * sw, cfg.backbone.stage_channels(s), d) + 2 * (sh * sw * d) as u64;
    }
    for s in (0..3).rev() {
        let (sh, sw) = ext[s];
        let (ph, pw) = ext[s + 1];
        total += resize_flops(ph, pw, sh, sw, d);
    }
    let (fh, fw) = ext[0];
    for &(sh, sw) in ext.iter() {
        total += attention_flops(sh, sw, d, cfg.fusion_window, false) + resize_flops(sh, sw, fh, fw, d);
    }
    total
}

pub fn decoder_flops(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
    let (fh, fw) = stage_extents(&cfg.backbone, h, w)[0];
    let d = cfg.d_enc;
    let n = (fh * fw * d) as u64;
    let pairs = cfg.schedule.pairs();
    match cfg.decoder {
        DecoderKind::Tfpn => 0,
        DecoderKind::MswinP => {
            let attn: u64 = pairs.iter().map(|&(m, _)| attention_flops(fh, fw, d, m, false)).sum();
            n + attn + linear_flops(fh * fw, pairs.len() * d, d) + n + mlp_flops(fh * fw, d, hidden_width(d, cfg.decoder_mlp_ratio))
        }
        DecoderKind::MswinS => pairs.iter().map(|&(m, _)| block_flops(fh, fw, d, m, cfg.decoder_mlp_ratio)).sum(),
        DecoderKind::MswinC => pairs.iter().map(|&(m, _)| attention_flops(fh, fw, d, m, true)).sum(),
    }
}

pub fn head_flops(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
    let (fh, fw) = stage_extents(&cfg.backbone, h, w)[0];
    linear_flops(fh * fw, cfg.d_enc, cfg.classes) + resize_flops(fh, fw, h, w, cfg.classes)
}

/// Training-only auxiliary head.
pub fn aux_flops(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
    let (sh, sw) = stage_extents(&cfg.backbone, h, w)[AUX_STAGE];
    let c = cfg.backbone.stage_channels(AUX_STAGE);
    linear_flops(sh * sw, c, cfg.aux_hidden)
        + (sh * sw * cfg.aux_hidden) as u64
        + linear_flops(sh * sw, cfg.aux_hidden, cfg.classes)
        + resize_flops(sh, sw, h, w, cfg.classes)
}

/// Inference FLOPs of one `h x w` image.
pub fn flops_estimate(cfg: &ModelConfig, h: usize, w: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    let stride = cfg.backbone.max_stride();
    if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::Config(format!("input {h}x{w} is not a positive multiple of {stride}")));
    }
    Ok(FlopsReport::from_parts(vec![
        ("backbone".into(), backbone_flops(&cfg.backbone, h, w)),
        ("encoder".into(), encoder_flops(cfg, h, w)),
        ("decoder".into(), decoder_flops(cfg, h, w)),
        ("head".into(), head_flops(cfg, h, w)),
    ]))
}
