//! Full segmentation network: backbone, pyramid encoder, decoder, classifier
//! and auxiliary head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::decoder::{check_preserved, AuxHead, Decoder, DecoderKind, SegHead, WindowSchedule};
use crate::encoder::{Tfpn, DEFAULT_FUSION_WINDOW};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{spatial_dims, Scalar};

pub const AUX_LOSS_WEIGHT: f64 = 0.4;
/// Stage (0-based) feeding the auxiliary head.
pub const AUX_STAGE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderKind,
    pub schedule: WindowSchedule,
    pub d_enc: usize,
    /// Heads of the fusion and decoder attention.
    pub heads: usize,
    pub fusion_window: usize,
    /// MLP expansion inside decoder blocks.
    pub decoder_mlp_ratio: f64,
    pub classes: usize,
    pub aux_hidden: usize,
}

impl ModelConfig {
    /// Swin-S backbone, 512-wide encoder, 8 heads, 150 classes.
    pub fn full_size(decoder: DecoderKind) -> Self {
        ModelConfig {
            backbone: BackboneConfig::swin_s(),
            decoder,
            schedule: WindowSchedule::default(),
            d_enc: 512,
            heads: 8,
            fusion_window: DEFAULT_FUSION_WINDOW,
            decoder_mlp_ratio: 1.0,
            classes: 150,
            aux_hidden: 256,
        }
    }

    /// Swin-Nano backbone with a narrow encoder.
    pub fn toy(decoder: DecoderKind, classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::nano(),
            decoder,
            schedule: WindowSchedule::default(),
            d_enc: 32,
            heads: 4,
            fusion_window: DEFAULT_FUSION_WINDOW,
            decoder_mlp_ratio: 1.0,
            classes,
            aux_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.classes == 0 || self.classes > 255 {
            return Err(Error::Config(format!("class count {} outside [1, 255]", self.classes)));
        }
        if self.heads == 0 || self.d_enc % self.heads != 0 {
            return Err(Error::Config(format!("d_enc {} not divisible by {} heads", self.d_enc, self.heads)));
        }
        if self.fusion_window == 0 || self.aux_hidden == 0 {
            return Err(Error::Config("fusion window and aux width must be positive".into()));
        }
        if !(self.decoder_mlp_ratio > 0.0) {
            return Err(Error::Config("decoder MLP ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub encoder: Tfpn,
    pub decoder: Decoder,
    pub head: SegHead,
    pub aux: AuxHead,
}

/// Forward results kept for losses and inspection.
pub struct Outputs<'g, T: Scalar> {
    pub stages: [Var<'g, T>; 4],
    pub y0: Var<'g, T>,
    pub z: Var<'g, T>,
    /// Full-resolution class scores `[B?, H, W, K]`.
    pub logits: Var<'g, T>,
    pub aux_logits: Option<Var<'g, T>>,
}

impl SegModel {
    /// Builds the network and its freshly initialized parameters.
    pub fn new<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let backbone = Backbone::new(&mut ps, &mut rng, &config.backbone)?;
        let widths = [0, 1, 2, 3].map(|s| config.backbone.stage_channels(s));
        let encoder = Tfpn::new(&mut ps, &mut rng, widths, config.d_enc, config.heads, config.fusion_window)?;
        let decoder = Decoder::new(&mut ps, &mut rng, config.decoder, config.d_enc, config.heads, &config.schedule, config.decoder_mlp_ratio)?;
        let head = SegHead::new(&mut ps, &mut rng, "head", config.d_enc, config.classes);
        let aux = AuxHead::new(&mut ps, &mut rng, widths[AUX_STAGE], config.aux_hidden, config.classes);
        Ok((SegModel { config: config.clone(), backbone, encoder, decoder, head, aux }, ps))
    }

    /// Runs the network on a `[B?, H, W, 3]` image. The auxiliary head runs
    /// only when `with_aux` is set.
    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, img: Var<'g, T>, with_aux: bool) -> Result<Outputs<'g, T>> {
        let (_, h, w, c) = spatial_dims(&img.shape())?;
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 image channels, got {c}")));
        }
        let stride = self.config.backbone.max_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Config(format!("input {h}x{w} is not divisible by {stride}")));
        }
        let stages = self.backbone.forward(g, img)?;
        let y0 = self.encoder.forward(g, &stages)?;
        let z = self.decoder.forward(g, y0)?;
        check_preserved(&y0.shape(), &z.shape())?;
        let logits = self.head.forward(g, z, h, w)?;
        let aux_logits = if with_aux { Some(self.aux.forward(g, stages[AUX_STAGE], h, w)?) } else { None };
        Ok(Outputs { stages, y0, z, logits, aux_logits })
    }

    /// `CE(main) + 0.4 * CE(aux)` against flattened labels.
    pub fn loss<'g, T: Scalar>(&self, out: &Outputs<'g, T>, labels: &[u8]) -> Result<Var<'g, T>> {
        let k = self.config.classes;
        let flat = |v: Var<'g, T>| -> Result<Var<'g, T>> {
            let n = v.value().numel() / k;
            v.reshape(vec![n, k])
        };
        let main = flat(out.logits)?.cross_entropy(labels)?;
        match out.aux_logits {
            Some(aux) => main.add(flat(aux)?.cross_entropy(labels)?.scale(AUX_LOSS_WEIGHT)?),
            None => Ok(main),
        }
    }
}
