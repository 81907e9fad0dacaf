//! Run configuration in a flat `section.key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! model.decoder = mswin-p
//! model.schedule = 5:0,5:2,7:0,7:3,12:0,12:6
//! optimizer.lr = 6e-5
//! data.crop = 64x64
//! eval.scales = 0.75,1.0,1.25
//! ```
//!
//! Unknown or repeated keys are configuration errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::decoder::{DecoderKind, WindowSchedule};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Square side of synthetic scenes.
    pub image_size: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub crop: (usize, usize),
    pub flip_p: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Stop once training-set mIoU reaches this value.
    pub stop_miou: Option<f64>,
    pub seed: u64,
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub scales: Vec<f64>,
    pub flip: bool,
    pub confusion_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(DecoderKind::MswinP, 4),
            optimizer: AdamWConfig::default(),
            train: TrainConfig { steps: 2000, warmup: 100, batch_size: 4, eval_every: 100, stop_miou: None, seed: 0, log: None, checkpoint: None },
            data: DataConfig { source: DataSource::Synthetic, image_size: 64, train_count: 32, eval_count: 16, crop: (64, 64), flip_p: 0.5, seed: 0 },
            eval: EvalConfig { scales: vec![0.75, 1.0, 1.25], flip: true, confusion_csv: None },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

/// `HxW` or a single side.
pub fn parse_extent(v: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("bad extent `{v}` (expected HxW)"));
    match v.split_once(['x', 'X']) {
        Some((h, w)) => Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?)),
        None => {
            let s = v.trim().parse().map_err(|_| bad())?;
            Ok((s, s))
        }
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_four(key: &str, v: &str) -> Result<[usize; 4]> {
    let list: Vec<usize> = parse_list(key, v)?;
    list.try_into().map_err(|_| Error::Config(format!("`{key}` needs four values")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        let mut backbone_overrides = Vec::new();
        let (mut source, mut data_path) = (None, None);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`", lineno + 1)))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", lineno + 1)));
            }
            let m = &mut cfg.model;
            match key {
                "model.backbone" => m.backbone = BackboneConfig::preset(value)?,
                "model.backbone_embed" | "model.backbone_depths" | "model.backbone_heads" | "model.backbone_window" | "model.backbone_patch" => {
                    backbone_overrides.push((key.to_string(), value.to_string()))
                }
                "model.decoder" => m.decoder = value.parse()?,
                "model.schedule" => m.schedule = WindowSchedule::parse(value)?,
                "model.d_enc" => m.d_enc = parse(key, value)?,
                "model.heads" => m.heads = parse(key, value)?,
                "model.fusion_window" => m.fusion_window = parse(key, value)?,
                "model.decoder_mlp_ratio" => m.decoder_mlp_ratio = parse(key, value)?,
                "model.classes" => m.classes = parse(key, value)?,
                "model.aux_hidden" => m.aux_hidden = parse(key, value)?,
                "optimizer.lr" => cfg.optimizer.lr = parse(key, value)?,
                "optimizer.weight_decay" => cfg.optimizer.weight_decay = parse(key, value)?,
                "optimizer.beta1" => cfg.optimizer.beta1 = parse(key, value)?,
                "optimizer.beta2" => cfg.optimizer.beta2 = parse(key, value)?,
                "optimizer.eps" => cfg.optimizer.eps = parse(key, value)?,
                "train.steps" => cfg.train.steps = parse(key, value)?,
                "train.warmup" => cfg.train.warmup = parse(key, value)?,
                "train.batch_size" => cfg.train.batch_size = parse(key, value)?,
                "train.eval_every" => cfg.train.eval_every = parse(key, value)?,
                "train.stop_miou" => cfg.train.stop_miou = Some(parse(key, value)?),
                "train.seed" => cfg.train.seed = parse(key, value)?,
                "train.log" => cfg.train.log = Some(PathBuf::from(value)),
                "train.checkpoint" => cfg.train.checkpoint = Some(PathBuf::from(value)),
                "data.source" => source = Some(value.to_string()),
                "data.path" => data_path = Some(PathBuf::from(value)),
                "data.image_size" => cfg.data.image_size = parse(key, value)?,
                "data.train_count" => cfg.data.train_count = parse(key, value)?,
                "data.eval_count" => cfg.data.eval_count = parse(key, value)?,
                "data.crop" => cfg.data.crop = parse_extent(value)?,
                "data.flip_p" => cfg.data.flip_p = parse(key, value)?,
                "data.seed" => cfg.data.seed = parse(key, value)?,
                "eval.scales" => cfg.eval.scales = parse_list(key, value)?,
                "eval.flip" => cfg.eval.flip = parse_bool(key, value)?,
                "eval.confusion_csv" => cfg.eval.confusion_csv = Some(PathBuf::from(value)),
                _ => return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1))),
            }
        }
        // explicit backbone fields apply on top of the chosen preset
        for (key, value) in backbone_overrides {
            let b = &mut cfg.model.backbone;
            match key.as_str() {
                "model.backbone_embed" => b.embed = parse(&key, &value)?,
                "model.backbone_depths" => b.depths = parse_four(&key, &value)?,
                "model.backbone_heads" => b.heads = parse_four(&key, &value)?,
                "model.backbone_window" => b.window = parse(&key, &value)?,
                _ => b.patch = parse(&key, &value)?,
            }
        }
        let b = &mut cfg.model.backbone;
        if BackboneConfig::preset(&b.name).map_or(true, |p| p != *b) {
            b.name = "custom".into();
        }
        cfg.data.source = match (source.as_deref(), data_path) {
            (None | Some("synthetic"), None) => DataSource::Synthetic,
            (None | Some("directory"), Some(p)) => DataSource::Directory(p),
            (Some("directory"), None) => return Err(Error::Config("data.source = directory needs data.path".into())),
            (Some("synthetic"), Some(_)) => return Err(Error::Config("data.path given for synthetic data".into())),
            (Some(other), _) => return Err(Error::Config(format!("data.source must be synthetic or directory, got `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let stride = self.model.backbone.max_stride();
        let (ch, cw) = self.data.crop;
        if ch == 0 || cw == 0 || ch % stride != 0 || cw % stride != 0 {
            return Err(Error::Config(format!("crop {ch}x{cw} must be a positive multiple of {stride}")));
        }
        if self.eval.scales.is_empty() || self.eval.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("eval scales must be non-empty and positive".into()));
        }
        if !(0.0..=1.0).contains(&self.data.flip_p) {
            return Err(Error::Config("data.flip_p must lie in [0, 1]".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Text form accepted by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let b = &m.backbone;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if b.name != "custom" {
            kv("model.backbone", b.name.clone());
        }
        kv("model.backbone_embed", b.embed.to_string());
        kv("model.backbone_depths", list(&b.depths));
        kv("model.backbone_heads", list(&b.heads));
        kv("model.backbone_window", b.window.to_string());
        kv("model.backbone_patch", b.patch.to_string());
        kv("model.decoder", m.decoder.to_string());
        kv("model.schedule", m.schedule.to_string());
        kv("model.d_enc", m.d_enc.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.fusion_window", m.fusion_window.to_string());
        kv("model.decoder_mlp_ratio", m.decoder_mlp_ratio.to_string());
        kv("model.classes", m.classes.to_string());
        kv("model.aux_hidden", m.aux_hidden.to_string());
        let o = &self.optimizer;
        kv("optimizer.lr", o.lr.to_string());
        kv("optimizer.weight_decay", o.weight_decay.to_string());
        kv("optimizer.beta1", o.beta1.to_string());
        kv("optimizer.beta2", o.beta2.to_string());
        kv("optimizer.eps", o.eps.to_string());
        let t = &self.train;
        kv("train.steps", t.steps.to_string());
        kv("train.warmup", t.warmup.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.eval_every", t.eval_every.to_string());
        if let Some(v) = t.stop_miou {
            kv("train.stop_miou", v.to_string());
        }
        kv("train.seed", t.seed.to_string());
        if let Some(p) = &t.log {
            kv("train.log", p.display().to_string());
        }
        if let Some(p) = &t.checkpoint {
            kv("train.checkpoint", p.display().to_string());
        }
        let d = &self.data;
        match &d.source {
            DataSource::Synthetic => kv("data.source", "synthetic".into()),
            DataSource::Directory(p) => {
                kv("data.source", "directory".into());
                kv("data.path", p.display().to_string());
            }
        }
        kv("data.image_size", d.image_size.to_string());
        kv("data.train_count", d.train_count.to_string());
        kv("data.eval_count", d.eval_count.to_string());
        kv("data.crop", format!("{}x{}", d.crop.0, d.crop.1));
        kv("data.flip_p", d.flip_p.to_string());
        kv("data.seed", d.seed.to_string());
        let e = &self.eval;
        kv("eval.scales", e.scales.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        kv("eval.flip", e.flip.to_string());
        if let Some(p) = &e.confusion_csv {
            kv("eval.confusion_csv", p.display().to_string());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let cfg = RunConfig::parse(
            "# toy run\nmodel.decoder = mswin-s\nmodel.schedule = 3:0,3:1\noptimizer.lr = 1e-3 # faster\ndata.crop = 64x96\neval.scales = 1.0\neval.flip = false\n",
        )
        .unwrap();
        assert_eq!(cfg.model.decoder, DecoderKind::MswinS);
        assert_eq!(cfg.model.schedule.pairs(), &[(3, 0), (3, 1)]);
        assert_eq!(cfg.optimizer.lr, 1e-3);
        assert_eq!(cfg.data.crop, (64, 96));
        assert!(!cfg.eval.flip);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "model.nope = 1",
            "model.d_enc = 32\nmodel.d_enc = 32",
            "data.crop = 60",
            "eval.scales = 1.0,-0.5",
            "model.schedule = 5:1",
            "model.decoder = unet",
            "just text",
            "data.source = directory",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.stop_miou = Some(0.8);
        cfg.data.source = DataSource::Directory(PathBuf::from("/tmp/data"));
        cfg.eval.scales = vec![0.5, 1.0];
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        cfg.model.backbone.window = 8;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back.model.backbone.name, "custom");
        assert_eq!(back.model.backbone.window, 8);
    }
}
