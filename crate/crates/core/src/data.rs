//! Samples, the procedural scene generator, PNG ingestion and augmentation.
//!
//! Synthetic scenes split the image into a grid of cells, one per shape
//! class. With probability `presence` a class draws its shape inside its own
//! cell: class `c` uses family `(c - 1) mod 3` (rectangle, disc, triangle).
//! The bounding box side is a uniform fraction of the cell side, so expected
//! class areas have a closed form ([`expected_class_fractions`]). Everything
//! not covered by a shape is background class 0.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An RGB image in `[0, 1]` with a congruent label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]`.
    pub image: Tensor<f32>,
    /// Row-major labels, [`IGNORE_LABEL`] for unlabeled pixels.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Vec<u8>) -> Result<Self> {
        let [h, w, 3] = image.shape()[..] else {
            return Err(Error::Data(format!("image must be [H, W, 3], got {:?}", image.shape())));
        };
        if mask.len() != h * w {
            return Err(Error::Data(format!("mask has {} pixels for a {h}x{w} image", mask.len())));
        }
        Ok(Sample { image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn flip_horizontal(&self) -> Sample {
        let (h, w) = (self.height(), self.width());
        let mut img = vec![0.0; h * w * 3];
        let mut mask = vec![0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (s, d) = (y * w + x, y * w + (w - 1 - x));
                img[d * 3..d * 3 + 3].copy_from_slice(&self.image.data()[s * 3..s * 3 + 3]);
                mask[d] = self.mask[s];
            }
        }
        Sample { image: Tensor::new(vec![h, w, 3], img).expect("same extents"), mask }
    }

    /// Window `[y0, y0 + ch) x [x0, x0 + cw)`; pixels outside the image are
    /// zero with an ignored label.
    pub fn crop(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> Sample {
        let (h, w) = (self.height(), self.width());
        let mut img = vec![0.0; ch * cw * 3];
        let mut mask = vec![IGNORE_LABEL; ch * cw];
        for y in 0..ch {
            for x in 0..cw {
                let (sy, sx) = (y0 + y, x0 + x);
                if sy < h && sx < w {
                    let (s, d) = (sy * w + sx, y * cw + x);
                    img[d * 3..d * 3 + 3].copy_from_slice(&self.image.data()[s * 3..s * 3 + 3]);
                    mask[d] = self.mask[s];
                }
            }
        }
        Sample { image: Tensor::new(vec![ch, cw, 3], img).expect("crop extents"), mask }
    }
}

/// Random crop of `crop` (padding with ignore when the image is smaller),
/// then a horizontal flip with probability `flip_p`.
pub fn augment(sample: &Sample, crop: (usize, usize), flip_p: f64, rng: &mut impl Rng) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let y0 = if h > crop.0 { rng.gen_range(0..=h - crop.0) } else { 0 };
    let x0 = if w > crop.1 { rng.gen_range(0..=w - crop.1) } else { 0 };
    let out = sample.crop(y0, x0, crop.0, crop.1);
    if flip_p > 0.0 && rng.gen::<f64>() < flip_p {
        out.flip_horizontal()
    } else {
        out
    }
}

/// Stacks equally sized samples into `[B, H, W, 3]` and concatenated labels.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut img = Vec::with_capacity(samples.len() * h * w * 3);
    let mut mask = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Data(format!("batch mixes {h}x{w} and {}x{}", s.height(), s.width())));
        }
        img.extend_from_slice(s.image.data());
        mask.extend_from_slice(&s.mask);
    }
    Ok((Tensor::new(vec![samples.len(), h, w, 3], img)?, mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Rectangle,
    Disc,
    Triangle,
}

impl ShapeFamily {
    pub fn of_class(class: usize) -> Self {
        match (class - 1) % 3 {
            0 => ShapeFamily::Rectangle,
            1 => ShapeFamily::Disc,
            _ => ShapeFamily::Triangle,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    /// Including background.
    pub classes: usize,
    /// Probability that a class appears in a scene.
    pub presence: f64,
    /// Bounding-box side as a fraction of the cell side, uniform in this range.
    pub size_range: (f64, f64),
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
}

impl SyntheticConfig {
    pub fn new(height: usize, width: usize, classes: usize) -> Self {
        SyntheticConfig { height, width, classes, presence: 1.0, size_range: (0.55, 0.95), noise: 0.06 }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::Config(format!("synthetic data needs 2..=255 classes, got {}", self.classes)));
        }
        let (cr, cc) = self.cells();
        if self.height < 4 * cr || self.width < 4 * cc {
            return Err(Error::Config(format!("{}x{} is too small for {} shape cells", self.height, self.width, cr * cc)));
        }
        let (lo, hi) = self.size_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) || !(0.0..=1.0).contains(&self.presence) || self.noise < 0.0 {
            return Err(Error::Config("synthetic size range, presence or noise out of bounds".into()));
        }
        Ok(())
    }

    /// Cell grid `(rows, cols)` holding the shape classes.
    pub fn cells(&self) -> (usize, usize) {
        let n = self.classes - 1;
        let cols = (n as f64).sqrt().ceil() as usize;
        (n.div_ceil(cols), cols)
    }

    fn cell_extent(&self) -> (f64, f64) {
        let (r, c) = self.cells();
        (self.height as f64 / r as f64, self.width as f64 / c as f64)
    }
}

/// Expected fraction of pixels of each class under the generator's
/// distribution (continuous-area approximation).
pub fn expected_class_fractions(cfg: &SyntheticConfig) -> Vec<f64> {
    let (ch, cw) = cfg.cell_extent();
    let (lo, hi) = cfg.size_range;
    let mean = (lo + hi) / 2.0;
    let mean_sq = if hi > lo { (hi.powi(3) - lo.powi(3)) / (3.0 * (hi - lo)) } else { lo * lo };
    let total = (cfg.height * cfg.width) as f64;
    let mut out = vec![0.0; cfg.classes];
    for (c, slot) in out.iter_mut().enumerate().skip(1) {
        let area = match ShapeFamily::of_class(c) {
            ShapeFamily::Rectangle => ch * cw * mean * mean,
            ShapeFamily::Triangle => ch * cw * mean * mean / 2.0,
            ShapeFamily::Disc => std::f64::consts::PI * (ch.min(cw) / 2.0).powi(2) * mean_sq,
        };
        *slot = cfg.presence * area / total;
    }
    out[0] = 1.0 - out[1..].iter().sum::<f64>();
    out
}

fn class_color(class: usize, classes: usize) -> [f32; 3] {
    if class == 0 {
        return [0.45, 0.45, 0.45];
    }
    // evenly spaced hues, saturation 0.8, value 0.9
    let hue = (class - 1) as f64 / (classes - 1) as f64 * 6.0;
    let (s, v) = (0.8, 0.9);
    let f = hue - hue.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let rgb = match hue.floor() as usize % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [rgb.0 as f32, rgb.1 as f32, rgb.2 as f32]
}

struct Shape {
    family: ShapeFamily,
    y0: f64,
    x0: f64,
    sy: f64,
    sx: f64,
}

impl Shape {
    fn contains(&self, py: f64, px: f64) -> bool {
        let (dy, dx) = (py - self.y0, px - self.x0);
        if dy < 0.0 || dx < 0.0 || dy > self.sy || dx > self.sx {
            return false;
        }
        match self.family {
            ShapeFamily::Rectangle => true,
            ShapeFamily::Disc => {
                let r = self.sy / 2.0;
                (dy - r).powi(2) + (dx - r).powi(2) <= r * r
            }
            ShapeFamily::Triangle => (dx - self.sx / 2.0).abs() <= dy / self.sy * self.sx / 2.0,
        }
    }
}

/// One scene drawn from `rng`.
pub fn gen_sample(cfg: &SyntheticConfig, rng: &mut impl Rng) -> Result<Sample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let (_, cols) = cfg.cells();
    let (ch, cw) = cfg.cell_extent();
    let (lo, hi) = cfg.size_range;
    let mut shapes = Vec::new();
    for c in 1..cfg.classes {
        if rng.gen::<f64>() >= cfg.presence {
            continue;
        }
        let family = ShapeFamily::of_class(c);
        let (cy, cx) = (((c - 1) / cols) as f64 * ch, ((c - 1) % cols) as f64 * cw);
        let (sy, sx) = match family {
            ShapeFamily::Disc => {
                let d = rng.gen_range(lo..=hi) * ch.min(cw);
                (d, d)
            }
            _ => (rng.gen_range(lo..=hi) * ch, rng.gen_range(lo..=hi) * cw),
        };
        let y0 = cy + rng.gen::<f64>() * (ch - sy);
        let x0 = cx + rng.gen::<f64>() * (cw - sx);
        shapes.push((c, Shape { family, y0, x0, sy, sx }));
    }
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid noise");
    let shade: f32 = rng.gen_range(-0.08..0.08);
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let mut img = Vec::with_capacity(h * w * 3);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let class = shapes.iter().find(|(_, s)| s.contains(py, px)).map_or(0, |(c, _)| *c);
            let base = class_color(class, cfg.classes);
            // class-specific stripe texture
            let freq = 0.35 + 0.15 * class as f32;
            let stripe = 0.06 * ((x as f32 + y as f32 * (class % 2) as f32) * freq + phase).sin();
            for b in base {
                let n: f64 = noise.sample(rng);
                img.push((b + shade + stripe + n as f32).clamp(0.0, 1.0));
            }
            mask.push(class as u8);
        }
    }
    Sample::new(Tensor::new(vec![h, w, 3], img)?, mask)
}

/// `count` scenes, fully determined by `seed`.
pub fn gen_synthetic(seed: u64, count: usize, cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| gen_sample(cfg, &mut rng)).collect()
}

fn decode(path: &Path, expand: bool) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(if expand { png::Transformations::EXPAND | png::Transformations::STRIP_16 } else { png::Transformations::IDENTITY });
    let mut reader = decoder.read_info().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Reads an 8-bit RGB(A) or grayscale PNG into `[H, W, 3]` in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let (info, buf) = decode(path, true)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Data(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    let mut data = Vec::with_capacity(h * w * 3);
    for px in buf.chunks_exact(channels) {
        if channels < 3 {
            data.extend([px[0] as f32 / 255.0; 3]);
        } else {
            data.extend(px[..3].iter().map(|&v| v as f32 / 255.0));
        }
    }
    Tensor::new(vec![h, w, 3], data)
}

/// Reads an 8-bit grayscale or palette PNG as raw label values.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (info, buf) = decode(path, false)?;
    if info.bit_depth != png::BitDepth::Eight || !matches!(info.color_type, png::ColorType::Grayscale | png::ColorType::Indexed) {
        return Err(Error::Data(format!("{}: masks must be 8-bit grayscale or palette PNGs", path.display())));
    }
    Ok((info.height as usize, info.width as usize, buf))
}

fn png_names(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Loads `images/<name>.png` with `masks/<name>.png`, sorted by name.
pub fn load_directory(path: &Path) -> Result<Vec<(String, Sample)>> {
    if !path.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", path.display())));
    }
    let images = png_names(&path.join("images"))?;
    let masks = png_names(&path.join("masks"))?;
    if let Some((_, p)) = images.iter().find(|(n, _)| !masks.contains_key(*n)) {
        return Err(Error::Unpaired(p.clone()));
    }
    if let Some((_, p)) = masks.iter().find(|(n, _)| !images.contains_key(*n)) {
        return Err(Error::Unpaired(p.clone()));
    }
    if images.is_empty() {
        log::warn!("no image/mask pairs under {}", path.display());
    }
    images
        .iter()
        .map(|(name, img_path)| {
            let image = read_image(img_path)?;
            let (mh, mw, mask) = read_mask(&masks[name])?;
            if (mh, mw) != (image.shape()[0], image.shape()[1]) {
                return Err(Error::Data(format!(
                    "{name}: image is {}x{}, mask {mh}x{mw}",
                    image.shape()[0],
                    image.shape()[1]
                )));
            }
            Ok((name.clone(), Sample::new(image, mask)?))
        })
        .collect()
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    enc.write_header().map_err(io)?.write_image_data(data).map_err(io)
}

/// Writes samples as `images/NNNNNN.png` (RGB) and `masks/NNNNNN.png`
/// (grayscale labels).
pub fn write_directory(path: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "masks"] {
        std::fs::create_dir_all(path.join(sub)).map_err(|e| Error::io(path.join(sub), e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:06}.png");
        let rgb: Vec<u8> = s.image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        write_png(&path.join("images").join(&name), s.width(), s.height(), png::ColorType::Rgb, &rgb)?;
        write_png(&path.join("masks").join(&name), s.width(), s.height(), png::ColorType::Grayscale, &s.mask)?;
    }
    Ok(())
}
