//! Single-scale, multi-scale and sliding-window prediction.

use crate::autodiff::{bilinear_resize, softmax_last, Graph, Mode};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::SegModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Test-time protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub scales: Vec<f64>,
    pub flip: bool,
    /// Images larger than this are processed in overlapping tiles.
    pub tile: Option<(usize, usize)>,
}

impl Protocol {
    pub fn single_scale() -> Self {
        Protocol { scales: vec![1.0], flip: false, tile: None }
    }
}

fn pad_image(img: &Tensor<f32>, ph: usize, pw: usize) -> Tensor<f32> {
    let [h, w, c] = img.shape()[..] else { unreachable!("checked by caller") };
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    let mut out = vec![0.0; ph * pw * c];
    for y in 0..h {
        out[y * pw * c..(y * pw + w) * c].copy_from_slice(&img.data()[y * w * c..(y + 1) * w * c]);
    }
    Tensor::new(vec![ph, pw, c], out).expect("padded extents")
}

fn crop_map(x: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f32> {
    let [_, sw, c] = x.shape()[..] else { unreachable!("rank 3") };
    let mut out = Vec::with_capacity(h * w * c);
    for y in y0..y0 + h {
        out.extend_from_slice(&x.data()[(y * sw + x0) * c..(y * sw + x0 + w) * c]);
    }
    Tensor::new(vec![h, w, c], out).expect("crop extents")
}

fn flip_map(x: &Tensor<f32>) -> Tensor<f32> {
    let [h, w, c] = x.shape()[..] else { unreachable!("rank 3") };
    let mut out = vec![0.0; x.numel()];
    for y in 0..h {
        for xx in 0..w {
            let (s, d) = ((y * w + xx) * c, (y * w + w - 1 - xx) * c);
            out[d..d + c].copy_from_slice(&x.data()[s..s + c]);
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same extents")
}

fn check_image(img: &Tensor<f32>) -> Result<(usize, usize)> {
    match img.shape()[..] {
        [h, w, 3] if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::Dimension(format!("expected an [H, W, 3] image, got {:?}", img.shape()))),
    }
}

/// Class logits `[H, W, K]` of one image: zero-pad to the backbone stride,
/// run the network, crop back.
pub fn forward_logits(model: &SegModel, params: &ParamStore<f32>, img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = check_image(img)?;
    let s = model.config.backbone.max_stride();
    let (ph, pw) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
    let g = Graph::with_params(params, Mode::Eval);
    let out = model.forward(&g, g.input(pad_image(img, ph, pw)), false)?;
    g.check_finite()?;
    Ok(crop_map(&out.logits.value(), 0, 0, h, w))
}

fn tile_starts(extent: usize, tile: usize) -> Vec<usize> {
    if extent <= tile {
        return vec![0];
    }
    let stride = (tile / 2).max(1);
    let mut v: Vec<usize> = (0..).map(|i| i * stride).take_while(|&p| p + tile < extent).collect();
    v.push(extent - tile);
    v
}

/// Softmax probabilities `[H, W, K]`, tiled with stride `tile / 2` and
/// overlap averaging when the image exceeds `tile`.
pub fn predict_probs(model: &SegModel, params: &ParamStore<f32>, img: &Tensor<f32>, tile: Option<(usize, usize)>) -> Result<Tensor<f32>> {
    let (h, w) = check_image(img)?;
    let Some((th, tw)) = tile.filter(|&(th, tw)| h > th || w > tw) else {
        return Ok(softmax_last(&forward_logits(model, params, img)?));
    };
    let k = model.config.classes;
    let mut acc = vec![0.0f32; h * w * k];
    let mut count = vec![0u32; h * w];
    for &y0 in &tile_starts(h, th) {
        for &x0 in &tile_starts(w, tw) {
            let (eh, ew) = (th.min(h), tw.min(w));
            let probs = softmax_last(&forward_logits(model, params, &crop_map(img, y0, x0, eh, ew))?);
            for y in 0..eh {
                for x in 0..ew {
                    let d = (y0 + y) * w + x0 + x;
                    count[d] += 1;
                    let src = &probs.data()[(y * ew + x) * k..(y * ew + x + 1) * k];
                    acc[d * k..(d + 1) * k].iter_mut().zip(src).for_each(|(a, &p)| *a += p);
                }
            }
        }
    }
    for (d, &n) in count.iter().enumerate() {
        acc[d * k..(d + 1) * k].iter_mut().for_each(|a| *a /= n as f32);
    }
    Tensor::new(vec![h, w, k], acc)
}

/// Per-pixel argmax over the trailing axis, lowest index on ties.
pub fn argmax_labels(scores: &Tensor<f32>) -> Vec<u8> {
    let k = scores.last_dim();
    scores
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// Single-scale prediction.
pub fn infer_ss(model: &SegModel, params: &ParamStore<f32>, img: &Tensor<f32>, tile: Option<(usize, usize)>) -> Result<Vec<u8>> {
    Ok(argmax_labels(&predict_probs(model, params, img, tile)?))
}

/// Average of probabilities over scales (and horizontal flips), each
/// resized back to the input resolution.
pub fn infer_ms(model: &SegModel, params: &ParamStore<f32>, img: &Tensor<f32>, protocol: &Protocol) -> Result<Vec<u8>> {
    let (h, w) = check_image(img)?;
    if protocol.scales.is_empty() || protocol.scales.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("scales must be non-empty and positive".into()));
    }
    let mut acc: Option<Tensor<f32>> = None;
    let mut passes = 0u32;
    for &scale in &protocol.scales {
        let (sh, sw) = (((h as f64 * scale).round() as usize).max(1), ((w as f64 * scale).round() as usize).max(1));
        let scaled = bilinear_resize(img, sh, sw)?;
        let flips: &[bool] = if protocol.flip { &[false, true] } else { &[false] };
        for &flip in flips {
            let input = if flip { flip_map(&scaled) } else { scaled.clone() };
            let mut probs = predict_probs(model, params, &input, protocol.tile)?;
            if flip {
                probs = flip_map(&probs);
            }
            let probs = bilinear_resize(&probs, h, w)?;
            match &mut acc {
                Some(a) => a.add_assign(&probs),
                None => acc = Some(probs),
            }
            passes += 1;
        }
    }
    let mut acc = acc.expect("at least one pass");
    let inv = passes as f32;
    acc.data_mut().iter_mut().for_each(|v| *v /= inv);
    Ok(argmax_labels(&acc))
}

/// Confusion matrix of a protocol over labeled samples.
pub fn evaluate(model: &SegModel, params: &ParamStore<f32>, samples: &[Sample], protocol: &Protocol) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.classes);
    for s in samples {
        let pred = if protocol.scales == [1.0] && !protocol.flip {
            infer_ss(model, params, &s.image, protocol.tile)?
        } else {
            infer_ms(model, params, &s.image, protocol)?
        };
        cm.update(&pred, &s.mask)?;
    }
    Ok(cm)
}
