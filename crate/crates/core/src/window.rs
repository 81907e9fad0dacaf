//! Window geometry for windowed self-attention.
//!
//! Feature maps are zero-padded on the bottom/right to a multiple of the
//! window side `m`, cyclically rolled by `n` tokens when shifted, and cut
//! into non-overlapping `m x m` windows in row-major window order (tokens
//! row-major inside each window). All rearrangements are expressed as
//! token gathers so they are differentiable on the tape.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{OpKind, Var};
use crate::error::{Error, Result};
use crate::tensor::{spatial_dims, spatial_shape, Scalar, Tensor};

/// Gather sentinel that produces a zero token.
pub const NO_SOURCE: u32 = u32::MAX;

/// Additive value that forbids an attention pair.
pub const MASK_FORBIDDEN: f32 = -1e9;

/// Partition of an `h x w` map into `m x m` windows, shifted by `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowGrid {
    pub m: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub h_pad: usize,
    pub w_pad: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, m: usize, n: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("window size must be positive".into()));
        }
        if n >= m {
            return Err(Error::Config(format!("shift {n} must be smaller than window {m}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("empty feature map {h}x{w}")));
        }
        let h_pad = h.div_ceil(m) * m;
        let w_pad = w.div_ceil(m) * m;
        Ok(WindowGrid { m, n, h, w, h_pad, w_pad, pad_bottom: h_pad - h, pad_right: w_pad - w })
    }

    pub fn windows_y(&self) -> usize {
        self.h_pad / self.m
    }

    pub fn windows_x(&self) -> usize {
        self.w_pad / self.m
    }

    pub fn num_windows(&self) -> usize {
        self.windows_y() * self.windows_x()
    }

    pub fn tokens(&self) -> usize {
        self.m * self.m
    }

    pub fn is_padded(&self) -> bool {
        self.pad_bottom > 0 || self.pad_right > 0
    }

    /// Padded-grid coordinate that lands at rolled coordinate `(py, px)`.
    fn unrolled(&self, py: usize, px: usize) -> (usize, usize) {
        ((py + self.n) % self.h_pad, (px + self.n) % self.w_pad)
    }

    /// For each window token, the flat source pixel (`y*w + x`) or
    /// [`NO_SOURCE`] for padding. Includes the cyclic shift.
    pub fn token_sources(&self) -> Vec<u32> {
        let m = self.m;
        let mut idx = Vec::with_capacity(self.num_windows() * self.tokens());
        for wy in 0..self.windows_y() {
            for wx in 0..self.windows_x() {
                for ty in 0..m {
                    for tx in 0..m {
                        let (oy, ox) = self.unrolled(wy * m + ty, wx * m + tx);
                        if oy < self.h && ox < self.w {
                            idx.push((oy * self.w + ox) as u32);
                        } else {
                            idx.push(NO_SOURCE);
                        }
                    }
                }
            }
        }
        idx
    }

    /// For each map pixel, the flat window-token row (`window * m^2 + token`)
    /// holding it. Inverse of [`WindowGrid::token_sources`] on real pixels.
    pub fn pixel_rows(&self) -> Vec<u32> {
        let m = self.m;
        let mut idx = Vec::with_capacity(self.h * self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let ry = (y + self.h_pad - self.n % self.h_pad) % self.h_pad;
                let rx = (x + self.w_pad - self.n % self.w_pad) % self.w_pad;
                let window = (ry / m) * self.windows_x() + rx / m;
                let token = (ry % m) * m + rx % m;
                idx.push((window * m * m + token) as u32);
            }
        }
        idx
    }

    /// Region label of every rolled padded-grid token: the band of the
    /// unshifted-coordinates partition it belongs to, or a dedicated label
    /// for padding.
    fn region_labels(&self) -> Vec<usize> {
        let band = |o: usize| if o < self.n { 0 } else { 1 + (o - self.n) / self.m };
        let bands_x = 2 + self.w_pad / self.m;
        let pad_label = usize::MAX;
        let mut labels = Vec::with_capacity(self.h_pad * self.w_pad);
        for py in 0..self.h_pad {
            for px in 0..self.w_pad {
                let (oy, ox) = self.unrolled(py, px);
                if oy >= self.h || ox >= self.w {
                    labels.push(pad_label);
                } else {
                    labels.push(band(oy) * bands_x + band(ox));
                }
            }
        }
        labels
    }

    /// Additive mask needed by this grid, if any: shifted grids restrict
    /// attention to same-region pairs, padded grids isolate padding.
    pub fn mask(&self) -> Option<ShiftMask> {
        if self.n == 0 && !self.is_padded() {
            None
        } else {
            Some(build_mask(self))
        }
    }
}

/// Per-window additive attention mask, deduplicated into patterns.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftMask {
    tokens: usize,
    patterns: Vec<Vec<f32>>,
    window_pattern: Vec<usize>,
}

impl ShiftMask {
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn num_patterns(&self) -> usize {
        self.patterns.len()
    }

    pub fn num_windows(&self) -> usize {
        self.window_pattern.len()
    }

    pub fn pattern(&self, p: usize) -> &[f32] {
        &self.patterns[p]
    }

    /// Mask of window `w` in a batch of stacked images.
    pub fn for_window(&self, w: usize) -> &[f32] {
        &self.patterns[self.window_pattern[w % self.window_pattern.len()]]
    }

    /// Dense `(num_windows, m^2, m^2)` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let t = self.tokens;
        let data = self
            .window_pattern
            .iter()
            .flat_map(|&p| self.patterns[p].iter().map(|&v| T::lit(v as f64)))
            .collect();
        Tensor::new(vec![self.window_pattern.len(), t, t], data).expect("mask extents")
    }
}

fn build_mask(grid: &WindowGrid) -> ShiftMask {
    let labels = grid.region_labels();
    let m = grid.m;
    let t = grid.tokens();
    let mut patterns: Vec<Vec<f32>> = Vec::new();
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut window_pattern = Vec::with_capacity(grid.num_windows());
    for wy in 0..grid.windows_y() {
        for wx in 0..grid.windows_x() {
            let raw: Vec<usize> = (0..t).map(|k| labels[(wy * m + k / m) * grid.w_pad + wx * m + k % m]).collect();
            // canonical relabeling so equal partitions share a pattern
            let mut remap: HashMap<usize, usize> = HashMap::new();
            let key: Vec<usize> = raw
                .iter()
                .map(|l| {
                    let next = remap.len();
                    *remap.entry(*l).or_insert(next)
                })
                .collect();
            let id = *seen.entry(key.clone()).or_insert_with(|| {
                let mut pat = vec![0.0f32; t * t];
                for i in 0..t {
                    for j in 0..t {
                        if key[i] != key[j] {
                            pat[i * t + j] = MASK_FORBIDDEN;
                        }
                    }
                }
                patterns.push(pat);
                patterns.len() - 1
            });
            window_pattern.push(id);
        }
    }
    ShiftMask { tokens: t, patterns, window_pattern }
}

/// Mask for a shifted grid. Unshifted grids need no region mask.
pub fn shift_attention_mask(grid: &WindowGrid) -> Result<ShiftMask> {
    if grid.n == 0 {
        return Err(Error::Config("shift mask requested for an unshifted grid".into()));
    }
    Ok(build_mask(grid))
}

/// `(m^2 x m^2)` table of indices into a `(2m-1)^2`-row bias table.
pub fn relative_position_index(m: usize) -> Vec<u32> {
    let t = m * m;
    let side = 2 * m - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / m, i % m);
        for j in 0..t {
            let (yj, xj) = (j / m, j % m);
            let dy = yi + m - 1 - yj;
            let dx = xi + m - 1 - xj;
            idx.push((dy * side + dx) as u32);
        }
    }
    idx
}

fn batched(per_image: &[u32], batch: usize, src_stride: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(per_image.len() * batch);
    for b in 0..batch {
        let off = (b * src_stride) as u32;
        out.extend(per_image.iter().map(|&i| if i == NO_SOURCE { NO_SOURCE } else { i + off }));
    }
    out
}

/// `[B?, H, W, C]` map into `[B * windows, m^2, C]` windows, applying the
/// grid's padding and cyclic shift.
pub fn window_partition<'g, T: Scalar>(x: Var<'g, T>, grid: &WindowGrid) -> Result<Var<'g, T>> {
    let (b, h, w, c) = spatial_dims(&x.shape())?;
    if (h, w) != (grid.h, grid.w) {
        return Err(Error::Dimension(format!("grid built for {}x{}, map is {h}x{w}", grid.h, grid.w)));
    }
    let idx = batched(&grid.token_sources(), b, h * w);
    x.gather("window_partition", OpKind::Reshape, c, Arc::new(idx), vec![b * grid.num_windows(), grid.tokens(), c])
}

/// Inverse of [`window_partition`]: undoes the shift, crops the padding and
/// returns a `[B, H, W, C]` map.
pub fn window_reverse<'g, T: Scalar>(windows: Var<'g, T>, grid: &WindowGrid) -> Result<Var<'g, T>> {
    let shape = windows.shape();
    let [rows, t, c] = shape[..] else {
        return Err(Error::Dimension(format!("expected [windows, tokens, C], got {shape:?}")));
    };
    if t != grid.tokens() || rows % grid.num_windows() != 0 {
        return Err(Error::Dimension(format!(
            "window tensor {shape:?} inconsistent with {} windows of {} tokens",
            grid.num_windows(),
            grid.tokens()
        )));
    }
    let b = rows / grid.num_windows();
    let idx = batched(&grid.pixel_rows(), b, grid.num_windows() * t);
    windows.gather("window_reverse", OpKind::Reshape, c, Arc::new(idx), vec![b, grid.h, grid.w, c])
}

/// Torus roll: `out[y][x] = in[(y + dy) mod H][(x + dx) mod W]`. Negative
/// offsets undo positive ones.
pub fn cyclic_shift<'g, T: Scalar>(x: Var<'g, T>, dy: isize, dx: isize) -> Result<Var<'g, T>> {
    let shape = x.shape();
    let (b, h, w, c) = spatial_dims(&shape)?;
    let mut idx = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
                let sx = (xx as isize + dx).rem_euclid(w as isize) as usize;
                idx.push(((bi * h + sy) * w + sx) as u32);
            }
        }
    }
    x.gather("cyclic_shift", OpKind::Reshape, c, Arc::new(idx), shape)
}

/// Zero-pads a map on the bottom/right.
pub fn pad_map<'g, T: Scalar>(x: Var<'g, T>, bottom: usize, right: usize) -> Result<Var<'g, T>> {
    let shape = x.shape();
    let (b, h, w, c) = spatial_dims(&shape)?;
    if bottom == 0 && right == 0 {
        return Ok(x);
    }
    let (hp, wp) = (h + bottom, w + right);
    let mut idx = Vec::with_capacity(b * hp * wp);
    for bi in 0..b {
        for y in 0..hp {
            for xx in 0..wp {
                idx.push(if y < h && xx < w { ((bi * h + y) * w + xx) as u32 } else { NO_SOURCE });
            }
        }
    }
    x.gather("pad", OpKind::Reshape, c, Arc::new(idx), spatial_shape(&shape, b, hp, wp, c))
}

/// Top-left crop of a map.
pub fn crop_map<'g, T: Scalar>(x: Var<'g, T>, h_out: usize, w_out: usize) -> Result<Var<'g, T>> {
    let shape = x.shape();
    let (b, h, w, c) = spatial_dims(&shape)?;
    if h_out > h || w_out > w {
        return Err(Error::Dimension(format!("crop {h_out}x{w_out} larger than map {h}x{w}")));
    }
    if (h_out, w_out) == (h, w) {
        return Ok(x);
    }
    let mut idx = Vec::with_capacity(b * h_out * w_out);
    for bi in 0..b {
        for y in 0..h_out {
            for xx in 0..w_out {
                idx.push(((bi * h + y) * w + xx) as u32);
            }
        }
    }
    x.gather("crop", OpKind::Reshape, c, Arc::new(idx), spatial_shape(&shape, b, h_out, w_out, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Mode};

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| i as f64 + 1.0).collect()).unwrap()
    }

    #[test]
    fn grid_rejects_bad_config() {
        assert!(WindowGrid::new(6, 6, 0, 0).is_err());
        assert!(WindowGrid::new(6, 6, 3, 3).is_err());
        let g = WindowGrid::new(5, 7, 3, 1).unwrap();
        assert_eq!((g.h_pad, g.w_pad, g.pad_bottom, g.pad_right), (6, 9, 1, 2));
        assert_eq!(g.h_pad % g.m, 0);
    }

    #[test]
    fn partition_counts_on_6x6_map() {
        let g = Graph::new(Mode::Eval);
        let x = g.input(ramp(&[6, 6, 2]));
        let w3 = window_partition(x, &WindowGrid::new(6, 6, 3, 0).unwrap()).unwrap();
        assert_eq!(w3.shape(), vec![4, 9, 2]);
        let w2 = window_partition(x, &WindowGrid::new(6, 6, 2, 0).unwrap()).unwrap();
        assert_eq!(w2.shape(), vec![9, 4, 2]);
    }

    #[test]
    fn padded_partition_matches_coordinate_enumeration() {
        let grid = WindowGrid::new(5, 5, 3, 0).unwrap();
        let g = Graph::new(Mode::Eval);
        let x = g.input(ramp(&[5, 5, 1]));
        let w = window_partition(x, &grid).unwrap().value();
        assert_eq!(w.shape(), &[4, 9, 1]);
        // independent enumeration of the 6x6 padded grid
        let mut padded_tokens = 0;
        for win in 0..4 {
            for t in 0..9 {
                let y = (win / 2) * 3 + t / 3;
                let x = (win % 2) * 3 + t % 3;
                let v = w.at(&[win, t, 0]);
                if y < 5 && x < 5 {
                    assert_eq!(v, (y * 5 + x) as f64 + 1.0);
                } else {
                    assert_eq!(v, 0.0);
                    padded_tokens += 1;
                }
            }
        }
        assert_eq!(padded_tokens, 36 - 25);
        let mask = grid.mask().expect("padding needs a mask");
        // padded tokens never share a region with real ones
        let last = mask.for_window(3);
        assert_eq!(last[0 * 9 + 2], MASK_FORBIDDEN);
        assert_eq!(last[0 * 9 + 1], 0.0);
    }

    #[test]
    fn reverse_inverts_partition_with_padding_and_single_window() {
        for (h, w, m, n) in [(6, 6, 3, 0), (7, 7, 4, 0), (7, 7, 4, 2), (4, 4, 4, 0), (5, 3, 2, 1)] {
            let grid = WindowGrid::new(h, w, m, n).unwrap();
            let g = Graph::new(Mode::Eval);
            let x = g.input(ramp(&[h, w, 4]));
            let back = window_reverse(window_partition(x, &grid).unwrap(), &grid).unwrap();
            assert_eq!(back.value().data(), x.value().data(), "grid {grid:?}");
        }
    }

    #[test]
    fn cyclic_shift_coordinate_example() {
        let g = Graph::new(Mode::Eval);
        // [[a,b],[c,d]] with a=1,b=2,c=3,d=4
        let x = g.input(ramp(&[2, 2, 1]));
        let s = cyclic_shift(x, 1, 1).unwrap();
        assert_eq!(s.value().data(), &[4.0, 3.0, 2.0, 1.0]);
        let id = cyclic_shift(x, 0, 0).unwrap();
        assert_eq!(id.value().data(), x.value().data());
        let y = g.input(ramp(&[6, 6, 3]));
        let back = cyclic_shift(cyclic_shift(y, 2, 1).unwrap(), -2, -1).unwrap();
        assert_eq!(back.value().data(), y.value().data());
    }

    #[test]
    fn interior_windows_have_zero_masks() {
        let grid = WindowGrid::new(9, 9, 3, 1).unwrap();
        let mask = shift_attention_mask(&grid).unwrap();
        // rolled window (0,0) sits strictly inside band structure
        assert!(mask.for_window(0).iter().all(|&v| v == 0.0));
        assert!(mask.for_window(8).iter().any(|&v| v != 0.0));
        assert!(shift_attention_mask(&WindowGrid::new(9, 9, 3, 0).unwrap()).is_err());
        assert!(WindowGrid::new(9, 9, 3, 0).unwrap().mask().is_none());
    }

    #[test]
    fn corner_window_has_four_regions() {
        let grid = WindowGrid::new(6, 6, 3, 1).unwrap();
        let mask = shift_attention_mask(&grid).unwrap();
        let corner = mask.for_window(3);
        // brute force: original coordinates of the rolled corner window tokens
        let band = |o: usize| if o < 1 { 0 } else { 1 + (o - 1) / 3 };
        let coords: Vec<(usize, usize)> = (0..9).map(|t| ((3 + t / 3 + 1) % 6, (3 + t % 3 + 1) % 6)).collect();
        let mut permitted = 0;
        let mut regions = std::collections::HashSet::new();
        for &(yi, xi) in &coords {
            regions.insert((band(yi), band(xi)));
            for &(yj, xj) in &coords {
                if band(yi) == band(yj) && band(xi) == band(xj) {
                    permitted += 1;
                }
            }
        }
        assert_eq!(regions.len(), 4);
        assert_eq!(corner.iter().filter(|&&v| v == 0.0).count(), permitted);
        // region sizes 2x2, 2x1, 1x2, 1x1 -> 16 + 4 + 4 + 1
        assert_eq!(permitted, 25);
    }

    #[test]
    fn relative_index_small_cases() {
        assert_eq!(relative_position_index(1), vec![0]);
        let m = 3;
        let idx = relative_position_index(m);
        let zero = ((m - 1) * (2 * m - 1) + (m - 1)) as u32;
        for i in 0..9 {
            assert_eq!(idx[i * 9 + i], zero);
        }
        // m = 2 against a direct double loop over coordinates
        let idx2 = relative_position_index(2);
        let coords = [(0i32, 0i32), (0, 1), (1, 0), (1, 1)];
        for (i, a) in coords.iter().enumerate() {
            for (j, b) in coords.iter().enumerate() {
                let expect = (a.0 - b.0 + 1) * 3 + (a.1 - b.1 + 1);
                assert_eq!(idx2[i * 4 + j] as i32, expect);
            }
        }
    }
}
