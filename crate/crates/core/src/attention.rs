//! Multi-head windowed self-attention with a learned relative position bias.
//!
//! Per head, scores are `Q K^T / sqrt(head_dim) + B (+ mask)`, softmax runs
//! over keys, and the weighted values of all heads are concatenated and
//! passed through the output projection. Three flavors share one parameter
//! type:
//!
//! * W-MSA: shift `n = 0`;
//! * SW-MSA: `0 < n < m`, realized by cyclic shift plus a region mask;
//! * cross: the windowed input is used directly as the query (no learned
//!   query projection), keys and values are still projected.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{spatial_dims, Scalar};
use crate::window::{relative_position_index, window_partition, window_reverse, WindowGrid};

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub embed: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
    /// `None` for the cross variant.
    pub q: Option<Linear>,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    /// `[(2m-1)^2, heads]`.
    pub bias_table: ParamId,
    bias_index: Arc<Vec<u32>>,
}

impl AttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        embed: usize,
        heads: usize,
        window: usize,
        shift: usize,
        cross: bool,
    ) -> Result<Self> {
        if heads == 0 || embed % heads != 0 {
            return Err(Error::Config(format!("embed {embed} is not divisible by {heads} heads")));
        }
        if window == 0 || shift >= window {
            return Err(Error::Config(format!("invalid window {window} / shift {shift}")));
        }
        let q = (!cross).then(|| Linear::new(ps, rng, &format!("{name}.q"), embed, embed, true));
        let k = Linear::new(ps, rng, &format!("{name}.k"), embed, embed, true);
        let v = Linear::new(ps, rng, &format!("{name}.v"), embed, embed, true);
        let proj = Linear::new(ps, rng, &format!("{name}.proj"), embed, embed, true);
        let side = 2 * window - 1;
        let bias_table = ps.add_zeros(format!("{name}.rel_bias"), vec![side * side, heads]);
        Ok(AttentionParams { embed, heads, window, shift, q, k, v, proj, bias_table, bias_index: dense_bias_index(window, heads) })
    }

    pub fn is_cross(&self) -> bool {
        self.q.is_none()
    }

    pub fn head_dim(&self) -> usize {
        self.embed / self.heads
    }

    /// Window grid for an `h x w` map. A map that fits inside a single window
    /// is never shifted.
    pub fn grid(&self, h: usize, w: usize) -> Result<WindowGrid> {
        let shift = if h <= self.window && w <= self.window { 0 } else { self.shift };
        WindowGrid::new(h, w, self.window, shift)
    }

    /// Dense `[heads, m^2, m^2]` bias gathered from the table.
    pub fn dense_bias<'g, T: Scalar>(&self, g: &'g Graph<T>) -> Result<Var<'g, T>> {
        let t = self.window * self.window;
        g.param(self.bias_table).gather("relative_bias", OpKind::Reshape, 1, self.bias_index.clone(), vec![self.heads, t, t])
    }

    /// Attention over already-partitioned windows `[windows, m^2, embed]`,
    /// including the input and output projections.
    pub fn attend<'g, T: Scalar>(&self, g: &'g Graph<T>, windows: Var<'g, T>, grid: &WindowGrid) -> Result<Var<'g, T>> {
        let q = match &self.q {
            Some(lin) => lin.forward(g, windows)?,
            None => windows,
        };
        let k = self.k.forward(g, windows)?;
        let v = self.v.forward(g, windows)?;
        let bias = self.dense_bias(g)?;
        let mask = grid.mask().map(Arc::new);
        let heads = Var::window_attention(q, k, v, Some(bias), mask, self.heads)?;
        self.proj.forward(g, heads)
    }

    /// Partition, attend and reverse on a `[B?, H, W, embed]` map. Output has
    /// the input's shape.
    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        let (_, h, w, c) = spatial_dims(&shape)?;
        if c != self.embed {
            return Err(Error::Dimension(format!("attention embed {} vs input channels {c}", self.embed)));
        }
        let grid = self.grid(h, w)?;
        let windows = window_partition(x, &grid)?;
        let out = self.attend(g, windows, &grid)?;
        let map = window_reverse(out, &grid)?;
        if shape.len() == 3 {
            map.reshape(shape)
        } else {
            Ok(map)
        }
    }
}

fn dense_bias_index(m: usize, heads: usize) -> Arc<Vec<u32>> {
    let rel = relative_position_index(m);
    let mut idx = Vec::with_capacity(heads * rel.len());
    for h in 0..heads {
        idx.extend(rel.iter().map(|&r| r * heads as u32 + h as u32));
    }
    Arc::new(idx)
}

/// Window attention without shift.
pub fn w_msa<'g, T: Scalar>(g: &'g Graph<T>, x: Var<'g, T>, params: &AttentionParams) -> Result<Var<'g, T>> {
    if params.shift != 0 {
        return Err(Error::Config(format!("w_msa requires shift 0, parameters have {}", params.shift)));
    }
    if params.is_cross() {
        return Err(Error::Config("w_msa needs a query projection".into()));
    }
    params.forward(g, x)
}

/// Shifted-window attention, `0 < n < m`.
pub fn sw_msa<'g, T: Scalar>(g: &'g Graph<T>, x: Var<'g, T>, params: &AttentionParams) -> Result<Var<'g, T>> {
    if params.shift == 0 {
        return Err(Error::Config("sw_msa requires a positive shift; use w_msa for n = 0".into()));
    }
    if params.is_cross() {
        return Err(Error::Config("sw_msa needs a query projection".into()));
    }
    params.forward(g, x)
}

/// Windowed attention whose query is the input itself. Accepts any shift,
/// including zero.
pub fn cross_sw_msa<'g, T: Scalar>(g: &'g Graph<T>, x: Var<'g, T>, params: &AttentionParams) -> Result<Var<'g, T>> {
    if !params.is_cross() {
        return Err(Error::Config("cross_sw_msa needs parameters built without a query projection".into()));
    }
    params.forward(g, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    fn store_with(m: usize, n: usize, embed: usize, heads: usize, cross: bool, seed: u64) -> (ParamStore<f64>, AttentionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let p = AttentionParams::new(&mut ps, &mut rng, "attn", embed, heads, m, n, cross).unwrap();
        ps.fill_where(|_| true, {
            let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
            move || {
                let v: f64 = StandardNormal.sample(&mut r);
                v * 0.5
            }
        });
        (ps, p)
    }

    #[test]
    fn single_token_windows_reduce_to_value_path() {
        for cross in [false, true] {
            let (ps, p) = store_with(1, 0, 4, 2, cross, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let x = randn(&[3, 3, 4], &mut rng);
            let g = Graph::with_params(&ps, Mode::Eval);
            let out = p.forward(&g, g.input(x.clone())).unwrap().value();
            let xv = g.input(x);
            let direct = p.proj.forward(&g, p.v.forward(&g, xv).unwrap()).unwrap().value();
            assert!(out.max_abs_diff(&direct) < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        // all tokens equal and zero bias: output equals the (shared) value path
        let (mut ps, p) = store_with(3, 0, 4, 2, false, 4);
        ps.fill_where(|n| n.ends_with("rel_bias"), || 0.0);
        let x = Tensor::full(vec![3, 3, 4], 0.7);
        let g = Graph::with_params(&ps, Mode::Eval);
        let out = p.forward(&g, g.input(x)).unwrap().value();
        let first = &out.data()[..4];
        for row in out.data().chunks_exact(4) {
            for (a, b) in row.iter().zip(first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shift_validation() {
        let (ps, p) = store_with(3, 1, 4, 1, false, 5);
        let g = Graph::with_params(&ps, Mode::Eval);
        let x = g.input(Tensor::zeros(vec![6, 6, 4]));
        assert!(w_msa(&g, x, &p).is_err());
        assert!(sw_msa(&g, x, &p).is_ok());
        let (ps0, p0) = store_with(3, 0, 4, 1, false, 5);
        let g0 = Graph::with_params(&ps0, Mode::Eval);
        let x0 = g0.input(Tensor::zeros(vec![6, 6, 4]));
        assert!(sw_msa(&g0, x0, &p0).is_err());
        assert!(cross_sw_msa(&g0, x0, &p0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps2 = ParamStore::<f64>::new();
        assert!(AttentionParams::new(&mut ps2, &mut rng, "bad", 6, 4, 3, 0, false).is_err());
    }

    #[test]
    fn bias_table_has_expected_rows() {
        let (ps, p) = store_with(5, 2, 8, 2, false, 6);
        assert_eq!(ps.get(p.bias_table).shape(), &[81, 2]);
    }
}
