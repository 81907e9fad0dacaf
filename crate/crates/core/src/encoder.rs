//! Transformer feature-pyramid encoder.
//!
//! Every backbone stage is laterally projected to `d_enc` channels
//! (linear + batch norm + ReLU). The top-down pathway starts from the
//! projected last stage and repeatedly upsamples by two and adds the next
//! lateral. Each of the four resulting maps then passes through its own
//! window attention (no residual, no MLP), is resized to stride 4, and the
//! four maps are summed into `Y0`.

use rand::Rng;

use crate::attention::AttentionParams;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::LinearBnRelu;
use crate::params::ParamStore;
use crate::tensor::{spatial_dims, Scalar};

pub const DEFAULT_FUSION_WINDOW: usize = 7;

#[derive(Clone, Debug)]
pub struct Tfpn {
    pub d_enc: usize,
    /// Lateral projections of `X1..X4`.
    pub laterals: Vec<LinearBnRelu>,
    /// Fusion attention for `L1..L4` (strides 32, 16, 8, 4).
    pub fusion: Vec<AttentionParams>,
}

impl Tfpn {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        stage_channels: [usize; 4],
        d_enc: usize,
        heads: usize,
        fusion_window: usize,
    ) -> Result<Self> {
        if d_enc == 0 {
            return Err(Error::Config("d_enc must be positive".into()));
        }
        let laterals = (0..4).map(|s| LinearBnRelu::new(ps, rng, &format!("encoder.lateral{}", s + 1), stage_channels[s], d_enc)).collect();
        let fusion = (0..4)
            .map(|k| AttentionParams::new(ps, rng, &format!("encoder.fusion{}", k + 1), d_enc, heads, fusion_window, 0, false))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tfpn { d_enc, laterals, fusion })
    }

    pub fn lateral_project<'g, T: Scalar>(&self, g: &'g Graph<T>, stage: usize, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.laterals[stage].forward(g, x)
    }

    /// `L1..L4` from the stage outputs `X1..X4`.
    pub fn top_down<'g, T: Scalar>(&self, g: &'g Graph<T>, xs: &[Var<'g, T>; 4]) -> Result<[Var<'g, T>; 4]> {
        let mut ls = Vec::with_capacity(4);
        let mut cur = self.lateral_project(g, 3, xs[3])?;
        ls.push(cur);
        for stage in (0..3).rev() {
            let lat = self.lateral_project(g, stage, xs[stage])?;
            let (_, h, w, _) = spatial_dims(&lat.shape())?;
            let (_, ch, cw, _) = spatial_dims(&cur.shape())?;
            if h.div_ceil(2) != ch || w.div_ceil(2) != cw {
                return Err(Error::Dimension(format!("top-down: {ch}x{cw} cannot be upsampled onto {h}x{w}")));
            }
            cur = cur.resize(h, w)?.add(lat)?;
            ls.push(cur);
        }
        Ok(ls.try_into().expect("four laterals"))
    }

    /// `Y0` as the sum of the attended laterals resized to the finest one.
    pub fn pyramid_fuse<'g, T: Scalar>(&self, g: &'g Graph<T>, ls: &[Var<'g, T>; 4]) -> Result<Var<'g, T>> {
        let (_, h, w, _) = spatial_dims(&ls[3].shape())?;
        let parts = ls
            .iter()
            .zip(&self.fusion)
            .map(|(&l, attn)| attn.forward(g, l)?.resize(h, w))
            .collect::<Result<Vec<_>>>()?;
        Var::sum_of(&parts)
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, xs: &[Var<'g, T>; 4]) -> Result<Var<'g, T>> {
        let ls = self.top_down(g, xs)?;
        self.pyramid_fuse(g, &ls)
    }
}
