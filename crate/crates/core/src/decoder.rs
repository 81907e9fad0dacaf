//! Decoder heads over the fused map `Y0`.
//!
//! * `tfpn`: no aggregation, the classifier reads `Y0` directly.
//! * `mswin-p`: every scheduled block attends to the shared `LN(Y0)` with a
//!   residual; the outputs are concatenated, linearly reduced, and finished by
//!   a residual MLP.
//! * `mswin-s`: the scheduled blocks run one after another as pre-norm
//!   transformer blocks.
//! * `mswin-c`: block `l` applies query-passthrough attention to the sum of
//!   `Y0` and every earlier block output.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{cross_sw_msa, AttentionParams};
use crate::autodiff::{Graph, Var};
use crate::backbone::SwinBlock;
use crate::error::{Error, Result};
use crate::nn::{hidden_width, LayerNorm, Linear, Mlp};
use crate::params::ParamStore;
use crate::tensor::{spatial_dims, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderKind {
    Tfpn,
    MswinP,
    MswinS,
    MswinC,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 4] = [DecoderKind::Tfpn, DecoderKind::MswinP, DecoderKind::MswinS, DecoderKind::MswinC];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::Tfpn => "tfpn",
            DecoderKind::MswinP => "mswin-p",
            DecoderKind::MswinS => "mswin-s",
            DecoderKind::MswinC => "mswin-c",
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecoderKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown decoder `{s}` (expected tfpn, mswin-p, mswin-s or mswin-c)")))
    }
}

/// Ordered `(window, shift)` pairs, one per decoder block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSchedule(Vec<(usize, usize)>);

impl Default for WindowSchedule {
    fn default() -> Self {
        WindowSchedule(vec![(5, 0), (5, 2), (7, 0), (7, 3), (12, 0), (12, 6)])
    }
}

impl WindowSchedule {
    /// Shifts must be `0` or `floor(m / 2)`.
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("window schedule is empty".into()));
        }
        for &(m, n) in &pairs {
            if m == 0 {
                return Err(Error::Config("schedule window must be positive".into()));
            }
            if n != 0 && n != m / 2 {
                return Err(Error::Config(format!("schedule shift {n} for window {m} must be 0 or {}", m / 2)));
            }
            if m == 1 && n != 0 {
                return Err(Error::Config("window 1 cannot be shifted".into()));
            }
        }
        Ok(WindowSchedule(pairs))
    }

    /// Each window once without shift and once with `floor(m / 2)`.
    pub fn from_windows(windows: &[usize]) -> Result<Self> {
        let pairs = windows.iter().flat_map(|&m| if m > 1 { vec![(m, 0), (m, m / 2)] } else { vec![(m, 0)] }).collect();
        Self::new(pairs)
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `m:n` pairs separated by commas, e.g. `5:0,5:2`.
    pub fn parse(s: &str) -> Result<Self> {
        let pairs = s
            .split(',')
            .map(|p| {
                let (m, n) = p.trim().split_once(':').ok_or_else(|| Error::Config(format!("schedule entry `{p}` is not m:n")))?;
                let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad schedule number `{v}`")));
                Ok((parse(m)?, parse(n)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }
}

impl fmt::Display for WindowSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.0.iter().map(|(m, n)| format!("{m}:{n}")).collect();
        f.write_str(&s.join(","))
    }
}

#[derive(Clone, Debug)]
pub struct MswinP {
    pub norm: LayerNorm,
    pub blocks: Vec<AttentionParams>,
    pub reduce: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl MswinP {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut impl Rng, width: usize, heads: usize, schedule: &WindowSchedule, mlp_ratio: f64) -> Result<Self> {
        let blocks = schedule
            .pairs()
            .iter()
            .enumerate()
            .map(|(l, &(m, n))| AttentionParams::new(ps, rng, &format!("decoder.block{l}.attn"), width, heads, m, n, false))
            .collect::<Result<Vec<_>>>()?;
        Ok(MswinP {
            norm: LayerNorm::new(ps, "decoder.norm", width),
            blocks,
            reduce: Linear::new(ps, rng, "decoder.reduce", schedule.len() * width, width, true),
            norm2: LayerNorm::new(ps, "decoder.norm2", width),
            mlp: Mlp::new(ps, rng, "decoder.mlp", width, hidden_width(width, mlp_ratio)),
        })
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, y0: Var<'g, T>) -> Result<Var<'g, T>> {
        let normed = self.norm.forward(g, y0)?;
        let branches = self.blocks.iter().map(|b| b.forward(g, normed)?.add(y0)).collect::<Result<Vec<_>>>()?;
        let y2 = self.reduce.forward(g, Var::concat_last(&branches)?)?;
        let m = self.mlp.forward(g, self.norm2.forward(g, y2)?)?;
        y2.add(m)
    }
}

#[derive(Clone, Debug)]
pub struct MswinS {
    pub blocks: Vec<SwinBlock>,
}

impl MswinS {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut impl Rng, width: usize, heads: usize, schedule: &WindowSchedule, mlp_ratio: f64) -> Result<Self> {
        let blocks = schedule
            .pairs()
            .iter()
            .enumerate()
            .map(|(l, &(m, n))| SwinBlock::new(ps, rng, &format!("decoder.block{l}"), width, heads, m, n, mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(MswinS { blocks })
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, y0: Var<'g, T>) -> Result<Var<'g, T>> {
        self.blocks.iter().try_fold(y0, |y, b| b.forward(g, y))
    }
}

/// Tag placed on the aggregated input of MSwin-C block `l` (0-based).
pub fn cross_input_tag(l: usize) -> String {
    format!("mswin_c.input{l}")
}

#[derive(Clone, Debug)]
pub struct MswinC {
    pub blocks: Vec<AttentionParams>,
}

impl MswinC {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut impl Rng, width: usize, heads: usize, schedule: &WindowSchedule) -> Result<Self> {
        let blocks = schedule
            .pairs()
            .iter()
            .enumerate()
            .map(|(l, &(m, n))| AttentionParams::new(ps, rng, &format!("decoder.block{l}.attn"), width, heads, m, n, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(MswinC { blocks })
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, y0: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut outs = vec![y0];
        for (l, block) in self.blocks.iter().enumerate() {
            let input = if outs.len() == 1 { y0 } else { Var::sum_of(&outs)? }.tag(cross_input_tag(l));
            outs.push(cross_sw_msa(g, input, block)?);
        }
        Ok(*outs.last().expect("non-empty"))
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Tfpn,
    MswinP(MswinP),
    MswinS(MswinS),
    MswinC(MswinC),
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        kind: DecoderKind,
        width: usize,
        heads: usize,
        schedule: &WindowSchedule,
        mlp_ratio: f64,
    ) -> Result<Self> {
        Ok(match kind {
            DecoderKind::Tfpn => Decoder::Tfpn,
            DecoderKind::MswinP => Decoder::MswinP(MswinP::new(ps, rng, width, heads, schedule, mlp_ratio)?),
            DecoderKind::MswinS => Decoder::MswinS(MswinS::new(ps, rng, width, heads, schedule, mlp_ratio)?),
            DecoderKind::MswinC => Decoder::MswinC(MswinC::new(ps, rng, width, heads, schedule)?),
        })
    }

    pub fn kind(&self) -> DecoderKind {
        match self {
            Decoder::Tfpn => DecoderKind::Tfpn,
            Decoder::MswinP(_) => DecoderKind::MswinP,
            Decoder::MswinS(_) => DecoderKind::MswinS,
            Decoder::MswinC(_) => DecoderKind::MswinC,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, y0: Var<'g, T>) -> Result<Var<'g, T>> {
        match self {
            Decoder::Tfpn => Ok(y0),
            Decoder::MswinP(d) => d.forward(g, y0),
            Decoder::MswinS(d) => d.forward(g, y0),
            Decoder::MswinC(d) => d.forward(g, y0),
        }
    }
}

/// Per-position classifier followed by bilinear upsampling to `(out_h, out_w)`.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub classifier: Linear,
}

impl SegHead {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, width: usize, classes: usize) -> Self {
        SegHead { classifier: Linear::new(ps, rng, &format!("{name}.classifier"), width, classes, true) }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, z: Var<'g, T>, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
        self.classifier.forward(g, z)?.resize(out_h, out_w)
    }
}

/// Two-layer classifier on an intermediate backbone stage.
#[derive(Clone, Debug)]
pub struct AuxHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl AuxHead {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut impl Rng, width: usize, hidden: usize, classes: usize) -> Self {
        AuxHead {
            fc1: Linear::new(ps, rng, "aux.fc1", width, hidden, true),
            fc2: Linear::new(ps, rng, "aux.fc2", hidden, classes, true),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, x: Var<'g, T>, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
        let h = self.fc1.forward(g, x)?.relu()?;
        self.fc2.forward(g, h)?.resize(out_h, out_w)
    }
}

/// Checks that `z` kept the spatial extent and width of `y0`.
pub fn check_preserved(y0: &[usize], z: &[usize]) -> Result<()> {
    let a = spatial_dims(y0)?;
    let b = spatial_dims(z)?;
    if a != b {
        return Err(Error::Dimension(format!("decoder changed shape {y0:?} -> {z:?}")));
    }
    Ok(())
}
