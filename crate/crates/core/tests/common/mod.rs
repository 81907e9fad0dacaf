//! Helpers shared by the integration tests: random tensors, a brute-force
//! shifted-window attention and the gradient suite.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use mswin::attention::AttentionParams;
use mswin::autodiff::{grad_check, grad_check_model, GradCheckReport, Graph, Var};
use mswin::backbone::{PatchMerging, SwinBlock};
use mswin::decoder::{MswinC, MswinP, MswinS, WindowSchedule};
use mswin::encoder::Tfpn;
use mswin::params::ParamStore;
use mswin::tensor::Tensor;
use mswin::window::{cyclic_shift, crop_map, pad_map, window_partition, WindowGrid};
use mswin::Result;

pub const OP_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, 1.0).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(&mut rng)).collect()).unwrap()
}

/// Overwrites every trainable parameter with `N(0, std^2)` draws so zero
/// initialized biases and tables take part in the checks.
pub fn randomize(ps: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, std).unwrap();
    ps.fill_where(|_| true, || d.sample(&mut rng));
}

/// Scalar objective that weighs every output element differently.
pub fn weighted<'g>(g: &'g Graph<f64>, y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let w = g.input(randn(&y.shape(), seed));
    y.mul(w)?.sum()
}

fn project(ps: &ParamStore<f64>, lin: &mswin::nn::Linear, v: &[f64]) -> Vec<f64> {
    let w = ps.get(lin.weight).data();
    (0..lin.d_out)
        .map(|j| {
            let b = lin.bias.map_or(0.0, |b| ps.get(b).data()[j]);
            b + v.iter().enumerate().map(|(i, x)| x * w[i * lin.d_out + j]).sum::<f64>()
        })
        .collect()
}

/// Row (or column) ranges of the shifted partition of `0..len`: a leading
/// window of `n` lines, then windows of `m` lines, the last one truncated.
fn shifted_ranges(len: usize, m: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    let mut starts = vec![0];
    let mut s = n;
    while s < len {
        if s > 0 {
            starts.push(s);
        }
        s += m;
    }
    starts.dedup();
    let mut out: Vec<_> = starts.windows(2).map(|w| w[0]..w[1]).collect();
    out.push(*starts.last().unwrap()..len);
    out
}

/// Attention computed window by window over a literally shifted partition
/// of an `[H, W, C]` map: no roll, no mask. Padding never participates.
pub fn brute_force_attention(x: &Tensor<f64>, p: &AttentionParams, ps: &ParamStore<f64>) -> Tensor<f64> {
    let [h, w, e] = x.shape()[..] else { panic!("expected [H, W, C]") };
    let m = p.window;
    // a map that fits in one window is never shifted
    let n = if h <= m && w <= m { 0 } else { p.shift };
    let heads = p.heads;
    let d = e / heads;
    let tok = |y: usize, xx: usize| &x.data()[(y * w + xx) * e..(y * w + xx + 1) * e];
    let table = ps.get(p.bias_table).data();
    let mut out = vec![0.0; h * w * e];
    for rows in shifted_ranges(h, m, n) {
        for cols in shifted_ranges(w, m, n) {
            let members: Vec<(usize, usize)> = rows.clone().flat_map(|y| cols.clone().map(move |xx| (y, xx))).collect();
            let q: Vec<Vec<f64>> = members.iter().map(|&(y, xx)| p.q.as_ref().map_or_else(|| tok(y, xx).to_vec(), |l| project(ps, l, tok(y, xx)))).collect();
            let k: Vec<Vec<f64>> = members.iter().map(|&(y, xx)| project(ps, &p.k, tok(y, xx))).collect();
            let v: Vec<Vec<f64>> = members.iter().map(|&(y, xx)| project(ps, &p.v, tok(y, xx))).collect();
            for (i, &(yi, xi)) in members.iter().enumerate() {
                let mut cat = vec![0.0; e];
                for hd in 0..heads {
                    let r = hd * d..(hd + 1) * d;
                    let logits: Vec<f64> = members
                        .iter()
                        .enumerate()
                        .map(|(j, &(yj, xj))| {
                            let dy = (yi as isize - yj as isize + m as isize - 1) as usize;
                            let dx = (xi as isize - xj as isize + m as isize - 1) as usize;
                            let dot: f64 = q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum();
                            dot / (d as f64).sqrt() + table[(dy * (2 * m - 1) + dx) * heads + hd]
                        })
                        .collect();
                    let top = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
                    for (j, l) in logits.iter().enumerate() {
                        let a = (l - top).exp() / z;
                        for c in r.clone() {
                            cat[c] += a * v[j][c];
                        }
                    }
                }
                let y = project(ps, &p.proj, &cat);
                out[(yi * w + xi) * e..(yi * w + xi + 1) * e].copy_from_slice(&y);
            }
        }
    }
    Tensor::new(vec![h, w, e], out).unwrap()
}

/// Largest absolute difference between the production attention and the
/// brute-force one for a randomly initialized layer.
pub fn oracle_gap(m: usize, n: usize, h: usize, w: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::<f64>::new();
    let p = AttentionParams::new(&mut ps, &mut rng, "attn", 6, 2, m, n, false).unwrap();
    randomize(&mut ps, seed + 100, 0.5);
    let x = randn(&[h, w, 6], seed + 200);
    let g = Graph::with_params(&ps, mswin::autodiff::Mode::Eval);
    let fast = p.forward(&g, g.input(x.clone())).unwrap().value();
    fast.max_abs_diff(&brute_force_attention(&x, &p, &ps))
}

type Objective = Box<dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>>;

fn op_cases() -> Vec<(&'static str, Tensor<f64>, Objective)> {
    let x = randn(&[3, 4], 1);
    let map = randn(&[5, 7, 2], 2);
    let w = randn(&[4, 3], 3);
    let b = randn(&[3], 4);
    let other = randn(&[3, 4], 5);
    let gamma = randn(&[4], 6);
    let beta = randn(&[4], 7);
    let grid = WindowGrid::new(5, 7, 3, 1).unwrap();
    let (o1, o2) = (other.clone(), other.clone());
    vec![
        ("linear", x.clone(), Box::new(move |g, v| weighted(g, v.linear(g.input(w.clone()), Some(g.input(b.clone())))?, 10))),
        ("add", x.clone(), Box::new(move |g, v| weighted(g, v.add(g.input(o1.clone()))?, 11))),
        ("mul", x.clone(), Box::new(move |g, v| weighted(g, v.mul(v)?.mul(g.input(o2.clone()))?, 12))),
        ("scale", x.clone(), Box::new(|g, v| weighted(g, v.scale(-2.5)?, 13))),
        ("sum", x.clone(), Box::new(|_, v| v.mul(v)?.sum())),
        ("reshape", x.clone(), Box::new(|g, v| weighted(g, v.reshape(vec![2, 6])?, 14))),
        ("softmax", x.clone(), Box::new(|g, v| weighted(g, v.softmax(1)?, 15))),
        ("layer_norm", x.clone(), Box::new(move |g, v| weighted(g, v.layer_norm(g.input(gamma.clone()), g.input(beta.clone()), 1e-5)?, 16))),
        ("relu", x.clone(), Box::new(|g, v| weighted(g, v.relu()?, 17))),
        ("gelu", x.clone(), Box::new(|g, v| weighted(g, v.gelu()?, 18))),
        ("resize_up", randn(&[3, 3, 2], 19), Box::new(|g, v| weighted(g, v.resize(5, 7)?, 20))),
        ("resize_down", map.clone(), Box::new(|g, v| weighted(g, v.resize(3, 4)?, 21))),
        ("concat", x.clone(), Box::new(|g, v| weighted(g, Var::concat_last(&[v, v.scale(3.0)?, v])?, 22))),
        ("window_partition", map.clone(), Box::new(move |g, v| weighted(g, window_partition(v, &grid)?, 23))),
        ("cyclic_shift", map.clone(), Box::new(|g, v| weighted(g, cyclic_shift(v, -2, 3)?, 24))),
        ("pad", map.clone(), Box::new(|g, v| weighted(g, pad_map(v, 2, 1)?, 25))),
        ("crop", map.clone(), Box::new(|g, v| weighted(g, crop_map(v, 3, 4)?, 26))),
        ("patch_merge", randn(&[5, 4, 2], 27), Box::new(|g, v| weighted(g, PatchMerging::concat_neighbourhoods(v)?, 28))),
        ("cross_entropy", randn(&[4, 3], 29), Box::new(|_, v| v.cross_entropy(&[0, 255, 2, 1]))),
    ]
}

fn model_check<F>(name: &str, ps: &ParamStore<f64>, input: &Tensor<f64>, f: F, tol: f64) -> (String, GradCheckReport)
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let reports = grad_check_model(ps, input, f, tol, 4, 7);
    let worst = reports
        .into_iter()
        .max_by(|a, b| (!a.1.passed, a.1.max_rel_error).partial_cmp(&(!b.1.passed, b.1.max_rel_error)).unwrap())
        .unwrap();
    (format!("{name} (worst: {})", worst.0), worst.1)
}

/// Finite-difference checks of every differentiable op (tolerance 1e-4)
/// and of the composite modules at toy width (tolerance 1e-3).
pub fn gradient_suite() -> Vec<(String, GradCheckReport)> {
    let mut out: Vec<(String, GradCheckReport)> = op_cases().into_iter().map(|(name, x, f)| (name.to_string(), grad_check(f, &x, OP_TOL))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // batch norm needs running statistics in a parameter store
    let mut ps = ParamStore::<f64>::new();
    let gm = ps.add("bn.gamma", randn(&[3], 30), true);
    let bt = ps.add("bn.beta", randn(&[3], 31), true);
    let rm = ps.add("bn.mean", Tensor::zeros(vec![3]), false);
    let rv = ps.add("bn.var", Tensor::full(vec![3], 1.0), false);
    out.push(model_check("batch_norm", &ps, &randn(&[5, 3], 32), |g, v| weighted(g, v.batch_norm(g.param(gm), g.param(bt), (rm, rv), 1e-5, 0.1)?, 33), OP_TOL));

    for (label, m, n, cross) in [("window_attention", 3, 0, false), ("shifted_window_attention", 3, 1, false), ("cross_window_attention", 2, 1, true)] {
        let mut ps = ParamStore::<f64>::new();
        let p = AttentionParams::new(&mut ps, &mut rng, "attn", 4, 2, m, n, cross).unwrap();
        randomize(&mut ps, 40, 0.5);
        out.push(model_check(label, &ps, &randn(&[5, 4, 4], 41), move |g, v| weighted(g, p.forward(g, v)?, 42), OP_TOL));
    }

    let mut ps = ParamStore::<f64>::new();
    let block = SwinBlock::new(&mut ps, &mut rng, "block", 8, 2, 3, 1, 2.0).unwrap();
    randomize(&mut ps, 50, 0.4);
    out.push(model_check("swin_block", &ps, &randn(&[5, 7, 8], 51), move |g, v| weighted(g, block.forward(g, v)?, 52), COMPOSITE_TOL));

    let mut ps = ParamStore::<f64>::new();
    let tfpn = Tfpn::new(&mut ps, &mut rng, [4, 6, 8, 10], 8, 2, 3).unwrap();
    randomize(&mut ps, 60, 0.4);
    let (x2, x3, x4) = (randn(&[6, 6, 6], 61), randn(&[3, 3, 8], 62), randn(&[2, 2, 10], 63));
    out.push(model_check(
        "tfpn",
        &ps,
        &randn(&[12, 12, 4], 64),
        move |g, v| weighted(g, tfpn.forward(g, &[v, g.input(x2.clone()), g.input(x3.clone()), g.input(x4.clone())])?, 65),
        COMPOSITE_TOL,
    ));

    let schedule = WindowSchedule::new(vec![(2, 0), (2, 1), (3, 0), (3, 1)]).unwrap();
    let y0 = randn(&[5, 6, 8], 70);
    let mut ps = ParamStore::<f64>::new();
    let dec = MswinP::new(&mut ps, &mut rng, 8, 2, &schedule, 1.0).unwrap();
    randomize(&mut ps, 71, 0.4);
    out.push(model_check("mswin_parallel", &ps, &y0, move |g, v| weighted(g, dec.forward(g, v)?, 72), COMPOSITE_TOL));
    let mut ps = ParamStore::<f64>::new();
    let dec = MswinS::new(&mut ps, &mut rng, 8, 2, &schedule, 1.0).unwrap();
    randomize(&mut ps, 73, 0.4);
    out.push(model_check("mswin_sequential", &ps, &y0, move |g, v| weighted(g, dec.forward(g, v)?, 74), COMPOSITE_TOL));
    let mut ps = ParamStore::<f64>::new();
    let dec = MswinC::new(&mut ps, &mut rng, 8, 2, &schedule).unwrap();
    randomize(&mut ps, 75, 0.4);
    out.push(model_check("mswin_cross", &ps, &y0, move |g, v| weighted(g, dec.forward(g, v)?, 76), COMPOSITE_TOL));
    out
}
