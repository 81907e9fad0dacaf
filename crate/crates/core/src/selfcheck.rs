//! Quick numerical self-test used by the `selfcheck` command: gradient
//! checks of the differentiable ops, the shifted-window attention against
//! a literal shifted partition, window round trips, mask properties and
//! the FLOPs estimate against tape counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::AttentionParams;
use crate::autodiff::{grad_check, Graph, Mode, Var};
use crate::decoder::DecoderKind;
use crate::error::Result;
use crate::flops::flops_estimate;
use crate::model::{ModelConfig, SegModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::window::{relative_position_index, window_partition, window_reverse, WindowGrid};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

/// Random weighted sum so every output element matters.
fn weighted<'g>(g: &'g Graph<f64>, y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(randn(&y.shape(), &mut rng));
    y.mul(w)?.sum()
}

fn grad_checks(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&[3, 4], &mut rng);
    let w = randn(&[4, 5], &mut rng);
    let b = randn(&[5], &mut rng);
    let gamma = randn(&[4], &mut rng);
    let img = randn(&[3, 3, 2], &mut rng);
    type F = Box<dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>>;
    let cases: Vec<(&str, Tensor<f64>, F, f64)> = vec![
        ("linear", x.clone(), Box::new(move |g, v| weighted(g, v.linear(g.input(w.clone()), Some(g.input(b.clone())))?, 1)), 1e-4),
        ("softmax", x.clone(), Box::new(|g, v| weighted(g, v.softmax(1)?, 2)), 1e-4),
        (
            "layer_norm",
            x.clone(),
            Box::new(move |g, v| weighted(g, v.layer_norm(g.input(gamma.clone()), g.input(Tensor::zeros(vec![4])), 1e-5)?, 3)),
            1e-4,
        ),
        ("gelu", x.clone(), Box::new(|g, v| weighted(g, v.gelu()?, 4)), 1e-4),
        ("bilinear_resize", img, Box::new(|g, v| weighted(g, v.resize(5, 7)?, 5)), 1e-4),
        ("cross_entropy", x, Box::new(|_, v| v.cross_entropy(&[1, 255, 3])), 1e-4),
    ];
    for (name, input, f, tol) in cases {
        let r = grad_check(f, &input, tol);
        out.push(Check { name: format!("gradient of {name}"), passed: r.passed, detail: format!("max rel error {:.2e}", r.max_rel_error) });
    }
}

/// Literal shifted-partition attention: token pairs attend iff they share
/// both the row band and the column band of the shifted partition.
fn literal_attention(x: &Tensor<f64>, p: &AttentionParams, store: &ParamStore<f64>) -> Tensor<f64> {
    let [h, w, e] = x.shape()[..] else { panic!("rank 3") };
    let grid = p.grid(h, w).expect("grid");
    let (m, n) = (grid.m, grid.n);
    let band = |o: usize| if o < n { 0 } else { 1 + (o - n) / m };
    let lin = |lin: &crate::nn::Linear, v: &[f64]| -> Vec<f64> {
        let wt = store.get(lin.weight).data();
        let bias = lin.bias.map(|b| store.get(b).data().to_vec()).unwrap_or(vec![0.0; lin.d_out]);
        (0..lin.d_out).map(|j| bias[j] + (0..lin.d_in).map(|i| v[i] * wt[i * lin.d_out + j]).sum::<f64>()).collect()
    };
    let tok = |i: usize| &x.data()[i * e..(i + 1) * e];
    let q: Vec<Vec<f64>> = (0..h * w).map(|i| p.q.as_ref().map_or(tok(i).to_vec(), |l| lin(l, tok(i)))).collect();
    let k: Vec<Vec<f64>> = (0..h * w).map(|i| lin(&p.k, tok(i))).collect();
    let v: Vec<Vec<f64>> = (0..h * w).map(|i| lin(&p.v, tok(i))).collect();
    let table = store.get(p.bias_table).data();
    let (heads, d) = (p.heads, p.head_dim());
    let mut out = Vec::with_capacity(h * w * e);
    for i in 0..h * w {
        let (yi, xi) = (i / w, i % w);
        let peers: Vec<usize> = (0..h * w).filter(|&j| band(j / w) == band(yi) && band(j % w) == band(xi)).collect();
        let mut cat = vec![0.0; e];
        for hd in 0..heads {
            let scores: Vec<f64> = peers
                .iter()
                .map(|&j| {
                    let (yj, xj) = (j / w, j % w);
                    let rel = ((yi + m - 1 - yj) * (2 * m - 1) + (xi + m - 1 - xj)) * heads + hd;
                    let dot: f64 = (0..d).map(|c| q[i][hd * d + c] * k[j][hd * d + c]).sum();
                    dot / (d as f64).sqrt() + table[rel]
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = ex.iter().sum();
            for (a, &j) in ex.iter().zip(&peers) {
                for c in 0..d {
                    cat[hd * d + c] += a / z * v[j][hd * d + c];
                }
            }
        }
        out.extend(lin(&p.proj, &cat));
    }
    Tensor::new(vec![h, w, e], out).expect("shape")
}

fn attention_oracle(out: &mut Vec<Check>) {
    let mut worst = 0.0f64;
    for (m, hw) in [(2, 4), (3, 6), (3, 5)] {
        let mut rng = ChaCha8Rng::seed_from_u64(m as u64 * 31 + hw as u64);
        let mut ps = ParamStore::<f64>::new();
        let p = AttentionParams::new(&mut ps, &mut rng, "a", 4, 2, m, 1, false).expect("params");
        let mut fill = ChaCha8Rng::seed_from_u64(5);
        ps.fill_where(|_| true, || {
            let z: f64 = StandardNormal.sample(&mut fill);
            0.5 * z
        });
        let x = randn(&[hw, hw, 4], &mut rng);
        let g = Graph::with_params(&ps, Mode::Eval);
        let got = p.forward(&g, g.input(x.clone())).expect("forward").value();
        worst = worst.max(got.max_abs_diff(&literal_attention(&x, &p, &ps)));
    }
    out.push(Check { name: "shifted window attention vs literal partition".into(), passed: worst < 1e-5, detail: format!("max abs diff {worst:.2e}") });
}

fn geometry(out: &mut Vec<Check>) {
    let mut ok = true;
    for m in [2, 3, 5] {
        for h in 1..=9 {
            for n in [0, m / 2] {
                let grid = WindowGrid::new(h, h + 1, m, n).expect("grid");
                let x = Tensor::from_f64(vec![h, h + 1, 2], &(0..h * (h + 1) * 2).map(|v| v as f64).collect::<Vec<_>>()).expect("t");
                let g = Graph::<f64>::new(Mode::Eval);
                let back = window_reverse(window_partition(g.input(x.clone()), &grid).expect("p"), &grid).expect("r").value();
                ok &= back.data() == x.data();
                if let Some(mask) = grid.mask() {
                    let t = mask.tokens();
                    for p in 0..mask.num_patterns() {
                        let pat = mask.pattern(p);
                        ok &= (0..t).all(|i| pat[i * t + i] == 0.0 && (0..t).all(|j| pat[i * t + j] == pat[j * t + i]));
                    }
                }
            }
        }
        ok &= relative_position_index(m).iter().all(|&i| (i as usize) < (2 * m - 1).pow(2));
    }
    out.push(Check { name: "window round trip and mask symmetry".into(), passed: ok, detail: String::new() });
}

fn flops(out: &mut Vec<Check>) {
    for kind in DecoderKind::ALL {
        let cfg = ModelConfig::toy(kind, 4);
        let (model, ps) = SegModel::new::<f32>(&cfg, 0).expect("model");
        let g = Graph::with_params(&ps, Mode::Eval);
        let measured = model.forward(&g, g.input(Tensor::zeros(vec![64, 64, 3])), false).map(|_| g.total_flops());
        let analytic = flops_estimate(&cfg, 64, 64).map(|r| r.total);
        let passed = matches!((&measured, &analytic), (Ok(a), Ok(b)) if a == b);
        out.push(Check { name: format!("flops estimate matches tape ({kind})"), passed, detail: format!("tape {measured:?} analytic {analytic:?}") });
    }
}

pub fn run() -> Vec<Check> {
    let mut out = Vec::new();
    grad_checks(&mut out);
    attention_oracle(&mut out);
    geometry(&mut out);
    flops(&mut out);
    out
}
