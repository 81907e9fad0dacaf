//! The three attention flavors on one feature map: plain windows, shifted
//! windows and cross windows (input used directly as the query).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mswin::attention::{cross_sw_msa, sw_msa, w_msa, AttentionParams};
use mswin::autodiff::{Graph, Mode};
use mswin::params::ParamStore;
use mswin::tensor::Tensor;

fn main() -> mswin::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ps = ParamStore::<f32>::new();
    let (h, w, e) = (14, 14, 16);
    let plain = AttentionParams::new(&mut ps, &mut rng, "w", e, 4, 7, 0, false)?;
    let shifted = AttentionParams::new(&mut ps, &mut rng, "sw", e, 4, 7, 3, false)?;
    let cross = AttentionParams::new(&mut ps, &mut rng, "cross", e, 4, 7, 3, true)?;
    let x = Tensor::from_f64(vec![h, w, e], &(0..h * w * e).map(|i| ((i % 29) as f64 - 14.0) / 14.0).collect::<Vec<_>>())?;

    let g = Graph::with_params(&ps, Mode::Eval);
    let input = g.input(x);
    for (name, out) in [("w-msa", w_msa(&g, input, &plain)?), ("sw-msa", sw_msa(&g, input, &shifted)?), ("cross", cross_sw_msa(&g, input, &cross)?)] {
        let v = out.value();
        let mean_abs = v.data().iter().map(|a| a.abs()).sum::<f32>() / v.numel() as f32;
        println!("{name:<7} output {:?}, mean |y| {mean_abs:.4}", v.shape());
    }
    println!("tape: {} nodes, {} FLOPs", g.len(), g.total_flops());
    Ok(())
}
