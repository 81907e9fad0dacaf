//! Builds the toy model with every decoder and prints the shapes flowing
//! through it plus parameter counts.
//!
//! cargo run --example model_shapes -- 96 64

use mswin::autodiff::{Graph, Mode};
use mswin::decoder::DecoderKind;
use mswin::model::{ModelConfig, SegModel};
use mswin::tensor::Tensor;

fn main() -> mswin::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let (h, w) = match args[..] {
        [h, w] => (h, w),
        _ => (64, 64),
    };
    for kind in DecoderKind::ALL {
        let cfg = ModelConfig::toy(kind, 4);
        let (model, ps) = SegModel::new::<f32>(&cfg, 0)?;
        let g = Graph::with_params(&ps, Mode::Eval);
        let out = model.forward(&g, g.input(Tensor::zeros(vec![h, w, 3])), true)?;
        println!("{kind}: {} trainable parameters", ps.num_trainable());
        for (s, x) in out.stages.iter().enumerate() {
            println!("  X{} {:?}", s + 1, x.shape());
        }
        println!("  Y0 {:?} -> decoder {:?} -> logits {:?}", out.y0.shape(), out.z.shape(), out.logits.shape());
    }
    Ok(())
}
