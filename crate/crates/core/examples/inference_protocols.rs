//! Single-scale, multi-scale with flip and tiled prediction of one model on
//! a few synthetic scenes, scored with a confusion matrix.

use mswin::data::{gen_synthetic, SyntheticConfig};
use mswin::decoder::DecoderKind;
use mswin::infer::{evaluate, Protocol};
use mswin::model::{ModelConfig, SegModel};

fn main() -> mswin::Result<()> {
    let (model, params) = SegModel::new::<f32>(&ModelConfig::toy(DecoderKind::MswinP, 4), 0)?;
    let scenes = gen_synthetic(3, 4, &SyntheticConfig::new(96, 128, 4))?;
    let protocols = [
        ("single scale", Protocol::single_scale()),
        ("multi-scale + flip", Protocol { scales: vec![0.75, 1.0, 1.25], flip: true, tile: None }),
        ("tiled 64x64", Protocol { scales: vec![1.0], flip: false, tile: Some((64, 64)) }),
    ];
    for (name, p) in protocols {
        let cm = evaluate(&model, &params, &scenes, &p)?;
        println!("{name:<20} mIoU {:.4}  pixel accuracy {:.4}", cm.miou()?, cm.pixel_accuracy()?);
    }
    println!("(untrained weights: scores are near chance)");
    Ok(())
}
