//! FLOPs of the full-size model (Swin-S backbone, 512-wide encoder) for
//! every decoder at 512x512, broken down by module.

use mswin::decoder::DecoderKind;
use mswin::flops::flops_estimate;
use mswin::model::ModelConfig;

fn main() -> mswin::Result<()> {
    let base = flops_estimate(&ModelConfig::full_size(DecoderKind::Tfpn), 512, 512)?.giga();
    println!("{:<8} {:>10} {:>10} {:>10} {:>8} {:>10} {:>7}", "decoder", "backbone", "encoder", "decoder", "head", "total", "ratio");
    for kind in DecoderKind::ALL {
        let r = flops_estimate(&ModelConfig::full_size(kind), 512, 512)?;
        let g = |p: &str| r.part(p).unwrap_or(0) as f64 / 1e9;
        println!(
            "{:<8} {:>10.1} {:>10.1} {:>10.1} {:>8.1} {:>10.1} {:>7.3}",
            kind.to_string(),
            g("backbone"),
            g("encoder"),
            g("decoder"),
            g("head"),
            r.giga(),
            r.giga() / base
        );
    }
    Ok(())
}
