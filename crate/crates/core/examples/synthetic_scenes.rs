//! Generates synthetic scenes, compares class frequencies with their
//! closed-form expectation and writes a few as PNG pairs.
//!
//! cargo run --example synthetic_scenes -- /tmp/scenes

use mswin::data::{expected_class_fractions, gen_synthetic, write_directory, SyntheticConfig};

fn main() -> mswin::Result<()> {
    let cfg = SyntheticConfig::new(64, 64, 4);
    let samples = gen_synthetic(7, 200, &cfg)?;
    let mut counts = vec![0u64; cfg.classes];
    samples.iter().flat_map(|s| &s.mask).for_each(|&l| counts[l as usize] += 1);
    let total: u64 = counts.iter().sum();
    for (c, e) in expected_class_fractions(&cfg).iter().enumerate() {
        println!("class {c}: observed {:.4}, expected {e:.4}", counts[c] as f64 / total as f64);
    }
    if let Some(dir) = std::env::args().nth(1) {
        write_directory(dir.as_ref(), &samples[..8])?;
        println!("wrote 8 samples to {dir}");
    }
    Ok(())
}
