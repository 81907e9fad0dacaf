//! Parses a run configuration, validates it and prints its canonical text.
//!
//! cargo run --example config_file -- path/to/run.cfg

use mswin::config::RunConfig;

const SAMPLE: &str = "\
# decoder comparison run
model.decoder = mswin-c
model.schedule = 5:0,5:2,7:0,7:3
optimizer.lr = 1e-4
train.steps = 500
data.crop = 64x64
eval.scales = 1.0, 1.5
";

fn main() -> mswin::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => RunConfig::parse(SAMPLE)?,
    };
    print!("{}", cfg.to_text());
    Ok(())
}
