//! Trains the toy model on synthetic scenes and prints the metrics log.
//!
//! cargo run --release --example train_toy -- mswin-s 300 1e-3

use mswin::config::RunConfig;
use mswin::train::{load_datasets, Trainer};

fn main() -> mswin::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = RunConfig::default();
    if let Some(d) = args.first() {
        cfg.model.decoder = d.parse()?;
    }
    cfg.train.steps = args.get(1).map_or(200, |s| s.parse().expect("step count"));
    if let Some(lr) = args.get(2) {
        cfg.optimizer.lr = lr.parse().expect("learning rate");
    }
    cfg.train.eval_every = 50;
    let (train, eval) = load_datasets(&cfg)?;
    let mut trainer = Trainer::new(&cfg)?;
    let report = trainer.run(&train, &eval)?;
    for line in report.log.iter().filter(|l| l.starts_with('#') || l.contains("miou")) {
        println!("{line}");
    }
    println!("best train mIoU {:.3} after {} steps", report.best_train_miou(), report.steps);
    Ok(())
}
