//! Finite-difference check of a shifted Swin block at 64-bit precision,
//! reported per parameter tensor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mswin::autodiff::grad_check_model;
use mswin::backbone::SwinBlock;
use mswin::params::ParamStore;
use mswin::tensor::Tensor;

fn main() -> mswin::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::<f64>::new();
    let block = SwinBlock::new(&mut ps, &mut rng, "block", 8, 2, 3, 1, 2.0)?;
    let x = Tensor::from_f64(vec![5, 6, 8], &(0..240).map(|i| ((i * 17 % 23) as f64 - 11.0) / 7.0).collect::<Vec<_>>())?;
    let reports = grad_check_model(&ps, &x, |g, v| block.forward(g, v)?.gelu()?.sum(), 1e-3, 8, 0);
    for (name, r) in &reports {
        println!("{} {name:<28} max rel error {:.2e}", if r.passed { "ok  " } else { "FAIL" }, r.max_rel_error);
    }
    Ok(())
}
