//! Window geometry of a shifted grid: partition sizes, which windows need a
//! mask, and the allowed-pair pattern of one window.
//!
//! cargo run --example shifted_windows -- 10 7 4

use mswin::window::WindowGrid;

fn main() -> mswin::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let (h, w, m) = match args[..] {
        [h, w, m] => (h, w, m),
        _ => (10, 7, 4),
    };
    for n in [0, m / 2] {
        let grid = WindowGrid::new(h, w, m, n)?;
        println!("{h}x{w} map, window {m}, shift {n}: {} windows ({}x{}), padded to {}x{}", grid.num_windows(), grid.windows_y(), grid.windows_x(), grid.h_pad, grid.w_pad);
        let Some(mask) = grid.mask() else {
            println!("  no mask needed");
            continue;
        };
        let t = mask.tokens();
        let masked: Vec<usize> = (0..mask.num_windows()).filter(|&i| mask.for_window(i).iter().any(|&v| v != 0.0)).collect();
        println!("  {} distinct patterns, masked windows {masked:?}", mask.num_patterns());
        if let Some(&last) = masked.last() {
            println!("  allowed pairs in window {last} (# = may attend):");
            let pat = mask.for_window(last);
            for i in 0..t {
                let row: String = (0..t).map(|j| if pat[i * t + j] == 0.0 { '#' } else { '.' }).collect();
                println!("    {row}");
            }
        }
    }
    Ok(())
}
