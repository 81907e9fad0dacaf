use proptest::prelude::*;

use mswin::autodiff::{softmax_last, Graph, Mode};
use mswin::tensor::Tensor;
use mswin::window::{cyclic_shift, relative_position_index, window_partition, window_reverse, WindowGrid, MASK_FORBIDDEN};

fn ramp(h: usize, w: usize, c: usize) -> Tensor<f64> {
    Tensor::from_f64(vec![h, w, c], &(0..h * w * c).map(|v| v as f64).collect::<Vec<_>>()).unwrap()
}

#[test]
fn partition_reverse_is_identity_for_all_small_maps() {
    for m in [2, 3, 5, 7, 12] {
        for h in 1..=16 {
            for w in 1..=16 {
                for n in [0, m / 2] {
                    let grid = WindowGrid::new(h, w, m, n).unwrap();
                    let x = ramp(h, w, 2);
                    let g = Graph::<f64>::new(Mode::Eval);
                    let parts = window_partition(g.input(x.clone()), &grid).unwrap();
                    assert_eq!(parts.shape(), vec![grid.num_windows(), m * m, 2]);
                    let back = window_reverse(parts, &grid).unwrap().value();
                    assert_eq!(back.data(), x.data(), "m={m} n={n} {h}x{w}");
                }
            }
        }
    }
}

#[test]
fn masks_are_symmetric_with_zero_diagonal() {
    for m in [2, 3, 5, 7, 12] {
        for h in 1..=16 {
            for w in 1..=16 {
                for n in [0, m / 2] {
                    let Some(mask) = WindowGrid::new(h, w, m, n).unwrap().mask() else { continue };
                    let t = mask.tokens();
                    for p in 0..mask.num_patterns() {
                        let pat = mask.pattern(p);
                        for i in 0..t {
                            assert_eq!(pat[i * t + i], 0.0);
                            for j in 0..t {
                                assert_eq!(pat[i * t + j], pat[j * t + i]);
                                assert!(pat[i * t + j] == 0.0 || pat[i * t + j] == MASK_FORBIDDEN);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn unshifted_unpadded_grid_needs_no_mask() {
    assert!(WindowGrid::new(12, 8, 4, 0).unwrap().mask().is_none());
    assert!(WindowGrid::new(12, 8, 4, 2).unwrap().mask().is_some());
    assert!(WindowGrid::new(10, 8, 4, 0).unwrap().mask().is_some());
}

#[test]
fn softmax_rows_sum_to_one() {
    let data: Vec<f64> = (0..7 * 33).map(|i| ((i * 7919) % 201) as f64 - 100.0).collect();
    let probs = softmax_last(&Tensor::<f32>::from_f64(vec![7, 33], &data).unwrap());
    for row in probs.data().chunks(33) {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }
}

#[test]
fn relative_index_covers_the_table() {
    for m in [2, 3, 5, 7] {
        let idx = relative_position_index(m);
        let mut seen = vec![false; (2 * m - 1).pow(2)];
        idx.iter().for_each(|&i| seen[i as usize] = true);
        assert!(seen.iter().all(|&s| s));
        let t = m * m;
        // reversing the pair mirrors the offset
        for i in 0..t {
            for j in 0..t {
                assert_eq!(idx[i * t + j] as usize, (2 * m - 1).pow(2) - 1 - idx[j * t + i] as usize);
            }
        }
    }
}

proptest! {
    #[test]
    fn cyclic_shift_inverts(h in 1usize..9, w in 1usize..9, dy in -10isize..10, dx in -10isize..10) {
        let g = Graph::<f64>::new(Mode::Eval);
        let x = ramp(h, w, 1);
        let there = cyclic_shift(g.input(x.clone()), dy, dx).unwrap();
        let back = cyclic_shift(there, -dy, -dx).unwrap().value();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn partition_is_a_permutation_of_real_tokens(h in 1usize..14, w in 1usize..14, m in 1usize..6, shifted in any::<bool>()) {
        let n = if shifted { m / 2 } else { 0 };
        let grid = WindowGrid::new(h, w, m, n).unwrap();
        let g = Graph::<f64>::new(Mode::Eval);
        let x = Tensor::from_f64(vec![h, w, 1], &(1..=h * w).map(|v| v as f64).collect::<Vec<_>>()).unwrap();
        let parts = window_partition(g.input(x), &grid).unwrap().value();
        let mut real: Vec<f64> = parts.data().iter().copied().filter(|&v| v != 0.0).collect();
        real.sort_by(f64::total_cmp);
        prop_assert_eq!(real, (1..=h * w).map(|v| v as f64).collect::<Vec<_>>());
        prop_assert_eq!(parts.numel(), grid.h_pad * grid.w_pad);
    }

    #[test]
    fn region_masks_partition_tokens_into_cliques(h in 2usize..14, w in 2usize..14, m in 2usize..6) {
        let grid = WindowGrid::new(h, w, m, m / 2).unwrap();
        if let Some(mask) = grid.mask() {
            let t = mask.tokens();
            for win in 0..mask.num_windows() {
                let pat = mask.for_window(win);
                let allowed = |i: usize, j: usize| pat[i * t + j] == 0.0;
                for i in 0..t {
                    for j in 0..t {
                        for k in 0..t {
                            if allowed(i, j) && allowed(j, k) {
                                prop_assert!(allowed(i, k));
                            }
                        }
                    }
                }
            }
        }
    }
}
