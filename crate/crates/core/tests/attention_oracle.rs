mod common;

use common::oracle_gap;

#[test]
fn shifted_attention_matches_brute_force_partition() {
    for m in [2, 3] {
        for hw in [4, 6] {
            for seed in 0..3 {
                let gap = oracle_gap(m, 1, hw, hw, seed);
                assert!(gap < 1e-5, "m={m} hw={hw} seed={seed}: {gap:e}");
            }
        }
    }
}

#[test]
fn rectangular_and_padded_maps_match_brute_force() {
    for (m, n, h, w) in [(3, 1, 5, 7), (3, 0, 7, 4), (4, 2, 9, 6), (5, 2, 3, 11), (2, 1, 1, 5), (4, 2, 3, 3)] {
        let gap = oracle_gap(m, n, h, w, 9);
        assert!(gap < 1e-9, "m={m} n={n} {h}x{w}: {gap:e}");
    }
}

#[test]
fn unshifted_attention_matches_brute_force() {
    for hw in [3, 4, 6] {
        assert!(oracle_gap(3, 0, hw, hw, 4) < 1e-9);
    }
}
