use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mswin::data::{augment, expected_class_fractions, gen_synthetic, load_directory, write_directory, Sample, SyntheticConfig};
use mswin::tensor::Tensor;
use mswin::Error;

#[test]
fn class_frequencies_match_closed_form_expectation() {
    for (k, h, w) in [(4, 64, 64), (5, 96, 64), (2, 48, 48)] {
        let cfg = SyntheticConfig::new(h, w, k);
        let samples = gen_synthetic(17, 100, &cfg).unwrap();
        let mut counts = vec![0u64; k];
        samples.iter().flat_map(|s| &s.mask).for_each(|&l| counts[l as usize] += 1);
        let total = (100 * h * w) as f64;
        for (c, (&n, e)) in counts.iter().zip(expected_class_fractions(&cfg)).enumerate() {
            let got = n as f64 / total;
            assert!((got / e - 1.0).abs() < 0.10, "K={k} class {c}: {got:.4} vs {e:.4}");
        }
    }
}

#[test]
fn directory_round_trip_preserves_samples_and_ignore() {
    let dir = tempfile::tempdir().unwrap();
    let mut samples = gen_synthetic(3, 3, &SyntheticConfig::new(32, 48, 4)).unwrap();
    samples[1].mask[5] = 255;
    write_directory(dir.path(), &samples).unwrap();
    let loaded = load_directory(dir.path()).unwrap();
    assert_eq!(loaded.len(), 3);
    assert_eq!(loaded.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["000000", "000001", "000002"]);
    for ((_, got), want) in loaded.iter().zip(&samples) {
        assert_eq!(got.mask, want.mask);
        assert!(got.image.max_abs_diff(&want.image) <= 0.5 / 255.0 + 1e-6);
    }
    assert_eq!(loaded[1].1.mask[5], 255);
}

#[test]
fn empty_directory_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    std::fs::create_dir_all(dir.path().join("masks")).unwrap();
    assert!(load_directory(dir.path()).unwrap().is_empty());
}

#[test]
fn unpaired_and_mismatched_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let samples = gen_synthetic(4, 2, &SyntheticConfig::new(32, 32, 3)).unwrap();
    write_directory(dir.path(), &samples).unwrap();
    std::fs::remove_file(dir.path().join("masks/000001.png")).unwrap();
    match load_directory(dir.path()) {
        Err(Error::Unpaired(p)) => assert!(p.ends_with("images/000001.png")),
        other => panic!("expected an unpaired error, got {other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    write_directory(dir.path(), &samples[..1]).unwrap();
    let other = tempfile::tempdir().unwrap();
    write_directory(other.path(), &gen_synthetic(4, 1, &SyntheticConfig::new(64, 32, 3)).unwrap()).unwrap();
    std::fs::copy(other.path().join("masks/000000.png"), dir.path().join("masks/000000.png")).unwrap();
    assert!(matches!(load_directory(dir.path()), Err(Error::Data(_))));
}

fn small_sample(seed: u64) -> Sample {
    gen_synthetic(seed, 1, &SyntheticConfig::new(40, 36, 4)).unwrap().remove(0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cropped_labels_are_a_subset(seed in 0u64..1000, ch in 8usize..64, cw in 8usize..64, flip in 0.0f64..=1.0) {
        let s = small_sample(seed % 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment(&s, (ch, cw), flip, &mut rng);
        prop_assert_eq!((out.height(), out.width()), (ch, cw));
        prop_assert_eq!(out.image.shape(), &[ch, cw, 3]);
        for l in &out.mask {
            prop_assert!(*l == 255 || s.mask.contains(l));
        }
    }

    #[test]
    fn double_flip_is_identity(seed in 0u64..50) {
        let s = small_sample(seed);
        let back = s.flip_horizontal().flip_horizontal();
        prop_assert_eq!(back.mask, s.mask);
        prop_assert_eq!(back.image.data(), s.image.data());
    }

    #[test]
    fn synthetic_images_stay_in_unit_range(seed in 0u64..200) {
        let s = small_sample(seed);
        prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.mask.iter().all(|&l| l < 4));
    }
}

#[test]
fn flip_and_crop_move_image_and_mask_together() {
    let image = Tensor::from_f64(vec![2, 3, 3], &(0..18).map(|v| v as f64).collect::<Vec<_>>()).unwrap();
    let s = Sample::new(image, vec![0, 1, 2, 3, 4, 5]).unwrap();
    let f = s.flip_horizontal();
    assert_eq!(f.mask, vec![2, 1, 0, 5, 4, 3]);
    assert_eq!(f.image.at(&[0, 0, 0]), 6.0);
    let c = s.crop(1, 1, 1, 2);
    assert_eq!(c.mask, vec![4, 5]);
    assert_eq!(c.image.at(&[0, 0, 0]), 12.0);
}
