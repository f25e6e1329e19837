//! Property-based invariants across the patch encoding pipeline.

use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use patchvq::dataset::Image;
use patchvq::dictionary::sample_gaussian_dictionary;
use patchvq::encoder::{compute_scores, encode_hard, encode_soft, EncoderFilters};
use patchvq::whitening::{
    build_whitening_operator, estimate_patch_moments, load_whitening_operator,
    save_whitening_operator, Orientation, WhiteningOperator,
};

fn random_image(side: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = Array3::from_shape_simple_fn((3, side, side), || rng.r#gen::<f32>());
    Image {
        pixels,
        label: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn negation_closure(size in 1usize..12, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dict = sample_gaussian_dictionary(size, 3, seed, &mut rng).unwrap();
        prop_assert_eq!(dict.num_atoms(), 2 * size);
        for i in 0..size {
            let pos = dict.atom(i);
            let neg = dict.atom(size + i);
            for (a, b) in pos.iter().zip(neg.iter()) {
                prop_assert_eq!(*a, -*b);
            }
        }
    }

    #[test]
    fn hard_assignment_selects_exactly_q(
        size in 2usize..10,
        q_frac in 1usize..10,
        seed in 0u64..500,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_side = 3;
        let dict = sample_gaussian_dictionary(size, patch_side, seed, &mut rng).unwrap();
        let op = WhiteningOperator::identity(3 * patch_side * patch_side);
        let filters = EncoderFilters::new(&dict, &op).unwrap();
        let image = random_image(8, seed ^ 0xabcd);
        let scores = compute_scores(&image, &filters).unwrap();
        let q = 1 + (q_frac * (2 * size - 1)) / 10;
        let bits = encode_hard(&scores, q).unwrap();
        let (_, h, w) = bits.bits.dim();
        for r in 0..h {
            for c in 0..w {
                let active: usize = (0..2 * size).map(|ch| bits.bits[[ch, r, c]] as usize).sum();
                prop_assert_eq!(active, q);
            }
        }
    }

    #[test]
    fn score_bias_symmetry_holds(size in 1usize..8, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_side = 2;
        let dict = sample_gaussian_dictionary(size, patch_side, seed, &mut rng).unwrap();
        let op = WhiteningOperator::identity(3 * patch_side * patch_side);
        let filters = EncoderFilters::new(&dict, &op).unwrap();
        let image = random_image(6, seed ^ 0x7777);
        let scores = compute_scores(&image, &filters).unwrap();
        let (_, h, w) = scores.scores.dim();
        for i in 0..size {
            let sq: f64 = dict.atom(i).iter().map(|v| v * v).sum();
            for r in 0..h {
                for c in 0..w {
                    let total = scores.scores[[i, r, c]] + scores.scores[[size + i, r, c]];
                    prop_assert!((total - sq).abs() < 1e-8 * (1.0 + sq));
                }
            }
        }
    }

    #[test]
    fn soft_scores_agree_with_hard_bits(size in 2usize..8, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_side = 2;
        let dict = sample_gaussian_dictionary(size, patch_side, seed, &mut rng).unwrap();
        let op = WhiteningOperator::identity(3 * patch_side * patch_side);
        let filters = EncoderFilters::new(&dict, &op).unwrap();
        let image = random_image(5, seed ^ 0x3333);
        let scores = compute_scores(&image, &filters).unwrap();
        let q = size; // half of 2·size
        let hard = encode_hard(&scores, q).unwrap();
        let soft = encode_soft(&scores, q).unwrap();
        let (ch, h, w) = soft.dim();
        for k in 0..ch {
            for r in 0..h {
                for c in 0..w {
                    let s = soft[[k, r, c]];
                    // at exactly 0.5 the hard tie-break is index-based
                    if (s - 0.5).abs() > 1e-9 {
                        prop_assert_eq!(hard.bits[[k, r, c]] == 1, s > 0.5);
                    }
                }
            }
        }
    }

    #[test]
    fn whitening_operator_roundtrip_is_bit_exact(dim_side in 1usize..3, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3 * dim_side * dim_side;
        let patches: Vec<patchvq::dataset::Patch> = (0..(4 * d))
            .map(|_| patchvq::dataset::Patch {
                values: (0..d).map(|_| rng.r#gen::<f64>()).collect(),
                row: 0,
                col: 0,
            })
            .collect();
        let moments = estimate_patch_moments(&patches).unwrap();
        let op = build_whitening_operator(&moments, 1e-3, Orientation::Zca).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("op.bin");
        save_whitening_operator(&op, &path).unwrap();
        let loaded = load_whitening_operator(&path).unwrap();
        prop_assert_eq!(loaded.regularizer.to_bits(), op.regularizer.to_bits());
        for (a, b) in loaded.matrix.iter().zip(op.matrix.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in loaded.mean.iter().zip(op.mean.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
