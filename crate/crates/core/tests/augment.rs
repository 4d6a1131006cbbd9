use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvlab_core::augment::{
    cutmix, epoch_batches, label_smooth, make_batch, mixup, one_hot, stream_rng, AugmentConfig, Policy, SoftBatch,
};
use tvlab_core::data::{synthetic_dataset, Synthetic};
use tvlab_core::Tensor;

const B: usize = 6;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

/// Image `b` is the constant `b`, labelled `b`, so every pixel and target
/// entry names its source.
fn labelled_constants() -> SoftBatch<f64> {
    SoftBatch {
        images: Tensor::from_fn(&[B, 3, SIDE, SIDE], |i| (i / (3 * PLANE)) as f64),
        targets: one_hot(&(0..B).collect::<Vec<_>>(), B),
    }
}

fn assert_distributions(t: &Tensor<f64>) {
    let k = t.shape()[1];
    for row in t.data().chunks_exact(k) {
        assert!(row.iter().all(|&v| v >= 0.0), "{row:?}");
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6, "{row:?}");
    }
}

#[test]
fn mixup_scan_keeps_distributions_and_convexity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let mut b = labelled_constants();
        let mix = mixup(&mut b, 0.8, &mut rng).unwrap();
        assert_distributions(&b.targets);
        for (i, img) in b.images.data().chunks_exact(3 * PLANE).enumerate() {
            let (a, p) = (i as f64, mix.partner[i] as f64);
            let (lo, hi) = (a.min(p), a.max(p));
            assert!(img.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
            let want = mix.lambda * a + (1.0 - mix.lambda) * p;
            assert!((img[0] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn cutmix_scan_mixed_fraction_matches_label_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mixed_rows = 0;
    for _ in 0..1000 {
        let mut b = labelled_constants();
        let mix = cutmix(&mut b, 1.0, &mut rng).unwrap();
        assert_distributions(&b.targets);
        for (i, img) in b.images.data().chunks_exact(3 * PLANE).enumerate() {
            let (a, p) = (i as f64, mix.partner[i] as f64);
            assert!(img.iter().all(|&v| v == a || v == p));
            if mix.partner[i] == i {
                continue;
            }
            mixed_rows += 1;
            let from_partner = img.iter().filter(|&&v| v == p).count();
            let area = mix.rect.unwrap().area();
            assert_eq!(from_partner, 3 * area);
            assert_eq!(mix.lambda, 1.0 - area as f64 / PLANE as f64);
            let frac = from_partner as f64 / (3 * PLANE) as f64;
            assert!((frac - (1.0 - mix.lambda)).abs() < 1e-15);
            assert_eq!(b.targets.at(&[i, mix.partner[i]]), 1.0 - mix.lambda);
        }
    }
    assert!(mixed_rows > 3000);
}

#[test]
fn smoothing_then_mixing_stays_a_distribution() {
    let t = label_smooth(&one_hot::<f64>(&[3, 0, 9], 10), 0.1).unwrap();
    for row in t.data().chunks_exact(10) {
        let on = row.iter().filter(|&&v| (v - 0.91).abs() < 1e-15).count();
        let off = row.iter().filter(|&&v| (v - 0.01).abs() < 1e-15).count();
        assert_eq!((on, off), (1, 9));
    }
    assert_distributions(&t);
    assert!(label_smooth(&t, 0.1).is_err());
}

#[test]
fn full_pipeline_is_seed_deterministic_and_valid() {
    let ds = synthetic_dataset(Synthetic::TwoClassBlobs, 24, 32, 5).unwrap();
    let cfg = AugmentConfig::default();
    let policy = Policy::cifar10();
    let batches = epoch_batches(ds.len(), 12, cfg.repeats(), &mut stream_rng(3, 0, u32::MAX as u64)).unwrap();
    for (j, idx) in batches.iter().enumerate() {
        let a: SoftBatch<f64> = make_batch(&ds, idx, &cfg, &policy, &mut stream_rng(3, 0, j as u64)).unwrap();
        let b: SoftBatch<f64> = make_batch(&ds, idx, &cfg, &policy, &mut stream_rng(3, 0, j as u64)).unwrap();
        assert!(a.images.data().iter().zip(b.images.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.targets, b.targets);
        assert_distributions(&a.targets);
        let c: SoftBatch<f64> = make_batch(&ds, idx, &cfg, &policy, &mut stream_rng(4, 0, j as u64)).unwrap();
        assert_ne!(a.images, c.images);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pipeline_targets_are_distributions(
        seed in any::<u64>(),
        aa in any::<bool>(),
        mix in any::<bool>(),
        cut in any::<bool>(),
        erase in any::<bool>(),
        eps in 0.0f64..0.5,
    ) {
        let ds = synthetic_dataset(Synthetic::TwoClassBlobs, 8, 32, seed).unwrap();
        let cfg = AugmentConfig {
            use_autoaugment: aa,
            use_mixup: mix,
            use_cutmix: cut,
            use_random_erasing: erase,
            label_smoothing: eps,
            ..AugmentConfig::default()
        };
        let idx: Vec<usize> = (0..8).collect();
        let b: SoftBatch<f64> = make_batch(&ds, &idx, &cfg, &Policy::cifar10(), &mut stream_rng(seed, 1, 2)).unwrap();
        prop_assert!(b.images.all_finite());
        for row in b.targets.data().chunks_exact(2) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row[0] + row[1] - 1.0).abs() <= 1e-6);
        }
    }
}
