use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use woundseg::imaging::BinaryMask;
use woundseg::metrics::{confusion_counts, dice, evaluate_dataset, precision, recall, ConfusionCounts};

fn random_mask(rng: &mut ChaCha8Rng, density: f64) -> BinaryMask {
    let bits: Vec<u8> = (0..16 * 16).map(|_| rng.random_bool(density) as u8).collect();
    BinaryMask::new(16, 16, bits).unwrap()
}

/// Per-pixel loop with the empty-set conventions written out longhand.
fn oracle(pred: &BinaryMask, gt: &BinaryMask) -> ([u64; 4], [f64; 3]) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for y in 0..16 {
        for x in 0..16 {
            match (pred.get(x, y), gt.get(x, y)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
    }
    let both_empty = tp + fp + fn_ == 0;
    let p = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else if both_empty {
        1.0
    } else {
        0.0
    };
    let r = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else if both_empty {
        1.0
    } else {
        0.0
    };
    let d = if both_empty {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    ([tp, fp, fn_, tn], [p, r, d])
}

#[test]
fn counts_and_formulas_match_the_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..500 {
        // Include empty and full masks so the conventions are exercised.
        let densities = [0.0, 0.05, 0.3, 0.5, 0.8, 1.0];
        let pred = random_mask(&mut rng, densities[i % 6]);
        let gt = random_mask(&mut rng, densities[(i / 6) % 6]);
        let c = confusion_counts(&pred, &gt).unwrap();
        let (counts, scores) = oracle(&pred, &gt);
        assert_eq!([c.tp, c.fp, c.fn_, c.tn], counts, "pair {i}");
        assert_eq!([precision(&c), recall(&c), dice(&c)], scores, "pair {i}");
    }
}

#[test]
fn dataset_report_means_and_pools() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pairs: Vec<(String, BinaryMask, BinaryMask)> = (0..20)
        .map(|i| {
            (
                format!("{i:02}"),
                random_mask(&mut rng, 0.4),
                random_mask(&mut rng, 0.4),
            )
        })
        .collect();
    let report = evaluate_dataset(pairs.clone()).unwrap();
    let per: Vec<_> = pairs.iter().map(|(_, p, g)| oracle(p, g)).collect();
    let mean_dice = per.iter().map(|(_, s)| s[2]).sum::<f64>() / 20.0;
    assert!((report.mean.dice - mean_dice).abs() < 1e-12);
    let sum = per.iter().fold([0u64; 4], |mut acc, (c, _)| {
        for k in 0..4 {
            acc[k] += c[k];
        }
        acc
    });
    let pc = report.pooled_counts;
    assert_eq!([pc.tp, pc.fp, pc.fn_, pc.tn], sum);
    assert!(evaluate_dataset(Vec::<(String, BinaryMask, BinaryMask)>::new()).is_err());
    assert!(evaluate_dataset([("x", BinaryMask::empty(2, 2), BinaryMask::empty(3, 2))]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn dice_is_the_harmonic_mean(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000) {
        let c = ConfusionCounts { tp, fp, fn_, tn: 0 };
        let (p, r) = (precision(&c), recall(&c));
        if p > 0.0 && r > 0.0 {
            prop_assert!((dice(&c) - 2.0 * p * r / (p + r)).abs() < 1e-12);
        }
        prop_assert!((0.0..=1.0).contains(&dice(&c)));
    }

    #[test]
    fn swapping_roles_swaps_precision_and_recall(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_mask(&mut rng, 0.4), random_mask(&mut rng, 0.4));
        let ab = confusion_counts(&a, &b).unwrap();
        let ba = confusion_counts(&b, &a).unwrap();
        prop_assert_eq!(precision(&ab), recall(&ba));
        prop_assert_eq!(dice(&ab), dice(&ba));
        prop_assert_eq!(ab.total(), 256);
    }
}
