mod common;

use common::oracles::{check_against_oracle, random_pair};
use hvmunet::data::SegmentationMask;
use hvmunet::metrics::{confusion, evaluate, precision_recall_f1_acc};
use ndarray::Array2;
use num::BigRational;
use proptest::prelude::*;

#[test]
fn fifty_random_pairs_match_brute_force() {
    for seed in 0..50 {
        let (p, g) = random_pair(16, seed, &[1, 2, 3, 4], 0.0);
        check_against_oracle(&p, &g);
        let (p, g) = random_pair(16, 1000 + seed, &[0, 1, 2, 3, 4], 0.1);
        check_against_oracle(&p, &g);
    }
}

#[test]
fn hand_built_case() {
    let gt = SegmentationMask::new(Array2::from_shape_vec((2, 2), vec![2, 2, 3, 0]).unwrap()).unwrap();
    let pred = SegmentationMask::new(Array2::from_shape_vec((2, 2), vec![2, 3, 3, 0]).unwrap()).unwrap();
    let c = confusion(&pred, &gt).unwrap();
    assert_eq!((c.classes[2].tp, c.classes[2].fn_), (1, 1));
    assert_eq!((c.classes[3].tp, c.classes[3].fp), (1, 1));
    check_against_oracle(&pred, &gt);
}

fn upscale(m: &SegmentationMask) -> SegmentationMask {
    let (h, w) = m.dim();
    SegmentationMask::new(Array2::from_shape_fn((2 * h, 2 * w), |(r, c)| m.get(r / 2, c / 2))).unwrap()
}

proptest! {
    #[test]
    fn oracle_equivalence(seed in any::<u64>(), size in 1usize..20, ignore in 0.0f64..0.5) {
        let (p, g) = random_pair(size, seed, &[0, 1, 2, 3, 4], ignore);
        check_against_oracle(&p, &g);
    }

    #[test]
    fn dice_is_symmetric(seed in any::<u64>()) {
        let (p, g) = random_pair(16, seed, &[0, 1, 2, 3, 4], 0.0);
        let a = precision_recall_f1_acc(&confusion(&p, &g).unwrap());
        let b = precision_recall_f1_acc(&confusion(&g, &p).unwrap());
        for c in 0..5 {
            prop_assert_eq!(&a[c].dice, &b[c].dice);
        }
    }

    #[test]
    fn dice_is_size_invariant(seed in any::<u64>(), ignore in 0.0f64..0.3) {
        let (p, g) = random_pair(12, seed, &[0, 1, 2, 3, 4], ignore);
        let a = precision_recall_f1_acc(&confusion(&p, &g).unwrap());
        let b = precision_recall_f1_acc(&confusion(&upscale(&p), &upscale(&g)).unwrap());
        for c in 0..5 {
            prop_assert_eq!(&a[c].dice, &b[c].dice);
        }
    }

    #[test]
    fn self_dice_is_one_with_support(seed in any::<u64>()) {
        let (_, g) = random_pair(8, seed, &[0, 1, 2, 3, 4], 0.2);
        let m = precision_recall_f1_acc(&confusion(&g, &g).unwrap());
        for (c, mc) in m.iter().enumerate() {
            let expected = if mc.support > 0 { 1 } else { 0 };
            prop_assert_eq!(mc.dice.clone(), BigRational::from_integer(expected.into()), "class {}", c);
        }
    }

    #[test]
    fn counts_are_additive(a in any::<u64>(), b in any::<u64>()) {
        let (p1, g1) = random_pair(9, a, &[0, 1, 2, 3, 4], 0.1);
        let (p2, g2) = random_pair(7, b, &[0, 1, 2, 3, 4], 0.1);
        let joint = evaluate([(&p1, &g1), (&p2, &g2)]).unwrap();
        let sum = confusion(&p1, &g1).unwrap() + confusion(&p2, &g2).unwrap();
        prop_assert_eq!(&joint.counts, &sum);
        for cc in &sum.classes {
            prop_assert_eq!(cc.tp + cc.fp + cc.fn_ + cc.tn, sum.total);
        }
        let tp: u64 = sum.classes.iter().map(|c| c.tp).sum();
        prop_assert_eq!(tp, sum.correct);
    }
}
