use detinv::analysis::evaluate_ap;
use detinv::geometry::BBox;
use detinv::layout::{Detection, Layout};
use proptest::prelude::*;

mod common;
use common::{random_set, reference_ap};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn evaluate_ap_matches_the_reference_protocol(seed in any::<u64>()) {
        let (preds, gts) = random_set(seed, 3);
        let ours = evaluate_ap(&preds, &gts, 3).unwrap();
        let (ap, ap50) = reference_ap(&preds, &gts, 3);
        prop_assert!((ours.ap - ap).abs() < 0.1, "ap {} vs {}", ours.ap, ap);
        prop_assert!((ours.ap50 - ap50).abs() < 0.1, "ap50 {} vs {}", ours.ap50, ap50);
    }
}

#[test]
fn false_positive_before_the_only_true_positive() {
    let b = |x: f64| BBox::new(x, x, x + 10.0, x + 10.0).unwrap();
    let gt = vec![Layout::new(vec![Detection::new(b(0.0), 0, 1.0)])];
    let pred = vec![Layout::new(vec![Detection::new(b(50.0), 0, 0.9), Detection::new(b(0.0), 0, 0.8)])];
    assert_eq!(evaluate_ap(&pred, &gt, 1).unwrap().ap50, 50.0);
    assert_eq!(reference_ap(&pred, &gt, 1).1, 50.0);
}
