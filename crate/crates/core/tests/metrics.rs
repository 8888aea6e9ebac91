use pixeldoc_core::masking::{PatchGrid, PatchMask};
use pixeldoc_core::seed::rng_from;
use pixeldoc_core::tasks::metrics::{balance_test_set, qa_metrics};
use pixeldoc_core::tasks::TaskError;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn probs(m: &PatchMask) -> Vec<f32> {
    m.bits().iter().map(|&b| if b { 0.8 } else { 0.2 }).collect()
}

#[test]
fn two_instance_fixture() {
    let g = PatchGrid::new(3, 3);
    let truth = [PatchMask::from_cells(g, &[(0, 0), (0, 1)]), PatchMask::empty(g)];
    let preds = [
        probs(&PatchMask::from_cells(g, &[(0, 1), (0, 2)])),
        probs(&PatchMask::empty(g)),
    ];
    let m = qa_metrics(&preds, &truth, 0.5).unwrap();
    assert_eq!((m.binary_acc, m.patch_acc, m.one_overlap), (1.0, 1.0 / 3.0, 1.0));
    assert_eq!((m.n_with_answer, m.n_without), (1, 1));
}

#[test]
fn mismatched_lengths_are_rejected() {
    let g = PatchGrid::new(2, 2);
    let e = qa_metrics(&[vec![0.0; 4]], &[], 0.5).unwrap_err();
    assert!(matches!(e, TaskError::LengthMismatch { .. }));
    let e = qa_metrics(&[vec![0.0; 3]], &[PatchMask::empty(g)], 0.5).unwrap_err();
    assert!(matches!(e, TaskError::LengthMismatch { .. }));
}

#[test]
fn one_class_cannot_be_balanced() {
    let e = balance_test_set(&[true, true], |&x| x, &mut rng_from(1)).unwrap_err();
    assert!(matches!(e, TaskError::OneClassOnly));
}

fn arb_instances() -> impl Strategy<Value = Vec<(Vec<bool>, Vec<f32>)>> {
    prop::collection::vec(
        (
            prop::collection::vec(any::<bool>(), 6),
            prop::collection::vec(0.0f32..1.0, 6),
        ),
        1..20,
    )
}

proptest! {
    #[test]
    fn metrics_are_permutation_invariant(items in arb_instances(), seed in any::<u64>()) {
        let g = PatchGrid::new(2, 3);
        let split = |items: &[(Vec<bool>, Vec<f32>)]| {
            let truth: Vec<PatchMask> = items.iter().map(|(b, _)| PatchMask::from_bits(g, b.clone()).unwrap()).collect();
            let preds: Vec<Vec<f32>> = items.iter().map(|(_, p)| p.clone()).collect();
            qa_metrics(&preds, &truth, 0.5).unwrap()
        };
        let a = split(&items);
        let mut shuffled = items.clone();
        shuffled.shuffle(&mut rng_from(seed));
        let b = split(&shuffled);
        prop_assert_eq!(a.binary_acc, b.binary_acc);
        prop_assert!((a.patch_acc - b.patch_acc).abs() < 1e-12);
        prop_assert_eq!(a.one_overlap, b.one_overlap);
        for v in [a.binary_acc, a.patch_acc, a.one_overlap] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn balanced_sets_have_equal_classes(labels in prop::collection::vec(any::<bool>(), 2..200), seed in any::<u64>()) {
        let with = labels.iter().filter(|&&x| x).count();
        let without = labels.len() - with;
        prop_assume!(with > 0 && without > 0);
        let b = balance_test_set(&labels, |&x| x, &mut rng_from(seed)).unwrap();
        prop_assert_eq!(b.len(), 2 * with.min(without));
        prop_assert_eq!(b.iter().filter(|&&x| x).count(), with.min(without));
    }
}
