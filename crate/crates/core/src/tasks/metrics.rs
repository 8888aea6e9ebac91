//! Answer-presence and answer-location metrics for patch-classification QA.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TaskError;
use crate::masking::PatchMask;
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaMetrics {
    /// Agreement on whether an answer is present.
    pub binary_acc: f64,
    /// Mean IoU of predicted and true answer patches over answerable items.
    pub patch_acc: f64,
    /// Share of answerable items whose prediction hits at least one patch.
    pub one_overlap: f64,
    pub n_with_answer: usize,
    pub n_without: usize,
}

/// Threshold per-patch probabilities into a mask.
pub fn threshold_mask(like: &PatchMask, probs: &[f32], threshold: f64) -> PatchMask {
    let bits = probs.iter().map(|&p| f64::from(p) > threshold).collect();
    PatchMask::from_bits(like.grid(), bits).expect("probabilities match the grid")
}

/// An item is predicted answerable when any patch probability exceeds
/// `threshold`.
pub fn qa_metrics(preds: &[Vec<f32>], truth: &[PatchMask], threshold: f64) -> Result<QaMetrics, TaskError> {
    if preds.len() != truth.len() {
        return Err(TaskError::LengthMismatch {
            preds: preds.len(),
            truth: truth.len(),
        });
    }
    let mut agree = 0usize;
    let mut iou_sum = 0.0;
    let mut hits = 0usize;
    let mut n_with = 0usize;
    for (p, m) in preds.iter().zip(truth) {
        if p.len() != m.grid().len() {
            return Err(TaskError::LengthMismatch {
                preds: p.len(),
                truth: m.grid().len(),
            });
        }
        let pred = threshold_mask(m, p, threshold);
        let has = !m.is_empty();
        agree += usize::from(has == !pred.is_empty());
        if has {
            n_with += 1;
            let inter = m.intersection_count(&pred);
            iou_sum += inter as f64 / m.union_count(&pred) as f64;
            hits += usize::from(inter >= 1);
        }
    }
    let n = preds.len();
    let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
    Ok(QaMetrics {
        binary_acc: ratio(agree as f64, n),
        patch_acc: ratio(iou_sum, n_with),
        one_overlap: ratio(hits as f64, n_with),
        n_with_answer: n_with,
        n_without: n - n_with,
    })
}

/// Downsample the majority class uniformly to the minority count. Items
/// keep their original relative order.
pub fn balance_test_set<T: Clone>(
    items: &[T],
    has_answer: impl Fn(&T) -> bool,
    rng: &mut Rng,
) -> Result<Vec<T>, TaskError> {
    let (with, without): (Vec<usize>, Vec<usize>) = (0..items.len()).partition(|&i| has_answer(&items[i]));
    if with.is_empty() || without.is_empty() {
        return Err(TaskError::OneClassOnly);
    }
    let k = with.len().min(without.len());
    let mut keep: Vec<usize> = Vec::with_capacity(2 * k);
    for mut class in [with, without] {
        class.shuffle(rng);
        keep.extend_from_slice(&class[..k]);
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| items[i].clone()).collect())
}
