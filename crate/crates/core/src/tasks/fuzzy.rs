//! Approximate location of an answer string inside OCR output.

use serde::{Deserialize, Serialize};

/// Default normalized edit-distance threshold.
pub const MAX_NORM_DIST: f64 = 0.3;

/// Inclusive word-index span of the best match.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuzzyMatch {
    pub start: usize,
    pub end: usize,
    pub distance: usize,
    pub normalized: f64,
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let mut prev: Vec<usize> = (0..=a.len()).collect();
    let mut cur = vec![0; a.len() + 1];
    for (j, cb) in b.chars().enumerate() {
        cur[0] = j + 1;
        for i in 0..a.len() {
            let sub = prev[i] + usize::from(a[i] != cb);
            cur[i + 1] = sub.min(prev[i + 1] + 1).min(cur[i] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[a.len()]
}

/// Extend a DP column (distances of answer prefixes to the span so far) by
/// one span character.
fn push_char(col: &mut [usize], scratch: &mut [usize], answer: &[char], ch: char) {
    scratch[0] = col[0] + 1;
    for i in 0..answer.len() {
        let sub = col[i] + usize::from(answer[i] != ch);
        scratch[i + 1] = sub.min(col[i + 1] + 1).min(scratch[i] + 1);
    }
    col.copy_from_slice(scratch);
}

/// Find the contiguous word span of `words` (joined by single spaces)
/// closest to `answer` in edit distance. Ties go to the leftmost, then the
/// shortest span. Returns `None` when the best distance divided by
/// `max(len(answer), len(span))` exceeds `max_norm_dist`.
pub fn fuzzy_locate(answer: &str, words: &[&str], max_norm_dist: f64) -> Option<FuzzyMatch> {
    let a: Vec<char> = answer.chars().collect();
    if a.is_empty() || words.is_empty() {
        return None;
    }
    let mut best: Option<(usize, usize, usize, usize)> = None; // (dist, start, end, span_len)
    let mut col = vec![0; a.len() + 1];
    let mut scratch = vec![0; a.len() + 1];
    for start in 0..words.len() {
        for (i, v) in col.iter_mut().enumerate() {
            *v = i;
        }
        let mut span_len = 0usize;
        for (end, w) in words.iter().enumerate().skip(start) {
            if end > start {
                push_char(&mut col, &mut scratch, &a, ' ');
                span_len += 1;
            }
            for ch in w.chars() {
                push_char(&mut col, &mut scratch, &a, ch);
                span_len += 1;
            }
            let d = col[a.len()];
            let better = match best {
                None => true,
                Some((bd, ..)) => d < bd,
            };
            if better {
                best = Some((d, start, end, span_len));
            }
            // Longer spans cannot beat the best: distance >= length gap.
            if span_len > a.len() && span_len - a.len() > best.map_or(usize::MAX, |b| b.0) {
                break;
            }
        }
    }
    let (distance, start, end, span_len) = best?;
    let normalized = distance as f64 / a.len().max(span_len) as f64;
    (normalized <= max_norm_dist).then_some(FuzzyMatch {
        start,
        end,
        distance,
        normalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("runaway", "runavvay"), 2);
    }

    #[test]
    fn verbatim_answer_is_exact() {
        let words = ["the", "brig", "MARY", "ANN", "sailed"];
        let m = fuzzy_locate("MARY ANN", &words, MAX_NORM_DIST).unwrap();
        assert_eq!((m.start, m.end, m.distance), (2, 3, 0));
    }

    #[test]
    fn ocr_errors_are_tolerated() {
        let words = ["a", "runavvay", "slave"];
        let m = fuzzy_locate("runaway", &words, MAX_NORM_DIST).unwrap();
        assert_eq!((m.start, m.end, m.distance), (1, 1, 2));
        assert!((m.normalized - 2.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn dissimilar_text_is_rejected() {
        let words = ["cargo", "of", "sugar"];
        assert_eq!(fuzzy_locate("BRIDGETOWN", &words, MAX_NORM_DIST), None);
    }

    #[test]
    fn ties_go_leftmost_then_shortest() {
        let words = ["ship", "x", "ship"];
        let m = fuzzy_locate("ship", &words, MAX_NORM_DIST).unwrap();
        assert_eq!((m.start, m.end), (0, 0));
    }

    #[test]
    fn matches_brute_force() {
        use crate::seed::rng_from;
        use rand::Rng as _;
        let pool = ["ab", "abc", "b", "ca", "bca", "a"];
        let mut rng = rng_from(5);
        for _ in 0..300 {
            let n = rng.gen_range(1..7);
            let words: Vec<&str> = (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
            let answer = format!("{} {}", pool[rng.gen_range(0..6)], pool[rng.gen_range(0..6)]);
            let mut oracle: Option<(usize, usize, usize)> = None;
            for i in 0..n {
                for j in i..n {
                    let d = levenshtein(&answer, &words[i..=j].join(" "));
                    if oracle.is_none_or(|(bd, ..)| d < bd) {
                        oracle = Some((d, i, j));
                    }
                }
            }
            let got = fuzzy_locate(&answer, &words, 1.0).unwrap();
            assert_eq!(
                (got.distance, got.start, got.end),
                oracle.unwrap(),
                "{answer:?} in {words:?}"
            );
        }
    }
}
