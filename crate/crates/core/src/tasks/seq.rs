//! Synthetic rendered sentence-pair classification.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::TaskError;
use crate::render::{render_pair, FontRegistry, PairConfig};
use crate::scan::Scan;
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeqConfig {
    /// The label is whether this word appears in the second sentence.
    pub marker: String,
    pub marker_prob: f64,
    pub words: (usize, usize),
    /// `(width, height)`.
    pub canvas: (usize, usize),
    pub pair: PairConfig,
}

impl Default for SeqConfig {
    fn default() -> Self {
        Self {
            marker: "ship".into(),
            marker_prob: 0.5,
            words: (2, 4),
            canvas: (64, 64),
            pair: PairConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqItem {
    pub s1: String,
    pub s2: String,
    pub label: usize,
    pub scan: Scan,
}

/// Draw `n` labeled pairs. Both sentences are sampled from `vocab` without
/// the marker; the marker is then inserted into `s2` with probability
/// `marker_prob`.
pub fn synth_seq_task(
    vocab: &[&str],
    n: usize,
    noisy: bool,
    cfg: &SeqConfig,
    fonts: &FontRegistry,
    rng: &mut Rng,
) -> Result<Vec<SeqItem>, TaskError> {
    let pool: Vec<&str> = vocab.iter().copied().filter(|w| *w != cfg.marker).collect();
    if pool.is_empty() || vocab.len() < 2 {
        return Err(TaskError::Usage("vocabulary needs two words besides the marker".into()));
    }
    let (lo, hi) = (cfg.words.0.max(1), cfg.words.1.max(cfg.words.0.max(1)));
    let draw = |rng: &mut Rng| -> Vec<&str> {
        let k = rng.gen_range(lo..=hi);
        (0..k).map(|_| *pool.choose(rng).expect("pool")).collect()
    };
    (0..n)
        .map(|_| {
            let s1 = draw(rng).join(" ");
            let mut s2 = draw(rng);
            let label = usize::from(rng.gen_bool(cfg.marker_prob.clamp(0.0, 1.0)));
            if label == 1 {
                let at = rng.gen_range(0..=s2.len());
                s2.insert(at, &cfg.marker);
            }
            let s2 = s2.join(" ");
            let scan = render_pair(&s1, Some(&s2), noisy, rng, cfg.canvas, fonts, &cfg.pair)?;
            Ok(SeqItem { s1, s2, label, scan })
        })
        .collect()
}
