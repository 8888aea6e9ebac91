//! Pluggable OCR engines.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::TaskError;
use crate::scan::{PixelBox, Scan};
use crate::seed::{rng_for, Rng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcrWord {
    pub text: String,
    pub bbox: PixelBox,
}

/// Recognized words in reading order; `text` is the words joined by
/// single spaces.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OcrResult {
    pub text: String,
    pub words: Vec<OcrWord>,
}

impl OcrResult {
    pub fn from_words(words: Vec<OcrWord>) -> Self {
        let text = words.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ");
        Self { text, words }
    }

    pub fn word_texts(&self) -> Vec<&str> {
        self.words.iter().map(|w| w.text.as_str()).collect()
    }
}

pub trait OcrEngine: Send + Sync {
    fn name(&self) -> &str;
    fn recognize(&self, scan: &Scan) -> Result<OcrResult, TaskError>;
}

/// Reads the layout truth carried by rendered scans.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthOcr;

impl OcrEngine for GroundTruthOcr {
    fn name(&self) -> &str {
        "ground_truth"
    }

    fn recognize(&self, scan: &Scan) -> Result<OcrResult, TaskError> {
        let plan = scan.truth.as_ref().ok_or(TaskError::NoTruth)?;
        Ok(OcrResult::from_words(
            plan.words
                .iter()
                .map(|w| OcrWord {
                    text: w.text.clone(),
                    bbox: w.bbox,
                })
                .collect(),
        ))
    }
}

/// Ground truth corrupted per character with probability `p` and per word
/// dropped with probability `p / 2`. The stream is seeded by `seed` and the
/// scan's own seed, so the same scan always reads the same way.
#[derive(Debug, Clone, Copy)]
pub struct NoisyOcr {
    pub p: f64,
    pub seed: u64,
}

const LOWER: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
const UPPER: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";
const DIGIT: &[u8] = b"0123456789";

fn substitute(ch: char, rng: &mut Rng) -> char {
    let pool = if ch.is_ascii_uppercase() {
        UPPER
    } else if ch.is_ascii_digit() {
        DIGIT
    } else {
        LOWER
    };
    loop {
        let c = pool[rng.gen_range(0..pool.len())] as char;
        if c != ch {
            return c;
        }
    }
}

impl NoisyOcr {
    /// Corrupt each word; `None` marks a dropped word.
    pub fn corrupt(&self, words: &[&str], rng: &mut Rng) -> Vec<Option<String>> {
        let p = self.p.clamp(0.0, 1.0);
        words
            .iter()
            .map(|w| {
                if p > 0.0 && rng.gen_bool(p / 2.0) {
                    return None;
                }
                Some(
                    w.chars()
                        .map(|ch| {
                            if p > 0.0 && rng.gen_bool(p) {
                                substitute(ch, rng)
                            } else {
                                ch
                            }
                        })
                        .collect(),
                )
            })
            .collect()
    }
}

impl OcrEngine for NoisyOcr {
    fn name(&self) -> &str {
        "noisy"
    }

    fn recognize(&self, scan: &Scan) -> Result<OcrResult, TaskError> {
        let clean = GroundTruthOcr.recognize(scan)?;
        let mut rng = rng_for(self.seed, "ocr", scan.meta.seed);
        let texts = clean.word_texts();
        let noisy = self.corrupt(&texts, &mut rng);
        Ok(OcrResult::from_words(
            clean
                .words
                .iter()
                .zip(noisy)
                .filter_map(|(w, t)| t.map(|text| OcrWord { text, bbox: w.bbox }))
                .collect(),
        ))
    }
}
