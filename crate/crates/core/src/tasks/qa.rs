//! Question answering as patch classification.
//!
//! The context is rendered, read back by an OCR engine, and the answer is
//! located fuzzily in the OCR words; the matched word boxes become the
//! patch label mask. A clean rendering of the question is stacked on top
//! and the result is cropped to the model input height, moving the mask
//! down by the question band's patch rows.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::fuzzy::{fuzzy_locate, FuzzyMatch, MAX_NORM_DIST};
use super::ocr::OcrEngine;
use super::text::{sentence, NAMES, VOCAB};
use super::TaskError;
use crate::degrade::{degrade, transport_mask, AppliedTransform, DegradationConfig};
use crate::masking::{boxes_to_mask, PatchGrid, PatchMask};
use crate::render::{rasterize, render_block, FontRegistry, FontSpec, RasterBackend};
use crate::scan::{PixelBox, Raster, Scan, ScanMeta, PATCH_SIZE};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QaConfig {
    /// `(width, height)` of the model input.
    pub canvas: (usize, usize),
    /// Context font of clean renderings.
    pub clean_font: FontSpec,
    /// Question font; questions are never degraded.
    pub question_font: FontSpec,
    /// Random context font and the degradation suite.
    pub noisy: bool,
    /// Context size range for noisy renderings.
    pub size_range: (u32, u32),
    pub margin: usize,
    pub degradation: DegradationConfig,
    pub max_norm_dist: f64,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            canvas: (160, 160),
            clean_font: FontSpec::new(0, 12),
            question_font: FontSpec::new(0, 12),
            noisy: false,
            size_range: (12, 14),
            margin: 2,
            degradation: DegradationConfig::default(),
            max_norm_dist: MAX_NORM_DIST,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaInstance {
    pub question: String,
    pub answer: String,
    pub has_answer: bool,
    /// Question band stacked on the context, cropped to the canvas.
    pub scan: Scan,
    pub mask: PatchMask,
    /// Patch rows taken by the question band.
    pub band_rows: usize,
    pub matched: Option<FuzzyMatch>,
    pub transform: Option<AppliedTransform>,
}

/// Question band: the question in the clean font, on white, with a height
/// rounded up to whole patches.
pub fn question_band(question: &str, cfg: &QaConfig, fonts: &FontRegistry) -> Result<Raster, TaskError> {
    let (w, h) = cfg.canvas;
    let plan = render_block(question, cfg.question_font, (w, h), fonts, cfg.margin)?;
    let ink = plan.ink_bottom().max(1);
    let band = ink.div_ceil(PATCH_SIZE) * PATCH_SIZE;
    let band = band.min(h.saturating_sub(PATCH_SIZE)).max(PATCH_SIZE);
    let (raster, _) = rasterize(&plan, RasterBackend::Bitmap, fonts)?;
    Ok(raster.rows_window(0, band, 1.0))
}

pub fn build_qa_instance(
    question: &str,
    context: &str,
    answer: &str,
    cfg: &QaConfig,
    fonts: &FontRegistry,
    ocr: &dyn OcrEngine,
    seed: u64,
    rng: &mut Rng,
) -> Result<QaInstance, TaskError> {
    if answer.trim().is_empty() {
        return Err(TaskError::Usage("answer must be nonempty".into()));
    }
    if context.trim().is_empty() {
        return Err(TaskError::Usage("context must be nonempty".into()));
    }
    let (w, h) = cfg.canvas;
    let grid = PatchGrid::for_image(h, w, PATCH_SIZE)?;
    let font = if cfg.noisy {
        let lo = cfg.size_range.0.max(FontSpec::MIN_SIZE);
        FontSpec::new(
            rng.gen_range(0..fonts.len()),
            rng.gen_range(lo..=cfg.size_range.1.max(lo)),
        )
    } else {
        cfg.clean_font
    };
    let plan = render_block(context, font, (w, h), fonts, cfg.margin)?;
    let meta = ScanMeta {
        seed,
        ..ScanMeta::default()
    };
    let (scan, _) = plan.to_scan(RasterBackend::Bitmap, fonts, meta)?;

    let read = ocr.recognize(&scan)?;
    let matched = fuzzy_locate(answer, &read.word_texts(), cfg.max_norm_dist);
    let boxes: Vec<PixelBox> = matched
        .map(|m| read.words[m.start..=m.end].iter().map(|w| w.bbox).collect())
        .unwrap_or_default();
    let mut mask = boxes_to_mask(&boxes, grid);

    let (context_scan, transform) = if cfg.noisy {
        let (degraded, t) = degrade(&scan, &cfg.degradation, rng);
        mask = transport_mask(&mask, &t, scan.truth.as_ref())?;
        (degraded, Some(t))
    } else {
        (scan, None)
    };

    let band = question_band(question, cfg, fonts)?;
    let band_px = band.height();
    let stacked = Raster::vstack(&[band, context_scan.pixels().to_gray()]).expect("band and context share width");
    let pixels = stacked.rows_window(0, h, 1.0);
    let band_rows = band_px / PATCH_SIZE;
    let mask = mask.shifted_down(band_rows, grid);
    let truth = context_scan.truth.as_ref().map(|p| p.shifted_down(band_px as i64, h));
    let mut out = Scan::new(pixels, context_scan.meta.clone())?;
    out.truth = truth;
    let has_answer = !mask.is_empty();
    Ok(QaInstance {
        question: question.to_string(),
        answer: if has_answer { answer.to_string() } else { String::new() },
        has_answer,
        scan: out,
        mask,
        band_rows,
        matched,
        transform,
    })
}

/// A generated question/context/answer triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaTriple {
    pub question: String,
    pub context: String,
    pub answer: String,
    /// Whether the answer was written into the context.
    pub planted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QaSynthConfig {
    pub answer_prob: f64,
    pub context_words: (usize, usize),
    pub answer_words: (usize, usize),
}

impl Default for QaSynthConfig {
    fn default() -> Self {
        Self {
            answer_prob: 0.5,
            context_words: (4, 8),
            answer_words: (7, 9),
        }
    }
}

/// Synthetic QA: lowercase prose contexts; answers are uppercase name
/// phrases, written into the context with probability `answer_prob` and
/// otherwise absent from it.
pub fn synth_qa_triple(rng: &mut Rng, cfg: &QaSynthConfig) -> QaTriple {
    let planted = rng.gen_bool(cfg.answer_prob);
    let n_ans = rng.gen_range(cfg.answer_words.0..=cfg.answer_words.1.max(cfg.answer_words.0));
    let answer: Vec<&str> = (0..n_ans).map(|_| *NAMES.choose(rng).expect("names")).collect();
    let n_ctx = rng.gen_range(cfg.context_words.0..=cfg.context_words.1.max(cfg.context_words.0));
    let mut words: Vec<&str> = (0..n_ctx).map(|_| *VOCAB.choose(rng).expect("vocab")).collect();
    if planted {
        let at = rng.gen_range(0..=words.len());
        for (k, a) in answer.iter().enumerate() {
            words.insert(at + k, a);
        }
    }
    QaTriple {
        question: format!("who {}", sentence(rng, (2, 4))),
        context: words.join(" "),
        answer: answer.join(" "),
        planted,
    }
}
