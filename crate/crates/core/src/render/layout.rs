//! Greedy line-breaking layout and the paragraph-fill procedure.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::raster::{rasterize, RasterBackend};
use super::{FontFace, FontRegistry, FontSpec, PlacedWord, PlanSpan, RenderError, RenderPlan, SpanKind, TextCorpus};
use crate::degrade::{degrade, DegradationConfig};
use crate::scan::{PixelBox, Scan, ScanMeta};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutConfig {
    /// Maximum tolerated fraction of ink-free rows below the text.
    pub empty_threshold: f64,
    /// Probability that a follow-up span keeps the font and takes the next
    /// paragraph (otherwise: fresh paragraph, fresh font).
    pub continue_prob: f64,
    /// Inclusive font size range in pixels.
    pub size_range: (u32, u32),
    /// Start offsets snap to word starts rather than arbitrary characters.
    pub word_aligned_offset: bool,
    /// Left and right margin in pixels.
    pub margin: usize,
    /// Hard cap on spans per plan.
    pub max_spans: usize,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            empty_threshold: 0.10,
            continue_prob: 0.80,
            size_range: (12, 32),
            word_aligned_offset: true,
            margin: 2,
            max_spans: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub words: Vec<PlacedWord>,
    /// Top of the line after the last one used.
    pub end_y: f64,
    /// Some words did not fit above the canvas bottom.
    pub overflow: bool,
}

fn text_width(face: &dyn FontFace, text: &str, size: u32) -> usize {
    text.chars().map(|c| face.advance(c, size)).sum()
}

/// Split a token wider than `max_width` into chunks that fit.
fn split_token(face: &dyn FontFace, token: &str, size: u32, max_width: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut w = 0;
    for ch in token.chars() {
        let a = face.advance(ch, size);
        if !cur.is_empty() && w + a > max_width {
            out.push(std::mem::take(&mut cur));
            w = 0;
        }
        cur.push(ch);
        w += a;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Tight ink box of `text` drawn with its first cell at `origin`, clipped to
/// the canvas. `None` when no ink lands on the canvas.
pub(crate) fn word_ink_box(
    face: &dyn FontFace,
    text: &str,
    size: u32,
    origin: (i64, i64),
    canvas: (usize, usize),
) -> Option<PixelBox> {
    let (cw, chh) = (canvas.0 as i64, canvas.1 as i64);
    let mut bbox: Option<PixelBox> = None;
    let mut pen = origin.0;
    for ch in text.chars() {
        let g = face.glyph(ch, size);
        for gy in 0..g.height {
            let py = origin.1 + gy as i64;
            if py < 0 || py >= chh {
                continue;
            }
            for gx in 0..g.width {
                let px = pen + gx as i64;
                if px < 0 || px >= cw || !g.is_ink(gx, gy) {
                    continue;
                }
                let b = PixelBox::new(px, py, px + 1, py + 1);
                bbox = Some(bbox.map_or(b, |a| a.union(&b)));
            }
        }
        pen += g.width as i64;
    }
    bbox
}

/// Lay `text` out in `font` starting on a fresh line at `start_y`.
///
/// Lines advance by 1.2 x the font size. A line whose top is still on the
/// canvas is placed even if its bottom is clipped; words with no visible ink
/// are left out of the result.
pub fn flow_text(
    text: &str,
    font: FontSpec,
    fonts: &FontRegistry,
    canvas: (usize, usize),
    start_y: f64,
    margin: usize,
    span: usize,
) -> Result<FlowResult, RenderError> {
    let face = fonts.get(font.family_id)?;
    let size = font.size_px;
    let lh = font.line_height();
    let (width, height) = canvas;
    let left = margin.min(width / 2);
    let right = width.saturating_sub(margin).max(left + 1);
    let usable = right - left;
    let space = face.advance(' ', size);

    let mut words = Vec::new();
    let mut line = 0usize;
    let mut x = left;
    let mut line_used = false;
    let mut overflow = false;
    for raw in text.split_whitespace() {
        for token in split_token(face, raw, size, usable) {
            let tw = text_width(face, &token, size);
            if line_used && x + tw > right {
                line += 1;
                x = left;
                line_used = false;
            }
            let top = (start_y + line as f64 * lh).round() as i64;
            if top >= height as i64 {
                overflow = true;
                break;
            }
            if let Some(bbox) = word_ink_box(face, &token, size, (x as i64, top), canvas) {
                words.push(PlacedWord {
                    text: token,
                    font,
                    origin: (x as i64, top),
                    bbox,
                    span,
                });
            }
            x += tw + space;
            line_used = true;
        }
        if overflow {
            break;
        }
    }
    let lines = if overflow || !line_used { line } else { line + 1 };
    Ok(FlowResult {
        words,
        end_y: start_y + lines as f64 * lh,
        overflow,
    })
}

fn sample_font(
    fonts: &FontRegistry,
    size_range: (u32, u32),
    canvas_h: usize,
    rng: &mut Rng,
) -> Result<FontSpec, RenderError> {
    if fonts.is_empty() {
        return Err(RenderError::FontResolution(0));
    }
    let family_id = rng.gen_range(0..fonts.len());
    let max = (canvas_h as u32).max(FontSpec::MIN_SIZE);
    let hi = size_range.1.clamp(FontSpec::MIN_SIZE, max);
    let lo = size_range.0.clamp(FontSpec::MIN_SIZE, hi);
    Ok(FontSpec::new(family_id, rng.gen_range(lo..=hi)))
}

fn check_font(fonts: &FontRegistry, font: FontSpec, canvas_h: usize) -> Result<(), RenderError> {
    fonts.get(font.family_id)?;
    if font.size_px < FontSpec::MIN_SIZE || font.size_px as usize > canvas_h {
        return Err(RenderError::FontSize {
            size: font.size_px,
            max: canvas_h,
        });
    }
    Ok(())
}

/// Random start offset inside a paragraph; returns `(char offset, rest)`.
fn start_offset(paragraph: &str, word_aligned: bool, rng: &mut Rng) -> (usize, String) {
    if word_aligned {
        let starts: Vec<usize> = paragraph
            .char_indices()
            .filter(|&(i, c)| c != ' ' && (i == 0 || paragraph[..i].ends_with(' ')))
            .map(|(i, _)| i)
            .collect();
        if starts.is_empty() {
            return (0, String::new());
        }
        let b = starts[rng.gen_range(0..starts.len())];
        (paragraph[..b].chars().count(), paragraph[b..].to_string())
    } else {
        let n = paragraph.chars().count();
        let k = rng.gen_range(0..n.max(1));
        let rest: String = paragraph.chars().skip(k).collect();
        (k, rest.trim().to_string())
    }
}

/// Fill a canvas with paragraphs from `corpus`.
///
/// The first span is a random paragraph from a random offset in a random
/// font. While the ink-free extent below the text exceeds
/// `cfg.empty_threshold`, another span is appended: with probability
/// `cfg.continue_prob` the next paragraph in the same font, otherwise a fresh
/// random paragraph in a fresh font. Stops when the canvas is filled, the
/// corpus runs out of next paragraphs, or the span cap is hit.
pub fn layout_paragraphs(
    corpus: &TextCorpus,
    rng: &mut Rng,
    canvas: (usize, usize),
    fonts: &FontRegistry,
    cfg: &LayoutConfig,
) -> Result<RenderPlan, RenderError> {
    if corpus.is_empty() {
        return Err(RenderError::EmptyCorpus);
    }
    let (_, height) = canvas;
    let mut plan = RenderPlan::empty(canvas.0, canvas.1);
    let mut font = sample_font(fonts, cfg.size_range, height, rng)?;
    let mut para = rng.gen_range(0..corpus.len());
    let (mut offset, mut text) = start_offset(corpus.paragraph(para), cfg.word_aligned_offset, rng);
    let mut kind = SpanKind::Start;
    let mut cursor = 0.0f64;
    let mut skipped = 0usize;

    while plan.spans.len() < cfg.max_spans {
        if text.is_empty() {
            // Degenerate remainder: move on to the next paragraph.
            skipped += 1;
            if skipped > corpus.len() {
                break;
            }
            para = (para + 1) % corpus.len();
            offset = 0;
            text = corpus.paragraph(para).to_string();
            continue;
        }
        check_font(fonts, font, height)?;
        let span_idx = plan.spans.len();
        let flow = flow_text(&text, font, fonts, canvas, cursor, cfg.margin, span_idx)?;
        plan.spans.push(PlanSpan {
            text: text.clone(),
            font,
            origin_y: cursor.round() as u32,
            kind,
            paragraph: Some(para),
            offset,
        });
        plan.words.extend(flow.words);
        plan.truncated |= flow.overflow;
        cursor = flow.end_y;
        if plan.empty_fraction() <= cfg.empty_threshold || cursor >= height as f64 {
            break;
        }
        if rng.gen_bool(cfg.continue_prob) {
            if para + 1 >= corpus.len() {
                break;
            }
            para += 1;
            kind = SpanKind::Continue;
        } else {
            para = rng.gen_range(0..corpus.len());
            font = sample_font(fonts, cfg.size_range, height, rng)?;
            kind = SpanKind::Fresh;
        }
        offset = 0;
        text = corpus.paragraph(para).to_string();
    }
    Ok(plan)
}

/// Lay out one block of text from the top of the canvas.
pub fn render_block(
    text: &str,
    font: FontSpec,
    canvas: (usize, usize),
    fonts: &FontRegistry,
    margin: usize,
) -> Result<RenderPlan, RenderError> {
    check_font(fonts, font, canvas.1)?;
    let flow = flow_text(text, font, fonts, canvas, 0.0, margin, 0)?;
    let mut plan = RenderPlan::empty(canvas.0, canvas.1);
    plan.spans.push(PlanSpan {
        text: text.to_string(),
        font,
        origin_y: 0,
        kind: SpanKind::Start,
        paragraph: None,
        offset: 0,
    });
    plan.words = flow.words;
    plan.truncated = flow.overflow;
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairConfig {
    /// Font of clean renderings.
    pub clean_font: FontSpec,
    /// Size range sampled for noisy renderings.
    pub size_range: (u32, u32),
    /// Smallest size tried before truncating.
    pub min_size: u32,
    pub margin: usize,
    pub degradation: DegradationConfig,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            clean_font: FontSpec::new(0, 12),
            size_range: (12, 16),
            min_size: FontSpec::MIN_SIZE,
            margin: 2,
            degradation: DegradationConfig::default(),
        }
    }
}

fn layout_pair(
    s1: &str,
    s2: Option<&str>,
    font: FontSpec,
    fonts: &FontRegistry,
    canvas: (usize, usize),
    margin: usize,
) -> Result<RenderPlan, RenderError> {
    let mut plan = RenderPlan::empty(canvas.0, canvas.1);
    let mut cursor = 0.0;
    for (i, text) in std::iter::once(s1).chain(s2).enumerate() {
        let flow = flow_text(text, font, fonts, canvas, cursor, margin, i)?;
        plan.spans.push(PlanSpan {
            text: text.to_string(),
            font,
            origin_y: cursor.round() as u32,
            kind: if i == 0 { SpanKind::Start } else { SpanKind::Continue },
            paragraph: None,
            offset: 0,
        });
        plan.words.extend(flow.words);
        plan.truncated |= flow.overflow;
        cursor = flow.end_y;
    }
    Ok(plan)
}

/// Render `s1`, a line break, then `s2`.
///
/// Clean renderings use `cfg.clean_font` and no degradation; noisy ones draw
/// a random font and run the degradation pipeline. The font shrinks down to
/// `cfg.min_size` when the text does not fit; past that it is truncated and
/// `meta.truncated` is set.
pub fn render_pair(
    s1: &str,
    s2: Option<&str>,
    noisy: bool,
    rng: &mut Rng,
    canvas: (usize, usize),
    fonts: &FontRegistry,
    cfg: &PairConfig,
) -> Result<Scan, RenderError> {
    if s1.trim().is_empty() {
        return Err(RenderError::EmptyText);
    }
    let mut font = if noisy {
        sample_font(fonts, cfg.size_range, canvas.1, rng)?
    } else {
        cfg.clean_font
    };
    check_font(fonts, font, canvas.1)?;
    let min_size = cfg.min_size.max(FontSpec::MIN_SIZE);
    let plan = loop {
        let plan = layout_pair(s1, s2, font, fonts, canvas, cfg.margin)?;
        if !plan.truncated || font.size_px <= min_size {
            break plan;
        }
        font.size_px -= 1;
    };
    let (raster, _) = rasterize(&plan, RasterBackend::Bitmap, fonts)?;
    let mut scan = Scan::new(
        raster,
        ScanMeta {
            truncated: plan.truncated,
            ..ScanMeta::default()
        },
    )?
    .with_truth(plan);
    if noisy {
        scan = degrade(&scan, &cfg.degradation, rng).0;
    }
    Ok(scan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn corpus() -> TextCorpus {
        TextCorpus::from_text(
            "the ship sailed at dawn with a cargo of sugar and rum bound for bristol\n\
             a reward of ten pounds is offered for the return of the said man\n\
             prices current at the port of kingston for the week past",
        )
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let r = layout_paragraphs(
            &TextCorpus::from_text("\n \n"),
            &mut rng_from(1),
            (64, 64),
            &FontRegistry::builtin(),
            &LayoutConfig::default(),
        );
        assert!(matches!(r, Err(RenderError::EmptyCorpus)));
    }

    #[test]
    fn unregistered_font_is_an_error() {
        let r = layout_paragraphs(
            &corpus(),
            &mut rng_from(1),
            (64, 64),
            &FontRegistry::empty(),
            &LayoutConfig::default(),
        );
        assert!(matches!(r, Err(RenderError::FontResolution(_))));
    }

    #[test]
    fn fixed_seed_gives_identical_plans() {
        let fonts = FontRegistry::builtin();
        let cfg = LayoutConfig::default();
        let a = layout_paragraphs(&corpus(), &mut rng_from(7), (128, 128), &fonts, &cfg).unwrap();
        let b = layout_paragraphs(&corpus(), &mut rng_from(7), (128, 128), &fonts, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn tall_paragraph_fills_with_one_span() {
        let long = "word ".repeat(400);
        let cfg = LayoutConfig {
            size_range: (12, 12),
            ..LayoutConfig::default()
        };
        let plan = layout_paragraphs(
            &TextCorpus::from_text(&long),
            &mut rng_from(2),
            (128, 128),
            &FontRegistry::builtin(),
            &cfg,
        )
        .unwrap();
        assert_eq!(plan.spans.len(), 1);
        assert!(plan.empty_fraction() < 0.10);
    }

    #[test]
    fn whitespace_remainder_skips_to_next_paragraph() {
        // Character offsets into a paragraph of one character + trailing
        // whitespace collapse to nothing; no zero-length span may appear.
        let cfg = LayoutConfig {
            word_aligned_offset: false,
            ..LayoutConfig::default()
        };
        let c = TextCorpus::from_text("x\nsecond paragraph here with words");
        for seed in 0..20 {
            let plan = layout_paragraphs(&c, &mut rng_from(seed), (64, 64), &FontRegistry::builtin(), &cfg).unwrap();
            assert!(plan.spans.iter().all(|s| !s.text.is_empty()));
        }
    }

    #[test]
    fn word_aligned_offsets_start_on_words() {
        let mut rng = rng_from(5);
        let p = "alpha beta gamma delta";
        for _ in 0..20 {
            let (off, rest) = start_offset(p, true, &mut rng);
            assert!(p.chars().skip(off).collect::<String>() == rest);
            assert!(["alpha", "beta", "gamma", "delta"].iter().any(|w| rest.starts_with(w)));
        }
    }

    #[test]
    fn pair_renders_two_lines_or_one() {
        let fonts = FontRegistry::builtin();
        let cfg = PairConfig::default();
        let s = render_pair(
            "a premise",
            Some("a hypothesis"),
            false,
            &mut rng_from(1),
            (128, 64),
            &fonts,
            &cfg,
        )
        .unwrap();
        let truth = s.truth.as_ref().unwrap();
        assert_eq!(truth.spans.len(), 2);
        let first_line_y = truth.words[0].origin.1;
        assert!(truth.words.iter().any(|w| w.origin.1 > first_line_y));
        let again = render_pair(
            "a premise",
            Some("a hypothesis"),
            false,
            &mut rng_from(9),
            (128, 64),
            &fonts,
            &cfg,
        )
        .unwrap();
        assert_eq!(s.pixels(), again.pixels());

        let single = render_pair("x", None, false, &mut rng_from(1), (64, 32), &fonts, &cfg).unwrap();
        let t = single.truth.unwrap();
        assert_eq!(t.spans.len(), 1);
        assert_eq!(t.words.len(), 1);
    }

    #[test]
    fn pair_overflow_is_flagged_not_fatal() {
        let fonts = FontRegistry::builtin();
        let long = "overflowing ".repeat(60);
        let s = render_pair(
            &long,
            Some(&long),
            false,
            &mut rng_from(1),
            (64, 32),
            &fonts,
            &PairConfig::default(),
        )
        .unwrap();
        assert!(s.meta.truncated);
        assert_eq!(s.truth.unwrap().spans[0].font.size_px, FontSpec::MIN_SIZE);
        assert!(matches!(
            render_pair(
                "  ",
                None,
                false,
                &mut rng_from(1),
                (64, 32),
                &fonts,
                &PairConfig::default()
            ),
            Err(RenderError::EmptyText)
        ));
    }
}
