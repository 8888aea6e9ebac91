//! Synthetic scan generation: paragraph layout, word boxes and rasterization.

mod font;
mod layout;
mod raster;

#[cfg(feature = "ttf")]
pub use font::OutlineFace;
pub use font::{BitmapFace, BitmapStyle, FontFace, FontRegistry, FontSpec, GlyphCell, FALLBACK_CHAR, INK_COVERAGE};
pub use layout::{flow_text, layout_paragraphs, render_block, render_pair, FlowResult, LayoutConfig, PairConfig};
pub use raster::{rasterize, RasterBackend, RasterStats};

use serde::{Deserialize, Serialize};

use crate::scan::{ImageError, PixelBox};

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("corpus has no nonempty paragraph")]
    EmptyCorpus,
    #[error("font family {0} is not registered")]
    FontResolution(usize),
    #[error("font size {size}px outside [8, {max}]")]
    FontSize { size: u32, max: usize },
    #[error("could not load font: {0}")]
    FontLoad(String),
    #[error("first text of a pair must be nonempty")]
    EmptyText,
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Paragraph source: UTF-8 text split on newlines, blank lines dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TextCorpus {
    paragraphs: Vec<String>,
}

impl TextCorpus {
    pub fn from_text(text: &str) -> Self {
        let paragraphs = text
            .split('\n')
            .map(|p| p.split_whitespace().collect::<Vec<_>>().join(" "))
            .filter(|p| !p.is_empty())
            .collect();
        Self { paragraphs }
    }

    pub fn from_paragraphs<I, S>(paragraphs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_text(
            &paragraphs
                .into_iter()
                .map(Into::into)
                .collect::<Vec<String>>()
                .join("\n"),
        )
    }

    pub fn len(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.is_empty()
    }

    pub fn paragraph(&self, i: usize) -> &str {
        &self.paragraphs[i]
    }
}

/// How a span entered the plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    /// First span, starting at a random in-paragraph offset.
    Start,
    /// Same font, next paragraph.
    Continue,
    /// Fresh paragraph and fresh font.
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSpan {
    pub text: String,
    pub font: FontSpec,
    pub origin_y: u32,
    pub kind: SpanKind,
    /// Source paragraph index, when the span came from a corpus.
    pub paragraph: Option<usize>,
    /// Character offset of `text` inside the source paragraph.
    pub offset: usize,
}

/// A word placed on the canvas. `origin` is the top-left of its first glyph
/// cell; `bbox` is the tight box of its ink, clipped to the canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedWord {
    pub text: String,
    pub font: FontSpec,
    pub origin: (i64, i64),
    pub bbox: PixelBox,
    pub span: usize,
}

/// Resolved layout of a scan before rasterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderPlan {
    /// `(width, height)` in pixels.
    pub canvas: (usize, usize),
    pub spans: Vec<PlanSpan>,
    pub words: Vec<PlacedWord>,
    /// Some text did not fit the canvas.
    #[serde(default)]
    pub truncated: bool,
}

impl RenderPlan {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            canvas: (width, height),
            spans: Vec::new(),
            words: Vec::new(),
            truncated: false,
        }
    }

    pub fn word_boxes(&self) -> impl Iterator<Item = (&str, PixelBox)> {
        self.words.iter().map(|w| (w.text.as_str(), w.bbox))
    }

    /// Lowest inked row + 1, or 0 for a plan with no words.
    pub fn ink_bottom(&self) -> usize {
        self.words.iter().map(|w| w.bbox.y1.max(0) as usize).max().unwrap_or(0)
    }

    /// Fraction of canvas rows below the lowest ink.
    pub fn empty_fraction(&self) -> f64 {
        let h = self.canvas.1;
        if h == 0 {
            return 0.0;
        }
        (h - self.ink_bottom().min(h)) as f64 / h as f64
    }

    /// Words joined with single spaces, in reading order.
    pub fn text(&self) -> String {
        self.words.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ")
    }

    /// Shift every word and span down by `dy` pixels onto a canvas of
    /// `height`; words whose ink leaves the canvas are dropped.
    pub fn shifted_down(&self, dy: i64, height: usize) -> RenderPlan {
        let width = self.canvas.0;
        let words = self
            .words
            .iter()
            .filter_map(|w| {
                let bbox = w.bbox.translate(0, dy).clamp_to(width, height);
                (!bbox.is_empty()).then(|| PlacedWord {
                    origin: (w.origin.0, w.origin.1 + dy),
                    bbox,
                    ..w.clone()
                })
            })
            .collect();
        let spans = self
            .spans
            .iter()
            .map(|s| PlanSpan {
                origin_y: (i64::from(s.origin_y) + dy).max(0) as u32,
                ..s.clone()
            })
            .collect();
        RenderPlan {
            canvas: (width, height),
            spans,
            words,
            truncated: self.truncated,
        }
    }
}
