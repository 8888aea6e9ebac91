use serde::{Deserialize, Serialize};

use super::{FontRegistry, RenderError, RenderPlan};
use crate::scan::{Raster, Scan, ScanMeta};

/// How glyph cells become pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterBackend {
    /// Binary ink: a pixel is black when its coverage reaches `INK_COVERAGE`.
    #[default]
    Bitmap,
    /// Anti-aliased: intensity is `1 - coverage`.
    Outline,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RasterStats {
    /// Characters drawn with the fallback glyph.
    pub missing_glyphs: usize,
}

/// Draw every planned word onto a white canvas.
pub fn rasterize(
    plan: &RenderPlan,
    backend: RasterBackend,
    fonts: &FontRegistry,
) -> Result<(Raster, RasterStats), RenderError> {
    let (width, height) = plan.canvas;
    let mut canvas = Raster::filled(height, width, 1, 1.0);
    let mut stats = RasterStats::default();
    for word in &plan.words {
        let face = fonts.get(word.font.family_id)?;
        let size = word.font.size_px;
        let mut pen = word.origin.0;
        for ch in word.text.chars() {
            if !face.has_glyph(ch) {
                stats.missing_glyphs += 1;
            }
            let g = face.glyph(ch, size);
            for gy in 0..g.height {
                let py = word.origin.1 + gy as i64;
                if py < 0 || py >= height as i64 {
                    continue;
                }
                for gx in 0..g.width {
                    let px = pen + gx as i64;
                    if px < 0 || px >= width as i64 {
                        continue;
                    }
                    let (px, py) = (px as usize, py as usize);
                    match backend {
                        RasterBackend::Bitmap => {
                            if g.is_ink(gx, gy) {
                                canvas.set(py, px, 0, 0.0);
                            }
                        }
                        RasterBackend::Outline => {
                            let v = 1.0 - g.at(gx, gy);
                            if v < canvas.get(py, px, 0) {
                                canvas.set(py, px, 0, v);
                            }
                        }
                    }
                }
            }
            pen += g.width as i64;
        }
    }
    Ok((canvas, stats))
}

impl RenderPlan {
    /// Rasterize into a [`Scan`] carrying this plan as truth.
    pub fn to_scan(
        &self,
        backend: RasterBackend,
        fonts: &FontRegistry,
        meta: ScanMeta,
    ) -> Result<(Scan, RasterStats), RenderError> {
        let (raster, stats) = rasterize(self, backend, fonts)?;
        let meta = ScanMeta {
            truncated: meta.truncated || self.truncated,
            ..meta
        };
        Ok((Scan::new(raster, meta)?.with_truth(self.clone()), stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{render_block, FontSpec};

    #[test]
    fn empty_plan_is_background() {
        let (r, s) = rasterize(
            &RenderPlan::empty(32, 16),
            RasterBackend::Bitmap,
            &FontRegistry::builtin(),
        )
        .unwrap();
        assert!(r.data().iter().all(|&v| v == 1.0));
        assert_eq!(s.missing_glyphs, 0);
    }

    #[test]
    fn word_box_is_the_dark_pixel_bounding_box() {
        let fonts = FontRegistry::builtin();
        let plan = render_block("ship", FontSpec::new(0, 16), (64, 32), &fonts, 0).unwrap();
        assert_eq!(plan.words.len(), 1);
        let (r, _) = rasterize(&plan, RasterBackend::Bitmap, &fonts).unwrap();
        // Independent scan for the dark-pixel bounding box.
        let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for y in 0..r.height() {
            for x in 0..r.width() {
                if r.get(y, x, 0) < 0.5 {
                    x0 = x0.min(x as i64);
                    y0 = y0.min(y as i64);
                    x1 = x1.max(x as i64 + 1);
                    y1 = y1.max(y as i64 + 1);
                }
            }
        }
        let b = plan.words[0].bbox;
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (x0, y0, x1, y1));
    }

    #[test]
    fn backends_share_boxes_but_not_pixels() {
        let fonts = FontRegistry::builtin();
        let plan = render_block("bound for bristol", FontSpec::new(3, 13), (128, 32), &fonts, 2).unwrap();
        let (a, sa) = plan
            .to_scan(RasterBackend::Bitmap, &fonts, ScanMeta::default())
            .unwrap();
        let (b, _) = plan
            .to_scan(RasterBackend::Outline, &fonts, ScanMeta::default())
            .unwrap();
        assert_eq!(a.truth, b.truth);
        assert_ne!(a.pixels(), b.pixels());
        assert_eq!(sa.missing_glyphs, 0);
    }

    #[test]
    fn missing_glyphs_are_counted() {
        let fonts = FontRegistry::builtin();
        let plan = render_block("café", FontSpec::new(0, 12), (64, 16), &fonts, 0).unwrap();
        let (_, s) = rasterize(&plan, RasterBackend::Bitmap, &fonts).unwrap();
        assert_eq!(s.missing_glyphs, 1);
    }
}
