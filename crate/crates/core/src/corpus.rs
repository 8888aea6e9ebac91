//! Page ingestion: column linearization, sliding-window crops and
//! page-level train/validation splits.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::manifest::ManifestEntry;
use crate::scan::{ImageError, PixelBox, Raster, Scan, ScanMeta};
use crate::seed::Rng;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("page has no regions")]
    NoRegions,
    #[error("reading order {0:?} is not a permutation of 0..n")]
    ReadingOrder(Vec<usize>),
    #[error("region {0:?} lies outside the {1}x{2} page")]
    OutOfBounds(PixelBox, usize, usize),
    #[error("every region is degenerate")]
    AllDegenerate,
    #[error("page is blank")]
    NoInk,
    #[error("strip width {strip} does not match window {window}")]
    StripWidth { strip: usize, window: usize },
    #[error("stride must be positive")]
    Stride,
    #[error("validation fraction {0} outside (0, 1)")]
    Fraction(f64),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub rect: PixelBox,
    pub order: usize,
}

/// Ordered regions of one page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRegions {
    pub page_id: String,
    pub width: usize,
    pub height: usize,
    pub regions: Vec<Region>,
}

impl PageRegions {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.regions.is_empty() {
            return Err(CorpusError::NoRegions);
        }
        let mut order: Vec<usize> = self.regions.iter().map(|r| r.order).collect();
        order.sort_unstable();
        if order.iter().enumerate().any(|(i, &o)| i != o) {
            return Err(CorpusError::ReadingOrder(
                self.regions.iter().map(|r| r.order).collect(),
            ));
        }
        for r in &self.regions {
            let b = r.rect;
            if b.x0 < 0 || b.y0 < 0 || b.x1 > self.width as i64 || b.y1 > self.height as i64 {
                return Err(CorpusError::OutOfBounds(b, self.width, self.height));
            }
        }
        Ok(())
    }

    /// Regions sorted by reading order.
    pub fn in_reading_order(&self) -> Vec<Region> {
        let mut r = self.regions.clone();
        r.sort_by_key(|r| r.order);
        r
    }
}

/// Area-averaging resample, exact for integer and fractional ratios.
pub fn resize_area(img: &Raster, height: usize, width: usize) -> Raster {
    if img.height() == height && img.width() == width {
        return img.clone();
    }
    let tmp = resample_axis(img, width, true);
    resample_axis(&tmp, height, false)
}

fn resample_axis(img: &Raster, n_out: usize, horizontal: bool) -> Raster {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let n_in = if horizontal { w } else { h };
    let (oh, ow) = if horizontal { (h, n_out) } else { (n_out, w) };
    if n_in == n_out {
        return img.clone();
    }
    let mut out = Raster::filled(oh, ow, c, 0.0);
    let scale = n_in as f64 / n_out as f64;
    // Per output index, source indices with overlap weights.
    let taps: Vec<Vec<(usize, f32)>> = (0..n_out)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut t = Vec::new();
            for s in (a.floor() as usize)..(b.ceil() as usize).min(n_in) {
                let wgt = (b.min(s as f64 + 1.0) - a.max(s as f64)) / scale;
                if wgt > 0.0 {
                    t.push((s, wgt as f32));
                }
            }
            t
        })
        .collect();
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let taps = if horizontal { &taps[x] } else { &taps[y] };
                let v: f32 = taps
                    .iter()
                    .map(|&(s, wgt)| {
                        wgt * if horizontal {
                            img.get(y, s, ch)
                        } else {
                            img.get(s, x, ch)
                        }
                    })
                    .sum();
                out.set(y, x, ch, v);
            }
        }
    }
    out
}

/// Result of [`linearize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Strip {
    pub pixels: Raster,
    /// Zero-area regions that were skipped.
    pub skipped: usize,
}

/// Crop every region, resize it to `target_width` keeping its aspect ratio
/// and stack the crops top to bottom in reading order.
pub fn linearize(page: &Raster, regions: &PageRegions, target_width: usize) -> Result<Strip, CorpusError> {
    regions.validate()?;
    let mut parts = Vec::new();
    let mut skipped = 0;
    for r in regions.in_reading_order() {
        if r.rect.is_empty() {
            skipped += 1;
            continue;
        }
        let crop = page.crop(&r.rect);
        let h = (crop.height() as f64 * target_width as f64 / crop.width() as f64).round();
        parts.push(resize_area(&crop, (h as usize).max(1), target_width));
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} degenerate region(s)", regions.page_id);
    }
    let pixels = Raster::vstack(&parts).ok_or(CorpusError::AllDegenerate)?;
    Ok(Strip { pixels, skipped })
}

/// Offsets of the windows [`sliding_crops`] takes from a strip of `height`.
pub fn crop_offsets(height: usize, window: usize, stride: usize, anchor_tail: bool) -> Vec<usize> {
    if height <= window {
        return vec![0];
    }
    let mut offsets: Vec<usize> = (0..=(height - window) / stride).map(|i| i * stride).collect();
    let last = *offsets.last().unwrap_or(&0);
    if anchor_tail && last + window < height {
        offsets.push(height - window);
    }
    offsets
}

/// Square `window` crops of a strip at multiples of `stride`. A strip
/// shorter than the window yields one crop padded with white at the bottom.
/// With `anchor_tail` a final bottom-aligned crop covers any remainder.
pub fn sliding_crops(
    strip: &Raster,
    window: usize,
    stride: usize,
    anchor_tail: bool,
    meta: &ScanMeta,
) -> Result<Vec<(usize, Scan)>, CorpusError> {
    if strip.width() != window {
        return Err(CorpusError::StripWidth {
            strip: strip.width(),
            window,
        });
    }
    if stride == 0 {
        return Err(CorpusError::Stride);
    }
    crop_offsets(strip.height(), window, stride, anchor_tail)
        .into_iter()
        .map(|y| {
            let px = strip.rows_window(y, window, 1.0);
            Ok((y, Scan::new(px, meta.clone())?))
        })
        .collect()
}

/// Minimum width of an interior whitespace valley treated as a gutter.
pub const MIN_GUTTER: usize = 16;

/// Split a page into full-height columns at the centers of interior
/// ink-free vertical valleys at least `min_gutter` pixels wide.
pub fn detect_columns(page: &Raster, page_id: &str, min_gutter: usize) -> Result<PageRegions, CorpusError> {
    let (h, w) = (page.height(), page.width());
    let profile: Vec<usize> = (0..w).map(|x| (0..h).filter(|&y| page.is_ink(y, x)).count()).collect();
    let first = profile.iter().position(|&n| n > 0).ok_or(CorpusError::NoInk)?;
    let last = profile.iter().rposition(|&n| n > 0).unwrap_or(first);
    let mut cuts = Vec::new();
    let mut x = first;
    while x <= last {
        if profile[x] == 0 {
            let start = x;
            while profile[x] == 0 {
                x += 1;
            }
            if x - start >= min_gutter {
                cuts.push((start + x) / 2);
            }
        } else {
            x += 1;
        }
    }
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(w);
    let regions = bounds
        .windows(2)
        .enumerate()
        .map(|(i, b)| Region {
            rect: PixelBox::new(b[0] as i64, 0, b[1] as i64, h as i64),
            order: i,
        })
        .collect();
    Ok(PageRegions {
        page_id: page_id.to_string(),
        width: w,
        height: h,
        regions,
    })
}

/// A dataset manifest with its validation share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split_fraction: f64,
}

impl DatasetManifest {
    pub fn pages(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.source_id.as_str()).collect()
    }

    pub fn pages_in(&self, split: &str) -> BTreeSet<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.source_id.as_str())
            .collect()
    }
}

/// Assign whole pages to `"val"` or `"train"`: `round(fraction * pages)`
/// pages go to validation, but at least one page always stays in training.
pub fn split_dataset(manifest: &DatasetManifest, fraction: f64, rng: &mut Rng) -> Result<DatasetManifest, CorpusError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CorpusError::Fraction(fraction));
    }
    let mut pages: Vec<&str> = manifest.pages().into_iter().collect();
    let n = pages.len();
    let mut n_val = (fraction * n as f64).round() as usize;
    if n_val >= n {
        n_val = n.saturating_sub(1);
    }
    if n == 1 {
        log::warn!("only one source page; it is assigned to train");
    }
    pages.shuffle(rng);
    let val: BTreeSet<&str> = pages[..n_val].iter().copied().collect();
    let entries = manifest
        .entries
        .iter()
        .map(|e| ManifestEntry {
            split: if val.contains(e.source_id.as_str()) {
                "val"
            } else {
                "train"
            }
            .to_string(),
            ..e.clone()
        })
        .collect();
    Ok(DatasetManifest {
        entries,
        split_fraction: fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn ink_block(img: &mut Raster, b: PixelBox) {
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                img.set(y as usize, x as usize, 0, 0.0);
            }
        }
    }

    #[test]
    fn crop_count_examples() {
        assert_eq!(crop_offsets(368, 368, 128, false), vec![0]);
        assert_eq!(crop_offsets(1000, 368, 128, false), vec![0, 128, 256, 384, 512]);
        assert_eq!(crop_offsets(1000, 368, 128, true), vec![0, 128, 256, 384, 512, 632]);
        assert_eq!(crop_offsets(100, 368, 128, false), vec![0]);
    }

    #[test]
    fn short_strip_is_padded() {
        let mut strip = Raster::filled(20, 32, 1, 1.0);
        strip.set(19, 0, 0, 0.0);
        let crops = sliding_crops(&strip, 32, 16, false, &ScanMeta::default()).unwrap();
        assert_eq!(crops.len(), 1);
        let s = &crops[0].1;
        assert_eq!((s.height(), s.width()), (32, 32));
        assert_eq!(s.pixels().get(19, 0, 0), 0.0);
        assert_eq!(s.pixels().get(31, 0, 0), 1.0);
        assert!(sliding_crops(&strip, 48, 16, false, &ScanMeta::default()).is_err());
    }

    #[test]
    fn linearize_respects_order_and_scale() {
        let mut page = Raster::filled(40, 60, 1, 1.0);
        // Three 20-wide regions with distinct ink rows.
        for (i, x0) in [0i64, 20, 40].iter().enumerate() {
            ink_block(&mut page, PixelBox::new(*x0, i as i64 * 4, x0 + 20, i as i64 * 4 + 2));
        }
        let regions = PageRegions {
            page_id: "p".into(),
            width: 60,
            height: 40,
            regions: [0i64, 20, 40]
                .iter()
                .zip([2, 0, 1])
                .map(|(&x0, order)| Region {
                    rect: PixelBox::new(x0, 0, x0 + 20, 40),
                    order,
                })
                .collect(),
        };
        let strip = linearize(&page, &regions, 20).unwrap();
        assert_eq!(strip.pixels.height(), 120);
        for (band, region) in [1usize, 2, 0].iter().enumerate() {
            let crop = page.crop(&PixelBox::new(*region as i64 * 20, 0, *region as i64 * 20 + 20, 40));
            let got = strip
                .pixels
                .crop(&PixelBox::new(0, band as i64 * 40, 20, band as i64 * 40 + 40));
            assert_eq!(got, crop);
        }
    }

    #[test]
    fn linearize_aspect_arithmetic() {
        let page = Raster::filled(100, 1000, 1, 1.0);
        let regions = PageRegions {
            page_id: "p".into(),
            width: 1000,
            height: 100,
            regions: vec![
                Region {
                    rect: PixelBox::new(0, 0, 736, 40),
                    order: 0,
                },
                Region {
                    rect: PixelBox::new(800, 0, 984, 40),
                    order: 1,
                },
                Region {
                    rect: PixelBox::new(5, 5, 5, 9),
                    order: 2,
                },
            ],
        };
        let strip = linearize(&page, &regions, 368).unwrap();
        assert_eq!(strip.pixels.height(), 20 + 80);
        assert_eq!(strip.skipped, 1);
    }

    #[test]
    fn bad_reading_order_is_rejected() {
        let regions = PageRegions {
            page_id: "p".into(),
            width: 10,
            height: 10,
            regions: vec![
                Region {
                    rect: PixelBox::new(0, 0, 5, 5),
                    order: 0,
                },
                Region {
                    rect: PixelBox::new(5, 0, 10, 5),
                    order: 0,
                },
            ],
        };
        assert!(matches!(regions.validate(), Err(CorpusError::ReadingOrder(_))));
    }

    #[test]
    fn resize_preserves_mean() {
        let mut img = Raster::filled(30, 50, 1, 1.0);
        ink_block(&mut img, PixelBox::new(3, 4, 41, 17));
        let out = resize_area(&img, 21, 35);
        let m0 = img.ink_mass() / (30.0 * 50.0);
        let m1 = out.ink_mass() / (21.0 * 35.0);
        assert!((m0 - m1).abs() < 1e-5, "{m0} vs {m1}");
    }

    #[test]
    fn two_column_page_splits_in_gutter() {
        let mut page = Raster::filled(64, 200, 1, 1.0);
        ink_block(&mut page, PixelBox::new(10, 5, 80, 60));
        ink_block(&mut page, PixelBox::new(120, 5, 190, 60));
        let r = detect_columns(&page, "p", MIN_GUTTER).unwrap();
        assert_eq!(r.regions.len(), 2);
        let cut = r.regions[0].rect.x1;
        assert!((80..120).contains(&cut));
        assert_eq!(r.regions[1].rect.x0, cut);
        assert_eq!(r.regions[1].rect.x1, 200);

        let mut single = Raster::filled(64, 200, 1, 1.0);
        ink_block(&mut single, PixelBox::new(10, 5, 190, 60));
        let r = detect_columns(&single, "p", MIN_GUTTER).unwrap();
        assert_eq!(r.regions[0].rect, PixelBox::new(0, 0, 200, 64));

        let blank = Raster::filled(64, 200, 1, 1.0);
        assert!(matches!(
            detect_columns(&blank, "p", MIN_GUTTER),
            Err(CorpusError::NoInk)
        ));
    }

    fn manifest(pages: usize, crops: usize) -> DatasetManifest {
        let entries = (0..pages)
            .flat_map(|p| {
                (0..crops).map(move |c| {
                    let mut e = ManifestEntry::new(format!("{p}_{c}.png"), 0, "");
                    e.source_id = format!("page{p:03}");
                    e.crop_offset = Some(c * 128);
                    e
                })
            })
            .collect();
        DatasetManifest {
            entries,
            split_fraction: 0.0,
        }
    }

    #[test]
    fn split_is_by_page() {
        let m = manifest(100, 3);
        let s = split_dataset(&m, 0.05, &mut rng_from(9)).unwrap();
        let val = s.pages_in("val");
        let train = s.pages_in("train");
        assert_eq!(val.len(), 5);
        assert!(val.is_disjoint(&train));
        let again = split_dataset(&m, 0.05, &mut rng_from(9)).unwrap();
        assert_eq!(s, again);

        let one = split_dataset(&manifest(1, 2), 0.05, &mut rng_from(1)).unwrap();
        assert!(one.entries.iter().all(|e| e.split == "train"));
        assert!(split_dataset(&m, 1.0, &mut rng_from(1)).is_err());
    }
}
