//! Patch lattice, patch masks, 2D span masking and pixel-to-patch labelling.

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::scan::{PixelBox, PATCH_SIZE};
use crate::seed::Rng;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("image {height}x{width} is not divisible into {patch}px patches")]
    Grid { height: usize, width: usize, patch: usize },
    #[error("malformed mask encoding: {0}")]
    Encoding(String),
    #[error("mask grid {0} does not match {1}")]
    GridMismatch(PatchGrid, PatchGrid),
}

/// Patch lattice over an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

impl fmt::Display for PatchGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}@{}", self.rows, self.cols, self.patch_size)
    }
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            patch_size: PATCH_SIZE,
        }
    }

    pub fn for_image(height: usize, width: usize, patch_size: usize) -> Result<Self, MaskError> {
        if patch_size == 0 || !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
            return Err(MaskError::Grid {
                height,
                width,
                patch: patch_size,
            });
        }
        Ok(Self {
            rows: height / patch_size,
            cols: width / patch_size,
            patch_size,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height_px(&self) -> usize {
        self.rows * self.patch_size
    }

    pub fn width_px(&self) -> usize {
        self.cols * self.patch_size
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }
}

/// Boolean grid over the patch lattice, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PatchMask {
    grid: PatchGrid,
    bits: Vec<bool>,
}

impl PatchMask {
    pub fn empty(grid: PatchGrid) -> Self {
        Self {
            grid,
            bits: vec![false; grid.len()],
        }
    }

    pub fn from_bits(grid: PatchGrid, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == grid.len()).then_some(Self { grid, bits })
    }

    pub fn from_cells(grid: PatchGrid, cells: &[(usize, usize)]) -> Self {
        let mut m = Self::empty(grid);
        for &(r, c) in cells {
            m.set(r, c, true);
        }
        m
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[self.grid.index(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        let i = self.grid.index(row, col);
        self.bits[i] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.grid.len() as f64
    }

    /// Row-major indices of set patches.
    pub fn set_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// Row-major indices of clear patches.
    pub fn clear_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (!b).then_some(i))
            .collect()
    }

    pub fn intersection_count(&self, other: &PatchMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_count(&self, other: &PatchMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count()
    }

    pub fn is_subset_of(&self, other: &PatchMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    pub fn union_with(&mut self, other: &PatchMask) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }

    /// Move every bit `rows` patch rows down onto `grid`; bits falling off the
    /// bottom are dropped.
    pub fn shifted_down(&self, rows: usize, grid: PatchGrid) -> PatchMask {
        let mut out = PatchMask::empty(grid);
        for r in 0..self.grid.rows {
            let nr = r + rows;
            if nr >= grid.rows {
                break;
            }
            for c in 0..self.grid.cols.min(grid.cols) {
                if self.get(r, c) {
                    out.set(nr, c, true);
                }
            }
        }
        out
    }

    /// Run-length encoding `"{rows}x{cols}:r0,r1,..."`, runs alternate
    /// starting with clear patches.
    pub fn to_rle(&self) -> String {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        let body: Vec<String> = runs.iter().map(|r| r.to_string()).collect();
        format!("{}x{}:{}", self.grid.rows, self.grid.cols, body.join(","))
    }

    pub fn from_rle(s: &str, patch_size: usize) -> Result<PatchMask, MaskError> {
        let bad = || MaskError::Encoding(s.to_string());
        let (dims, body) = s.split_once(':').ok_or_else(bad)?;
        let (r, c) = dims.split_once('x').ok_or_else(bad)?;
        let grid = PatchGrid {
            rows: r.parse().map_err(|_| bad())?,
            cols: c.parse().map_err(|_| bad())?,
            patch_size,
        };
        let mut bits = Vec::with_capacity(grid.len());
        let mut value = false;
        for run in body.split(',') {
            let n: usize = run.trim().parse().map_err(|_| bad())?;
            bits.extend(std::iter::repeat_n(value, n));
            value = !value;
        }
        PatchMask::from_bits(grid, bits).ok_or_else(bad)
    }
}

impl Serialize for PatchMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_rle())
    }
}

impl<'de> Deserialize<'de> for PatchMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PatchMask::from_rle(&s, PATCH_SIZE).map_err(serde::de::Error::custom)
    }
}

/// Patch-aligned rectangle; `row`/`col` is the top-left patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanMaskConfig {
    pub ratio: f64,
    /// Inclusive rectangle width range in patches.
    pub width: (usize, usize),
    /// Inclusive rectangle height range in patches.
    pub height: (usize, usize),
    /// Unmask random patches until the count is exactly `round(ratio * P)`.
    pub trim: bool,
}

impl Default for SpanMaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.28,
            width: (2, 6),
            height: (2, 4),
            trim: true,
        }
    }
}

fn clamp_range((lo, hi): (usize, usize), max: usize) -> (usize, usize) {
    let hi = hi.clamp(1, max.max(1));
    let lo = lo.clamp(1, hi);
    (lo, hi)
}

/// Sample a 2D span mask and return the rectangles that produced it.
pub fn sample_span_mask_with_rects(
    grid: PatchGrid,
    cfg: &SpanMaskConfig,
    rng: &mut Rng,
) -> (PatchMask, Vec<PatchRect>) {
    let mut mask = PatchMask::empty(grid);
    let mut rects = Vec::new();
    if grid.is_empty() || cfg.ratio <= 0.0 {
        return (mask, rects);
    }
    let (wlo, whi) = clamp_range(cfg.width, grid.cols);
    let (hlo, hhi) = clamp_range(cfg.height, grid.rows);
    let total = grid.len() as f64;
    let mut count = 0usize;
    while (count as f64) < cfg.ratio * total {
        let width = rng.gen_range(wlo..=whi);
        let height = rng.gen_range(hlo..=hhi);
        let row = rng.gen_range(0..=grid.rows - height);
        let col = rng.gen_range(0..=grid.cols - width);
        for r in row..row + height {
            for c in col..col + width {
                if !mask.get(r, c) {
                    mask.set(r, c, true);
                    count += 1;
                }
            }
        }
        rects.push(PatchRect {
            row,
            col,
            height,
            width,
        });
    }
    if cfg.trim {
        let target = (cfg.ratio * total).round() as usize;
        let mut set = mask.set_indices();
        while set.len() > target {
            let k = rng.gen_range(0..set.len());
            let idx = set.swap_remove(k);
            mask.bits[idx] = false;
        }
    }
    (mask, rects)
}

/// Sample a 2D span mask over `grid`.
pub fn sample_span_mask(grid: PatchGrid, cfg: &SpanMaskConfig, rng: &mut Rng) -> PatchMask {
    sample_span_mask_with_rects(grid, cfg, rng).0
}

/// Set every patch whose pixel area intersects any box with positive area.
pub fn boxes_to_mask(boxes: &[PixelBox], grid: PatchGrid) -> PatchMask {
    let mut mask = PatchMask::empty(grid);
    let ps = grid.patch_size as i64;
    for b in boxes {
        let b = b.clamp_to(grid.width_px(), grid.height_px());
        if b.is_empty() {
            continue;
        }
        let c0 = (b.x0 / ps) as usize;
        let c1 = ((b.x1 - 1) / ps) as usize;
        let r0 = (b.y0 / ps) as usize;
        let r1 = ((b.y1 - 1) / ps) as usize;
        for r in r0..=r1 {
            for c in c0..=c1 {
                mask.set(r, c, true);
            }
        }
    }
    mask
}
