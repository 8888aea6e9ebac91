//! Historical degradation suite.
//!
//! Degradation is split into sampling an [`AppliedTransform`] from a
//! [`DegradationConfig`] and applying it, so every transform can be stored
//! in a manifest and replayed bit-exactly. Rotation is the only effect that
//! moves content; everything else is photometric.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::masking::{boxes_to_mask, PatchGrid, PatchMask};
use crate::render::RenderPlan;
use crate::scan::{PixelBox, Raster, Scan};
use crate::seed::{rng_from, Rng};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DegradeError {
    #[error("geometric transform needs layout truth")]
    MissingTruth,
    #[error("invalid degradation config: {0}")]
    Config(String),
}

/// Enable flag plus per-scan application probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Toggle {
    pub enabled: bool,
    pub prob: f64,
}

impl Toggle {
    pub const OFF: Toggle = Toggle {
        enabled: false,
        prob: 0.0,
    };

    pub fn on(prob: f64) -> Self {
        Self { enabled: true, prob }
    }

    fn fires(&self, rng: &mut Rng) -> bool {
        self.enabled && self.prob > 0.0 && rng.gen_bool(self.prob.min(1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationConfig {
    pub bleed: Toggle,
    pub bleed_alpha: (f64, f64),
    pub salt_pepper: Toggle,
    pub sp_density: (f64, f64),
    pub blur: Toggle,
    pub blur_sigma: (f64, f64),
    pub rotation: Toggle,
    pub rotation_deg: (f64, f64),
    pub lines: Toggle,
    pub line_count: (u32, u32),
    pub stains: Toggle,
    pub stain_count: (u32, u32),
    pub holes: Toggle,
    pub hole_count: (u32, u32),
    pub bg_jitter: Toggle,
    /// Background level range, as a fraction of white.
    pub bg_level: (f64, f64),
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            bleed: Toggle::on(0.5),
            bleed_alpha: (0.1, 0.3),
            salt_pepper: Toggle::on(0.5),
            sp_density: (0.0, 0.05),
            blur: Toggle::on(0.5),
            blur_sigma: (0.2, 1.5),
            rotation: Toggle::on(0.5),
            rotation_deg: (-3.0, 3.0),
            lines: Toggle::on(0.3),
            line_count: (0, 3),
            stains: Toggle::on(0.3),
            stain_count: (0, 2),
            holes: Toggle::on(0.2),
            hole_count: (0, 2),
            bg_jitter: Toggle::on(0.5),
            bg_level: (235.0 / 255.0, 1.0),
        }
    }
}

impl DegradationConfig {
    /// Every effect off: degradation is the identity.
    pub fn disabled() -> Self {
        Self {
            bleed: Toggle::OFF,
            salt_pepper: Toggle::OFF,
            blur: Toggle::OFF,
            rotation: Toggle::OFF,
            lines: Toggle::OFF,
            stains: Toggle::OFF,
            holes: Toggle::OFF,
            bg_jitter: Toggle::OFF,
            ..Self::default()
        }
    }

    /// Default suite without rotation.
    pub fn photometric() -> Self {
        Self {
            rotation: Toggle::OFF,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DegradeError> {
        let toggles = [
            ("bleed", self.bleed),
            ("salt_pepper", self.salt_pepper),
            ("blur", self.blur),
            ("rotation", self.rotation),
            ("lines", self.lines),
            ("stains", self.stains),
            ("holes", self.holes),
            ("bg_jitter", self.bg_jitter),
        ];
        for (name, t) in toggles {
            if !(0.0..=1.0).contains(&t.prob) {
                return Err(DegradeError::Config(format!("{name}.prob outside [0, 1]")));
            }
        }
        let ranges = [
            ("bleed_alpha", self.bleed_alpha),
            ("sp_density", self.sp_density),
            ("blur_sigma", self.blur_sigma),
            ("rotation_deg", self.rotation_deg),
            ("bg_level", self.bg_level),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) {
                return Err(DegradeError::Config(format!("{name}: {lo} > {hi}")));
            }
        }
        for (name, (lo, hi)) in [
            ("line_count", self.line_count),
            ("stain_count", self.stain_count),
            ("hole_count", self.hole_count),
        ] {
            if lo > hi {
                return Err(DegradeError::Config(format!("{name}: {lo} > {hi}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stain {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub horizontal: bool,
    pub pos: usize,
    pub thickness: usize,
    pub level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hole {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaltPepper {
    pub density: f64,
    pub seed: u64,
}

/// Every parameter drawn for one degradation, sufficient for replay.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AppliedTransform {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bg_level: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleed_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub stains: Vec<Stain>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub lines: Vec<Rule>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub holes: Vec<Hole>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blur_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub salt_pepper: Option<SaltPepper>,
}

impl AppliedTransform {
    pub fn is_identity(&self) -> bool {
        *self == AppliedTransform::default()
    }

    /// True when the transform moves content (nonzero rotation).
    pub fn is_geometric(&self) -> bool {
        self.rotation_deg.is_some_and(|d| d != 0.0)
    }

    fn background(&self) -> f32 {
        self.bg_level.unwrap_or(1.0) as f32
    }
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn count(rng: &mut Rng, (lo, hi): (u32, u32)) -> u32 {
    rng.gen_range(lo..=hi.max(lo))
}

/// Draw a transform for an image of `width x height`.
pub fn sample_transform(cfg: &DegradationConfig, width: usize, height: usize, rng: &mut Rng) -> AppliedTransform {
    let (w, h) = (width as f64, height as f64);
    let mut t = AppliedTransform::default();
    if cfg.bg_jitter.fires(rng) {
        t.bg_level = Some(uniform(rng, cfg.bg_level));
    }
    if cfg.bleed.fires(rng) {
        t.bleed_alpha = Some(uniform(rng, cfg.bleed_alpha));
    }
    if cfg.stains.fires(rng) {
        for _ in 0..count(rng, cfg.stain_count) {
            t.stains.push(Stain {
                cx: rng.gen_range(0.0..w),
                cy: rng.gen_range(0.0..h),
                radius: rng.gen_range(0.1..0.4) * w.min(h),
                intensity: rng.gen_range(0.1..0.35),
            });
        }
    }
    if cfg.lines.fires(rng) {
        for _ in 0..count(rng, cfg.line_count) {
            let horizontal = rng.gen_bool(0.5);
            let extent = if horizontal { height } else { width };
            t.lines.push(Rule {
                horizontal,
                pos: rng.gen_range(0..extent.max(1)),
                thickness: rng.gen_range(1..=2),
                level: rng.gen_range(0.05..0.4),
            });
        }
    }
    if cfg.holes.fires(rng) {
        for _ in 0..count(rng, cfg.hole_count) {
            t.holes.push(Hole {
                cx: rng.gen_range(0.0..w),
                cy: rng.gen_range(0.0..h),
                rx: rng.gen_range(0.02..0.08) * w,
                ry: rng.gen_range(0.02..0.08) * h,
            });
        }
    }
    if cfg.rotation.fires(rng) {
        t.rotation_deg = Some(uniform(rng, cfg.rotation_deg));
    }
    if cfg.blur.fires(rng) {
        t.blur_sigma = Some(uniform(rng, cfg.blur_sigma));
    }
    if cfg.salt_pepper.fires(rng) {
        t.salt_pepper = Some(SaltPepper {
            density: uniform(rng, cfg.sp_density),
            seed: rng.gen(),
        });
    }
    t
}

/// `clamp((1 - alpha) * front + alpha * mirror(back))`.
pub fn bleed_through(front: &Raster, back: &Raster, alpha: f64) -> Raster {
    let mirror = back.mirrored();
    let a = alpha as f32;
    let mut out = front.clone();
    for (o, m) in out.data_mut().iter_mut().zip(mirror.data()) {
        *o = ((1.0 - a) * *o + a * m).clamp(0.0, 1.0);
    }
    out
}

fn apply_background(img: &mut Raster, level: f64) {
    let l = level as f32;
    for v in img.data_mut() {
        *v *= l;
    }
}

fn apply_stain(img: &mut Raster, s: &Stain) {
    let c = img.channels();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let d2 = ((x as f64 + 0.5 - s.cx).powi(2) + (y as f64 + 0.5 - s.cy).powi(2)) / (s.radius * s.radius);
            if d2 < 1.0 {
                let f = (1.0 - s.intensity * (1.0 - d2)) as f32;
                for ch in 0..c {
                    let v = img.get(y, x, ch);
                    img.set(y, x, ch, v * f);
                }
            }
        }
    }
}

fn apply_rule(img: &mut Raster, r: &Rule) {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let l = r.level as f32;
    for k in r.pos..(r.pos + r.thickness) {
        if r.horizontal && k < h {
            for x in 0..w {
                for ch in 0..c {
                    let v = img.get(k, x, ch);
                    img.set(k, x, ch, v.min(l));
                }
            }
        } else if !r.horizontal && k < w {
            for y in 0..h {
                for ch in 0..c {
                    let v = img.get(y, k, ch);
                    img.set(y, k, ch, v.min(l));
                }
            }
        }
    }
}

fn apply_hole(img: &mut Raster, hole: &Hole, fill: f32) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            let dx = (x as f64 + 0.5 - hole.cx) / hole.rx;
            let dy = (y as f64 + 0.5 - hole.cy) / hole.ry;
            if dx * dx + dy * dy <= 1.0 {
                for ch in 0..img.channels() {
                    img.set(y, x, ch, fill);
                }
            }
        }
    }
}

/// Rotate by `deg` about the image center with bilinear sampling; uncovered
/// pixels take `fill`.
pub fn rotate(img: &Raster, deg: f64, fill: f32) -> Raster {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (s, co) = deg.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Raster::filled(h, w, c, fill);
    for y in 0..h {
        for x in 0..w {
            // Inverse map of the output pixel center.
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let sx = co * px + s * py + cx - 0.5;
            let sy = -s * px + co * py + cy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            for ch in 0..c {
                let sample = |yy: f64, xx: f64| -> f32 {
                    if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
                        fill
                    } else {
                        img.get(yy as usize, xx as usize, ch)
                    }
                };
                let v = sample(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + sample(y0, x0 + 1.0) * fx * (1.0 - fy)
                    + sample(y0 + 1.0, x0) * (1.0 - fx) * fy
                    + sample(y0 + 1.0, x0 + 1.0) * fx * fy;
                out.set(y, x, ch, v);
            }
        }
    }
    out
}

/// Forward map of a point under [`rotate`].
pub fn rotate_point(x: f64, y: f64, deg: f64, width: usize, height: usize) -> (f64, f64) {
    let (s, co) = deg.to_radians().sin_cos();
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let (px, py) = (x - cx, y - cy);
    (co * px - s * py + cx, s * px + co * py + cy)
}

/// Separable Gaussian blur with clamped edges.
pub fn gaussian_blur(img: &Raster, sigma: f64) -> Raster {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let sum: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut tmp = Raster::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = (x as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += kv * img.get(y, xx, ch);
                }
                tmp.set(y, x, ch, acc);
            }
        }
    }
    let mut out = Raster::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = (y as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp.get(yy, x, ch);
                }
                out.set(y, x, ch, acc);
            }
        }
    }
    out
}

/// Force a `density` fraction of pixels (in expectation) to black or white.
pub fn salt_and_pepper(img: &Raster, sp: &SaltPepper) -> Raster {
    let mut rng = rng_from(sp.seed);
    let mut out = img.clone();
    let c = img.channels();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if rng.gen_bool(sp.density.clamp(0.0, 1.0)) {
                let v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                for ch in 0..c {
                    out.set(y, x, ch, v);
                }
            }
        }
    }
    out
}

/// Replay `t` on an image.
pub fn apply_transform(img: &Raster, t: &AppliedTransform) -> Raster {
    let mut out = img.clone();
    if t.is_identity() {
        return out;
    }
    if let Some(level) = t.bg_level {
        apply_background(&mut out, level);
    }
    if let Some(alpha) = t.bleed_alpha {
        out = bleed_through(&out, &out, alpha);
    }
    for s in &t.stains {
        apply_stain(&mut out, s);
    }
    for r in &t.lines {
        apply_rule(&mut out, r);
    }
    for hole in &t.holes {
        apply_hole(&mut out, hole, t.background());
    }
    if let Some(deg) = t.rotation_deg {
        if deg != 0.0 {
            out = rotate(&out, deg, t.background());
        }
    }
    if let Some(sigma) = t.blur_sigma {
        out = gaussian_blur(&out, sigma);
    }
    if let Some(sp) = &t.salt_pepper {
        out = salt_and_pepper(&out, sp);
    }
    out.clamp_unit();
    out
}

/// Move boxes by the geometric part of `t`: corners are rotated, the axis
/// aligned hull is taken and rounded outwards to whole pixels.
pub fn transport_boxes(boxes: &[PixelBox], t: &AppliedTransform, width: usize, height: usize) -> Vec<PixelBox> {
    let Some(deg) = t.rotation_deg.filter(|d| *d != 0.0) else {
        return boxes.to_vec();
    };
    boxes
        .iter()
        .map(|b| {
            let corners = [
                (b.x0 as f64, b.y0 as f64),
                (b.x1 as f64, b.y0 as f64),
                (b.x0 as f64, b.y1 as f64),
                (b.x1 as f64, b.y1 as f64),
            ];
            let pts: Vec<(f64, f64)> = corners
                .iter()
                .map(|&(x, y)| rotate_point(x, y, deg, width, height))
                .collect();
            let x0 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let x1 = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let y0 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let y1 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            PixelBox::new(x0.floor() as i64, y0.floor() as i64, x1.ceil() as i64, y1.ceil() as i64)
                .clamp_to(width, height)
        })
        .collect()
}

/// Carry a label mask through `t`.
///
/// Photometric transforms leave the mask untouched. Under rotation, the
/// truth words whose patches all lie inside `mask` are rotated about the
/// image center and re-quantized to patches.
pub fn transport_mask(
    mask: &PatchMask,
    t: &AppliedTransform,
    truth: Option<&RenderPlan>,
) -> Result<PatchMask, DegradeError> {
    if !t.is_geometric() {
        return Ok(mask.clone());
    }
    let truth = truth.ok_or(DegradeError::MissingTruth)?;
    let grid: PatchGrid = mask.grid();
    let boxes: Vec<PixelBox> = truth
        .words
        .iter()
        .map(|w| w.bbox)
        .filter(|b| {
            let m = boxes_to_mask(std::slice::from_ref(b), grid);
            !m.is_empty() && m.is_subset_of(mask)
        })
        .collect();
    let moved = transport_boxes(&boxes, t, grid.width_px(), grid.height_px());
    Ok(boxes_to_mask(&moved, grid))
}

/// Sample and apply a degradation. The returned scan's truth boxes are
/// transported into the degraded geometry.
pub fn degrade(scan: &Scan, cfg: &DegradationConfig, rng: &mut Rng) -> (Scan, AppliedTransform) {
    let t = sample_transform(cfg, scan.width(), scan.height(), rng);
    (replay(scan, &t), t)
}

/// Apply a recorded transform to a scan.
pub fn replay(scan: &Scan, t: &AppliedTransform) -> Scan {
    let pixels = apply_transform(scan.pixels(), t);
    let mut out = scan.map_pixels(pixels);
    if t.is_geometric() {
        if let Some(plan) = out.truth.as_mut() {
            let boxes: Vec<PixelBox> = plan.words.iter().map(|w| w.bbox).collect();
            let moved = transport_boxes(&boxes, t, scan.width(), scan.height());
            for (w, b) in plan.words.iter_mut().zip(moved) {
                w.bbox = b;
            }
        }
    }
    out
}
