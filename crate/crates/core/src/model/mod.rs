//! Patch masked autoencoder with sequence and patch classification heads.
//!
//! The encoder sees only visible patches plus their fixed 2D sinusoidal
//! positions; the decoder re-inserts a learned mask token at every hidden
//! position and predicts all patch pixels. There is no class token: both
//! heads and embeddings pool or read final-layer patch embeddings.

mod checkpoint;
mod optim;
pub mod tape;
mod train;

pub use checkpoint::{fingerprint, from_bytes, load_checkpoint, save_checkpoint, to_bytes, CheckpointError};
pub use optim::{AdamW, OptimState, Schedule};
pub use tape::{Gradients, Scalar, Tape, Var};
pub use train::{loss_and_grads, train_step, Example, Target};

use ndarray::{Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::masking::{PatchGrid, PatchMask};
use crate::scan::{Raster, PATCH_SIZE};
use crate::seed::{rng_from, Rng};
use tape::c;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image {got:?} does not match model input {want:?}")]
    ShapeMismatch {
        got: (usize, usize, usize),
        want: (usize, usize, usize),
    },
    #[error("mask grid {got} does not match model grid {want}")]
    MaskGrid { got: PatchGrid, want: PatchGrid },
    #[error("every patch is masked; the encoder has no input")]
    AllMasked,
    #[error("model has no {0} head")]
    HeadMissing(&'static str),
    #[error("label {label} outside {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: u64 },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub width: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dec_width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub norm_pix: bool,
    pub dropout: f64,
    /// Sequence head size: `K >= 2` classes, or 1 for regression.
    pub seq_head: Option<usize>,
    pub patch_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: PATCH_SIZE,
            image_h: 64,
            image_w: 64,
            channels: 1,
            width: 64,
            enc_layers: 2,
            dec_layers: 1,
            dec_width: 64,
            heads: 4,
            mlp_ratio: 4,
            norm_pix: true,
            dropout: 0.0,
            seq_head: None,
            patch_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0
            || !self.image_h.is_multiple_of(self.patch_size)
            || !self.image_w.is_multiple_of(self.patch_size)
        {
            return err(format!(
                "image {}x{} is not a multiple of patch size {}",
                self.image_h, self.image_w, self.patch_size
            ));
        }
        if self.image_h == 0 || self.image_w == 0 {
            return err("empty image".into());
        }
        if !matches!(self.channels, 1 | 3) {
            return err(format!("channels must be 1 or 3, got {}", self.channels));
        }
        for (name, w) in [("width", self.width), ("dec_width", self.dec_width)] {
            if self.heads == 0 || w % self.heads != 0 {
                return err(format!("{name} {w} not divisible by heads {}", self.heads));
            }
            if w % 4 != 0 {
                return err(format!("{name} {w} must be a multiple of 4 for 2D positions"));
            }
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.seq_head == Some(0) {
            return err("sequence head needs at least one output".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid {
            rows: self.image_h / self.patch_size,
            cols: self.image_w / self.patch_size,
            patch_size: self.patch_size,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid().len()
    }

    /// Values per flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Number of trainable scalars, in closed form.
    pub fn param_count(&self) -> usize {
        let block = |d: usize| {
            let h = d * self.mlp_ratio;
            4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d)
        };
        let (d, dd, pd) = (self.width, self.dec_width, self.patch_dim());
        let mut n = pd * d + d;
        n += self.enc_layers * block(d) + 2 * d;
        n += d * dd + dd + dd;
        n += self.dec_layers * block(dd) + 2 * dd;
        n += dd * pd + pd;
        if let Some(k) = self.seq_head {
            n += d * k + k;
        }
        if self.patch_head {
            n += d + 1;
        }
        n
    }
}

/// Fixed 2D sinusoidal table, one row per patch in row-major order: the
/// first half of each row encodes the patch row, the second the column.
pub fn sincos_2d(grid: PatchGrid, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let quarter = half / 2;
    let mut out = Array2::zeros((grid.len(), dim));
    for r in 0..grid.rows {
        for col in 0..grid.cols {
            let i = grid.index(r, col);
            for (offset, pos) in [(0, r), (half, col)] {
                for k in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    out[[i, offset + k]] = (pos as f64 * omega).sin();
                    out[[i, offset + quarter + k]] = (pos as f64 * omega).cos();
                }
            }
        }
    }
    out
}

/// Flatten an image to `P x patch_size^2 * C`, patches row-major and pixels
/// row-major then channel within each patch.
pub fn patchify<T: Scalar>(img: &Raster, grid: PatchGrid) -> Result<Array2<T>, ModelError> {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    if h != grid.height_px() || w != grid.width_px() {
        return Err(ModelError::ShapeMismatch {
            got: (h, w, ch),
            want: (grid.height_px(), grid.width_px(), ch),
        });
    }
    let ps = grid.patch_size;
    let mut out = Array2::zeros((grid.len(), ps * ps * ch));
    for r in 0..grid.rows {
        for cidx in 0..grid.cols {
            let mut row = out.row_mut(grid.index(r, cidx));
            let mut j = 0;
            for y in 0..ps {
                for x in 0..ps {
                    for k in 0..ch {
                        row[j] = c(f64::from(img.get(r * ps + y, cidx * ps + x, k)));
                        j += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Array2<T>, grid: PatchGrid, channels: usize) -> Raster {
    let ps = grid.patch_size;
    let mut img = Raster::filled(grid.height_px(), grid.width_px(), channels, 0.0);
    for r in 0..grid.rows {
        for cidx in 0..grid.cols {
            let row = patches.row(grid.index(r, cidx));
            let mut j = 0;
            for y in 0..ps {
                for x in 0..ps {
                    for k in 0..channels {
                        img.set(r * ps + y, cidx * ps + x, k, row[j].to_f32().unwrap_or(0.0));
                        j += 1;
                    }
                }
            }
        }
    }
    img
}

const NORM_PIX_EPS: f64 = 1e-6;

/// Per-patch `(mean, std)` and the normalized targets.
pub fn normalize_patches<T: Scalar>(patches: &Array2<T>) -> (Array2<T>, Vec<(T, T)>) {
    let d: T = c(patches.ncols() as f64);
    let mut out = patches.clone();
    let mut stats = Vec::with_capacity(patches.nrows());
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let std = (var + c(NORM_PIX_EPS)).sqrt();
        row.mapv_inplace(|v| (v - mean) / std);
        stats.push((mean, std));
    }
    (out, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockIds {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    enc: Vec<BlockIds>,
    enc_norm: (usize, usize),
    dec_embed: (usize, usize),
    mask_token: usize,
    dec: Vec<BlockIds>,
    dec_norm: (usize, usize),
    dec_pred: (usize, usize),
    seq_head: Option<(usize, usize)>,
    patch_head: Option<(usize, usize)>,
}

/// Named parameter tensors. Biases and norm parameters are `1 x n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Array2<T>>,
    /// Whether weight decay applies (matrices only).
    pub decay: Vec<bool>,
}

impl<T: Scalar> ParamStore<T> {
    fn add(&mut self, name: String, t: Array2<T>, decay: bool) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.decay.push(decay);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

struct Init<'a> {
    rng: &'a mut Rng,
}

impl Init<'_> {
    fn xavier<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Array2<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Array2::from_shape_fn((fan_in, fan_out), |_| c(self.rng.gen_range(-a..a)))
    }

    fn normal<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<T> {
        let n = Normal::new(0.0, std).expect("valid std");
        Array2::from_shape_fn((rows, cols), |_| c(n.sample(self.rng)))
    }
}

fn ones<T: Scalar>(n: usize) -> Array2<T> {
    Array2::from_elem((1, n), T::one())
}

fn zeros<T: Scalar>(n: usize) -> Array2<T> {
    Array2::zeros((1, n))
}

fn add_block<T: Scalar>(p: &mut ParamStore<T>, init: &mut Init, prefix: &str, d: usize, mlp_ratio: usize) -> BlockIds {
    let h = d * mlp_ratio;
    let mut lin = |p: &mut ParamStore<T>, name: &str, i: usize, o: usize| {
        let w = p.add(format!("{prefix}.{name}.w"), init.xavier(i, o), true);
        let b = p.add(format!("{prefix}.{name}.b"), zeros(o), false);
        (w, b)
    };
    let ln1_g = p.add(format!("{prefix}.ln1.g"), ones(d), false);
    let ln1_b = p.add(format!("{prefix}.ln1.b"), zeros(d), false);
    let (wq, bq) = lin(p, "q", d, d);
    let (wk, bk) = lin(p, "k", d, d);
    let (wv, bv) = lin(p, "v", d, d);
    let (wo, bo) = lin(p, "o", d, d);
    let ln2_g = p.add(format!("{prefix}.ln2.g"), ones(d), false);
    let ln2_b = p.add(format!("{prefix}.ln2.b"), zeros(d), false);
    let (w1, b1) = lin(p, "fc1", d, h);
    let (w2, b2) = lin(p, "fc2", h, d);
    BlockIds {
        ln1_g,
        ln1_b,
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
        ln2_g,
        ln2_b,
        w1,
        b1,
        w2,
        b2,
    }
}

/// Model weights together with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
    pos_enc: Array2<T>,
    pos_dec: Array2<T>,
}

/// Output of [`Model::forward_mae`].
#[derive(Debug, Clone)]
pub struct MaeOutput<T> {
    /// Raw decoder output, `P x patch_dim`, in target space.
    pub prediction: Array2<T>,
    /// Prediction mapped back to pixel space.
    pub reconstruction: Raster,
    pub loss: T,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = rng_from(seed);
        let mut init = Init { rng: &mut rng };
        let mut p = ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            decay: Vec::new(),
        };
        let (d, dd, pd) = (cfg.width, cfg.dec_width, cfg.patch_dim());
        let patch_w = p.add("patch.w".into(), init.xavier(pd, d), true);
        let patch_b = p.add("patch.b".into(), zeros(d), false);
        let enc = (0..cfg.enc_layers)
            .map(|i| add_block(&mut p, &mut init, &format!("enc.{i}"), d, cfg.mlp_ratio))
            .collect();
        let enc_norm = (
            p.add("enc.norm.g".into(), ones(d), false),
            p.add("enc.norm.b".into(), zeros(d), false),
        );
        let dec_embed = (
            p.add("dec.embed.w".into(), init.xavier(d, dd), true),
            p.add("dec.embed.b".into(), zeros(dd), false),
        );
        let mask_token = p.add("dec.mask_token".into(), init.normal(1, dd, 0.02), false);
        let dec = (0..cfg.dec_layers)
            .map(|i| add_block(&mut p, &mut init, &format!("dec.{i}"), dd, cfg.mlp_ratio))
            .collect();
        let dec_norm = (
            p.add("dec.norm.g".into(), ones(dd), false),
            p.add("dec.norm.b".into(), zeros(dd), false),
        );
        let dec_pred = (
            p.add("dec.pred.w".into(), init.xavier(dd, pd), true),
            p.add("dec.pred.b".into(), zeros(pd), false),
        );
        let mut model = Self {
            pos_enc: sincos_2d(cfg.grid(), d).mapv(c),
            pos_dec: sincos_2d(cfg.grid(), dd).mapv(c),
            params: p,
            layout: Layout {
                patch_w,
                patch_b,
                enc,
                enc_norm,
                dec_embed,
                mask_token,
                dec,
                dec_norm,
                dec_pred,
                seq_head: None,
                patch_head: None,
            },
            cfg: ModelConfig {
                seq_head: None,
                patch_head: false,
                ..cfg.clone()
            },
        };
        if let Some(k) = cfg.seq_head {
            model.set_seq_head(k, &mut rng);
        }
        if cfg.patch_head {
            model.set_patch_head(&mut rng);
        }
        Ok(model)
    }

    /// Attach (or replace) a freshly initialized sequence head.
    pub fn set_seq_head(&mut self, outputs: usize, rng: &mut Rng) {
        let d = self.cfg.width;
        let mut init = Init { rng };
        let w = init.xavier(d, outputs);
        let ids = match self.layout.seq_head {
            Some((wi, bi)) => {
                self.params.tensors[wi] = w;
                self.params.tensors[bi] = zeros(outputs);
                (wi, bi)
            }
            None => (
                self.params.add("head.seq.w".into(), w, true),
                self.params.add("head.seq.b".into(), zeros(outputs), false),
            ),
        };
        self.layout.seq_head = Some(ids);
        self.cfg.seq_head = Some(outputs);
    }

    /// Attach (or replace) a freshly initialized patch head.
    pub fn set_patch_head(&mut self, rng: &mut Rng) {
        let d = self.cfg.width;
        let mut init = Init { rng };
        let w = init.xavier(d, 1);
        let ids = match self.layout.patch_head {
            Some((wi, bi)) => {
                self.params.tensors[wi] = w;
                self.params.tensors[bi] = zeros(1);
                (wi, bi)
            }
            None => (
                self.params.add("head.patch.w".into(), w, true),
                self.params.add("head.patch.b".into(), zeros(1), false),
            ),
        };
        self.layout.patch_head = Some(ids);
        self.cfg.patch_head = true;
    }

    /// Rebuild a model from a config and named tensors.
    pub fn from_tensors(cfg: ModelConfig, named: Vec<(String, Array2<T>)>) -> Result<Self, ModelError> {
        let mut m = Self::new(cfg, 0)?;
        if named.len() != m.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} tensors, found {}",
                m.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let i = m
                .params
                .index_of(&name)
                .ok_or_else(|| ModelError::Config(format!("unknown tensor {name}")))?;
            if m.params.tensors[i].dim() != t.dim() {
                return Err(ModelError::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dim(),
                    m.params.tensors[i].dim()
                )));
            }
            m.params.tensors[i] = t;
        }
        Ok(m)
    }

    /// Same weights in another float type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |a: &Array2<T>| a.mapv(|v| c::<U>(v.to_f64().unwrap_or(0.0)));
        Model {
            cfg: self.cfg.clone(),
            params: ParamStore {
                names: self.params.names.clone(),
                tensors: self.params.tensors.iter().map(conv).collect(),
                decay: self.params.decay.clone(),
            },
            layout: self.layout.clone(),
            pos_enc: conv(&self.pos_enc),
            pos_dec: conv(&self.pos_dec),
        }
    }

    pub fn grid(&self) -> PatchGrid {
        self.cfg.grid()
    }

    pub fn check_image(&self, img: &Raster) -> Result<(), ModelError> {
        let want = (self.cfg.image_h, self.cfg.image_w, self.cfg.channels);
        let got = (img.height(), img.width(), img.channels());
        if got != want {
            return Err(ModelError::ShapeMismatch { got, want });
        }
        Ok(())
    }

    fn block(&self, t: &mut Tape<'_, T>, x: Var, b: &BlockIds, heads: usize, mut rng: Option<&mut Rng>) -> Var {
        let p = self.cfg.dropout;
        let h = ln(t, x, b.ln1_g, b.ln1_b);
        let q = lin(t, h, b.wq, b.bq);
        let k = lin(t, h, b.wk, b.bk);
        let v = lin(t, h, b.wv, b.bv);
        let a = t.attention(q, k, v, heads);
        let mut a = lin(t, a, b.wo, b.bo);
        if let Some(r) = rng.as_deref_mut() {
            a = t.dropout(a, p, r);
        }
        let x = t.add(x, a);
        let h = ln(t, x, b.ln2_g, b.ln2_b);
        let h = lin(t, h, b.w1, b.b1);
        let h = t.gelu(h);
        let mut h = lin(t, h, b.w2, b.b2);
        if let Some(r) = rng {
            h = t.dropout(h, p, r);
        }
        t.add(x, h)
    }

    /// Encode the listed patches; returns final normalized embeddings, one
    /// row per listed patch.
    pub(crate) fn encode(
        &self,
        t: &mut Tape<'_, T>,
        patches: &Array2<T>,
        rows: &[usize],
        mut rng: Option<&mut Rng>,
    ) -> Var {
        let x = patches.select(Axis(0), rows);
        let pos = self.pos_enc.select(Axis(0), rows);
        let xi = t.input(x);
        let e = lin(t, xi, self.layout.patch_w, self.layout.patch_b);
        let pi = t.input(pos);
        let mut h = t.add(e, pi);
        for b in &self.layout.enc {
            h = self.block(t, h, b, self.cfg.heads, rng.as_deref_mut());
        }
        let (g, bb) = self.layout.enc_norm;
        ln(t, h, g, bb)
    }

    /// Record the MAE graph; returns `(prediction, loss)`.
    pub(crate) fn mae_graph(
        &self,
        t: &mut Tape<'_, T>,
        patches: &Array2<T>,
        mask: &PatchMask,
        rng: Option<&mut Rng>,
    ) -> Result<(Var, Var), ModelError> {
        let grid = self.grid();
        if mask.grid() != grid {
            return Err(ModelError::MaskGrid {
                got: mask.grid(),
                want: grid,
            });
        }
        let visible = mask.clear_indices();
        if visible.is_empty() {
            return Err(ModelError::AllMasked);
        }
        let mut rng = rng;
        let enc = self.encode(t, patches, &visible, rng.as_deref_mut());
        let (w, b) = self.layout.dec_embed;
        let e = lin(t, enc, w, b);
        let tok = t.param(self.layout.mask_token);
        let full = t.scatter(e, tok, visible, grid.len());
        let pos = t.input(self.pos_dec.clone());
        let mut h = t.add(full, pos);
        for blk in &self.layout.dec {
            h = self.block(t, h, blk, self.cfg.heads, rng.as_deref_mut());
        }
        let (g, bb) = self.layout.dec_norm;
        let h = ln(t, h, g, bb);
        let (w, b) = self.layout.dec_pred;
        let pred = lin(t, h, w, b);
        let target = if self.cfg.norm_pix {
            normalize_patches(patches).0
        } else {
            patches.clone()
        };
        let loss = t.masked_mse(pred, target, mask.set_indices());
        Ok((pred, loss))
    }

    /// Reconstruct `img` with the patches in `mask` hidden.
    pub fn forward_mae(&self, img: &Raster, mask: &PatchMask) -> Result<MaeOutput<T>, ModelError> {
        self.check_image(img)?;
        let patches = patchify::<T>(img, self.grid())?;
        let mut t = Tape::new(&self.params.tensors);
        let (pred, loss) = self.mae_graph(&mut t, &patches, mask, None)?;
        if mask.is_empty() {
            log::warn!("empty mask: reconstruction loss defined as 0");
        }
        let prediction = t.value(pred).to_owned();
        let mut pixels = prediction.clone();
        if self.cfg.norm_pix {
            let (_, stats) = normalize_patches(&patches);
            for (mut row, (mean, std)) in pixels.rows_mut().into_iter().zip(stats) {
                row.mapv_inplace(|v| v * std + mean);
            }
        }
        let mut reconstruction = unpatchify(&pixels, self.grid(), self.cfg.channels);
        reconstruction.clamp_unit();
        Ok(MaeOutput {
            prediction,
            reconstruction,
            loss: t.scalar(loss),
        })
    }

    pub(crate) fn seq_graph(
        &self,
        t: &mut Tape<'_, T>,
        patches: &Array2<T>,
        rng: Option<&mut Rng>,
    ) -> Result<Var, ModelError> {
        let (w, b) = self.layout.seq_head.ok_or(ModelError::HeadMissing("sequence"))?;
        let all: Vec<usize> = (0..self.grid().len()).collect();
        let h = self.encode(t, patches, &all, rng);
        let m = t.mean_rows(h);
        Ok(lin(t, m, w, b))
    }

    pub(crate) fn patch_graph(
        &self,
        t: &mut Tape<'_, T>,
        patches: &Array2<T>,
        rng: Option<&mut Rng>,
    ) -> Result<Var, ModelError> {
        let (w, b) = self.layout.patch_head.ok_or(ModelError::HeadMissing("patch"))?;
        let all: Vec<usize> = (0..self.grid().len()).collect();
        let h = self.encode(t, patches, &all, rng);
        Ok(lin(t, h, w, b))
    }

    /// Sequence-head logits (or the regression value) for an unmasked image.
    pub fn head_sequence(&self, img: &Raster) -> Result<Vec<T>, ModelError> {
        self.check_image(img)?;
        let patches = patchify::<T>(img, self.grid())?;
        let mut t = Tape::new(&self.params.tensors);
        let out = self.seq_graph(&mut t, &patches, None)?;
        Ok(t.value(out).iter().cloned().collect())
    }

    /// Per-patch answer probabilities, row-major over the patch grid.
    pub fn head_patch(&self, img: &Raster) -> Result<Vec<T>, ModelError> {
        self.check_image(img)?;
        let patches = patchify::<T>(img, self.grid())?;
        let mut t = Tape::new(&self.params.tensors);
        let out = self.patch_graph(&mut t, &patches, None)?;
        Ok(t.value(out).iter().map(|&z| tape::sigmoid(z)).collect())
    }

    /// Mean of the final-layer patch embeddings of an unmasked image.
    pub fn pooled_embedding(&self, img: &Raster) -> Result<Vec<T>, ModelError> {
        self.check_image(img)?;
        let patches = patchify::<T>(img, self.grid())?;
        let mut t = Tape::new(&self.params.tensors);
        let all: Vec<usize> = (0..self.grid().len()).collect();
        let h = self.encode(&mut t, &patches, &all, None);
        let m = t.mean_rows(h);
        Ok(t.value(m).iter().cloned().collect())
    }

    /// Parameter ids of the sequence and patch heads, if present.
    pub fn head_param_ids(&self) -> Vec<usize> {
        let mut ids = Vec::new();
        for (w, b) in [self.layout.seq_head, self.layout.patch_head].into_iter().flatten() {
            ids.push(w);
            ids.push(b);
        }
        ids
    }
}

fn ln<T: Scalar>(t: &mut Tape<'_, T>, x: Var, g: usize, b: usize) -> Var {
    let g = t.param(g);
    let b = t.param(b);
    t.layer_norm(x, g, b)
}

fn lin<T: Scalar>(t: &mut Tape<'_, T>, x: Var, w: usize, b: usize) -> Var {
    let w = t.param(w);
    let b = t.param(b);
    t.linear(x, w, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{sample_span_mask, SpanMaskConfig};

    fn random_image(h: usize, w: usize, seed: u64) -> Raster {
        let mut rng = rng_from(seed);
        let data = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Raster::from_vec(h, w, 1, data).unwrap()
    }

    #[test]
    fn patchify_shapes_and_round_trip() {
        let g = PatchGrid::new(2, 2);
        let img = random_image(32, 32, 1);
        let p = patchify::<f32>(&img, g).unwrap();
        assert_eq!(p.dim(), (4, 256));
        assert_eq!(unpatchify(&p, g, 1), img);
        let flat = Raster::filled(32, 32, 1, 0.25);
        assert!(patchify::<f64>(&flat, g).unwrap().iter().all(|&v| v == 0.25));
        assert!(patchify::<f32>(&img, PatchGrid::new(3, 2)).is_err());
    }

    #[test]
    fn positional_rows_are_distinct() {
        let g = PatchGrid::new(23, 23);
        let t = sincos_2d(g, 64);
        for i in 0..g.len() {
            for j in 0..i {
                let d: f64 = t.row(i).iter().zip(t.row(j)).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6, "rows {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn param_count_matches_tensors() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig {
                seq_head: Some(3),
                patch_head: true,
                dec_width: 32,
                ..ModelConfig::default()
            },
        ] {
            let m = Model::<f32>::new(cfg.clone(), 1).unwrap();
            assert_eq!(m.params.scalar_count(), cfg.param_count());
        }
    }

    #[test]
    fn empty_mask_has_zero_loss_and_all_masked_errors() {
        let m = Model::<f32>::new(ModelConfig::default(), 2).unwrap();
        let img = random_image(64, 64, 2);
        let g = m.grid();
        let out = m.forward_mae(&img, &PatchMask::empty(g)).unwrap();
        assert_eq!(out.loss, 0.0);
        let full = PatchMask::from_bits(g, vec![true; g.len()]).unwrap();
        assert_eq!(m.forward_mae(&img, &full).unwrap_err(), ModelError::AllMasked);
    }

    #[test]
    fn zero_image_loss_is_mean_squared_prediction() {
        let cfg = ModelConfig {
            norm_pix: false,
            ..ModelConfig::default()
        };
        let m = Model::<f64>::new(cfg, 3).unwrap();
        let img = Raster::filled(64, 64, 1, 0.0);
        let mask = sample_span_mask(m.grid(), &SpanMaskConfig::default(), &mut rng_from(3));
        let out = m.forward_mae(&img, &mask).unwrap();
        let rows = mask.set_indices();
        let expect: f64 = rows
            .iter()
            .flat_map(|&r| out.prediction.row(r).to_vec())
            .map(|v| v * v)
            .sum::<f64>()
            / (rows.len() * 256) as f64;
        assert!((out.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_targets_outside_the_mask() {
        let m = Model::<f64>::new(ModelConfig::default(), 4).unwrap();
        let g = m.grid();
        let mask = PatchMask::from_cells(g, &[(0, 0), (2, 3)]);
        let patches = patchify::<f64>(&random_image(64, 64, 5), g).unwrap();
        let mut t = Tape::new(&m.params.tensors);
        let (_, l0) = m.mae_graph(&mut t, &patches, &mask, None).unwrap();
        // Loss of the same prediction against targets altered in an
        // unmasked patch only.
        let mut t2 = Tape::new(&m.params.tensors);
        let (pred, _) = m.mae_graph(&mut t2, &patches, &mask, None).unwrap();
        let mut target = normalize_patches(&patches).0;
        target.row_mut(g.index(1, 1)).fill(7.0);
        let l1 = t2.masked_mse(pred, target, mask.set_indices());
        assert_eq!(t.scalar(l0), t2.scalar(l1));
    }

    #[test]
    fn heads() {
        let cfg = ModelConfig {
            image_h: 16,
            image_w: 16,
            seq_head: Some(3),
            patch_head: true,
            ..ModelConfig::default()
        };
        let mut m = Model::<f64>::new(cfg, 6).unwrap();
        let img = random_image(16, 16, 6);
        let (w, b) = m.layout.seq_head.unwrap();
        m.params.tensors[w].fill(0.0);
        m.params.tensors[b].fill(0.0);
        assert_eq!(m.head_sequence(&img).unwrap(), vec![0.0; 3]);
        let (w, b) = m.layout.patch_head.unwrap();
        m.params.tensors[w].fill(0.0);
        m.params.tensors[b].fill(0.0);
        assert_eq!(m.head_patch(&img).unwrap(), vec![0.5]);

        // One patch: pooling is the identity on the single embedding.
        let mut t = Tape::new(&m.params.tensors);
        let p = patchify::<f64>(&img, m.grid()).unwrap();
        let h = m.encode(&mut t, &p, &[0], None);
        assert_eq!(m.pooled_embedding(&img).unwrap(), t.value(h).row(0).to_vec());

        let bare = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
        let img = random_image(64, 64, 1);
        assert_eq!(bare.head_patch(&img).unwrap_err(), ModelError::HeadMissing("patch"));
        assert_eq!(
            bare.head_sequence(&img).unwrap_err(),
            ModelError::HeadMissing("sequence")
        );
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            width: 66,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            image_h: 40,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
