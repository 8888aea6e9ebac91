//! Run configuration and the workflows behind each command-line
//! subcommand. Every artifact directory gets a `run.json` holding the
//! resolved configuration, which is enough to replay the run exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{
    detect_columns, linearize, sliding_crops, split_dataset, CorpusError, DatasetManifest, PageRegions, MIN_GUTTER,
};
use crate::degrade::{degrade, DegradationConfig, DegradeError};
use crate::manifest::{read_jsonl, write_jsonl, ManifestEntry, ManifestError};
use crate::masking::{sample_span_mask_with_rects, MaskError, PatchMask, SpanMaskConfig};
use crate::model::{
    fingerprint, from_bytes, to_bytes, train_step, AdamW, CheckpointError, Example, Model, ModelConfig, ModelError,
    OptimState, Schedule, Target,
};
use crate::render::{layout_paragraphs, FontRegistry, LayoutConfig, RasterBackend, RenderError, TextCorpus};
use crate::scan::{ImageError, Raster, Scan, ScanMeta, PATCH_SIZE};
use crate::search::{embed, EmbeddingIndex, Hit, SearchError};
use crate::seed::{derive_seed, rng_for};
use crate::tasks::metrics::{balance_test_set, qa_metrics, QaMetrics};
use crate::tasks::ocr::{GroundTruthOcr, NoisyOcr, OcrEngine};
use crate::tasks::qa::{build_qa_instance, synth_qa_triple, QaConfig, QaInstance, QaSynthConfig};
use crate::tasks::seq::{synth_seq_task, SeqConfig};
use crate::tasks::text::{synthetic_corpus, VOCAB};
use crate::tasks::TaskError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: ImageError,
    },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Degrade(#[from] DegradeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Search(#[from] SearchError),
}

impl PipelineError {
    /// Process exit status: 2 config, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Model(ModelError::Config(_)) => 2,
            Self::Model(ModelError::NonFiniteLoss { .. }) => 4,
            Self::Checkpoint(CheckpointError::Model(ModelError::Config(_))) => 2,
            _ => 3,
        }
    }

    fn config(path: &str, message: impl Into<String>) -> Self {
        Self::Config {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn img_err(path: &Path) -> impl FnOnce(ImageError) -> PipelineError + '_ {
    move |source| PipelineError::Image {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// A new mask for every scan at every step.
    #[default]
    Fresh,
    /// One mask per scan, reused at every step.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup: u64,
    pub steps: u64,
    pub batch: usize,
    pub mask_mode: MaskMode,
    pub adamw: AdamW,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let s = Schedule::default();
        Self {
            lr: s.peak_lr,
            min_lr: s.min_lr,
            warmup: s.warmup,
            steps: s.total_steps,
            batch: 32,
            mask_mode: MaskMode::Fresh,
            adamw: AdamW::default(),
        }
    }
}

impl OptimConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak_lr: self.lr,
            min_lr: self.min_lr,
            warmup: self.warmup,
            total_steps: self.steps,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Plain-text corpus, one paragraph per line.
    pub corpus: Option<PathBuf>,
    /// Input dataset directory.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub noisy: bool,
    /// Paragraphs in the generated corpus used when no corpus file is given.
    pub paragraphs: usize,
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 100,
            noisy: false,
            paragraphs: 200,
            val_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Strip width and crop size in pixels.
    pub window: usize,
    pub stride: usize,
    pub anchor_tail: bool,
    pub min_gutter: usize,
    pub val_fraction: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            window: 368,
            stride: 128,
            anchor_tail: false,
            min_gutter: MIN_GUTTER,
            val_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OcrKind {
    GroundTruth,
    Noisy { p: f64 },
}

impl OcrKind {
    pub fn engine(&self, seed: u64) -> Box<dyn OcrEngine> {
        match *self {
            OcrKind::GroundTruth => Box::new(GroundTruthOcr),
            OcrKind::Noisy { p } => Box::new(NoisyOcr { p, seed }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaRunConfig {
    pub render: QaConfig,
    pub synth: QaSynthConfig,
    pub ocr: OcrKind,
    pub n_train: usize,
    /// Balanced test-set size.
    pub n_test: usize,
    pub threshold: f64,
    /// Write per-patch probability heatmaps during evaluation.
    pub heatmaps: bool,
}

impl Default for QaRunConfig {
    fn default() -> Self {
        Self {
            render: QaConfig::default(),
            synth: QaSynthConfig::default(),
            ocr: OcrKind::GroundTruth,
            n_train: 512,
            n_test: 128,
            threshold: 0.5,
            heatmaps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqRunConfig {
    pub task: SeqConfig,
    pub noisy: bool,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for SeqRunConfig {
    fn default() -> Self {
        Self {
            task: SeqConfig::default(),
            noisy: false,
            n_train: 256,
            n_test: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub model: ModelConfig,
    pub layout: LayoutConfig,
    pub degradation: DegradationConfig,
    pub mask: SpanMaskConfig,
    pub optim: OptimConfig,
    pub synth: SynthConfig,
    pub ingest: IngestConfig,
    pub qa: QaRunConfig,
    pub seq: SeqRunConfig,
    /// Embedding/search: results per query.
    pub k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            model: ModelConfig::default(),
            layout: LayoutConfig::default(),
            degradation: DegradationConfig::default(),
            mask: SpanMaskConfig::default(),
            optim: OptimConfig::default(),
            synth: SynthConfig::default(),
            ingest: IngestConfig::default(),
            qa: QaRunConfig::default(),
            seq: SeqRunConfig::default(),
            k: 10,
        }
    }
}

fn from_value(v: Value) -> Result<RunConfig, PipelineError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        PipelineError::config(&path, e.inner().to_string())
    })
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let v: Value = serde_json::from_str(text).map_err(|e| PipelineError::config(".", e.to_string()))?;
        from_value(v)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Set a dotted key, e.g. `optim.lr`. The value is parsed as JSON and
    /// taken as a plain string when that fails.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), PipelineError> {
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut node = &mut root;
        for part in key.split('.') {
            node = match node {
                Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| PipelineError::config(key, "unknown key"))?,
                _ => return Err(PipelineError::config(key, "not an object")),
            };
        }
        *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = from_value(root)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model
            .validate()
            .map_err(|e| PipelineError::config("model", e.to_string()))?;
        self.degradation
            .validate()
            .map_err(|e| PipelineError::config("degradation", e.to_string()))?;
        let m = &self.mask;
        if !(0.0..1.0).contains(&m.ratio) {
            return Err(PipelineError::config("mask.ratio", "must lie in [0, 1)"));
        }
        if m.width.0 == 0 || m.width.0 > m.width.1 || m.height.0 == 0 || m.height.0 > m.height.1 {
            return Err(PipelineError::config(
                "mask",
                "rectangle ranges must be nonempty and positive",
            ));
        }
        if self.optim.batch == 0 {
            return Err(PipelineError::config("optim.batch", "must be positive"));
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return Err(PipelineError::config("optim.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.layout.continue_prob) {
            return Err(PipelineError::config("layout.continue_prob", "must lie in [0, 1]"));
        }
        let (w, h) = self.qa.render.canvas;
        if w % PATCH_SIZE != 0 || h % PATCH_SIZE != 0 {
            return Err(PipelineError::config(
                "qa.render.canvas",
                "must be a multiple of the patch size",
            ));
        }
        if self.ingest.stride == 0 {
            return Err(PipelineError::config("ingest.stride", "must be positive"));
        }
        for (path, v) in [
            ("synth.val_fraction", self.synth.val_fraction),
            ("ingest.val_fraction", self.ingest.val_fraction),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(PipelineError::config(path, "must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    fn out(&self) -> Result<&Path, PipelineError> {
        self.paths
            .out
            .as_deref()
            .ok_or_else(|| PipelineError::config("paths.out", "an output directory is required"))
    }

    fn data(&self) -> Result<&Path, PipelineError> {
        let p = self
            .paths
            .data
            .as_deref()
            .ok_or_else(|| PipelineError::config("paths.data", "a data directory is required"))?;
        if !p.exists() {
            return Err(PipelineError::config(
                "paths.data",
                format!("{} does not exist", p.display()),
            ));
        }
        Ok(p)
    }

    fn checkpoint(&self) -> Result<&Path, PipelineError> {
        let p = self
            .paths
            .checkpoint
            .as_deref()
            .ok_or_else(|| PipelineError::config("paths.checkpoint", "a checkpoint is required"))?;
        if !p.exists() {
            return Err(PipelineError::config(
                "paths.checkpoint",
                format!("{} does not exist", p.display()),
            ));
        }
        Ok(p)
    }

    /// The model input canvas `(width, height)`.
    pub fn canvas(&self) -> (usize, usize) {
        (self.model.image_w, self.model.image_h)
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
}

fn prepare_out(cfg: &RunConfig, command: &str) -> Result<PathBuf, PipelineError> {
    cfg.validate()?;
    let out = cfg.out()?.to_path_buf();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    // The output directory is where the record lives, not part of the run.
    let mut resolved = cfg.clone();
    resolved.paths.out = None;
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config: &resolved,
    };
    write_json(&out.join("run.json"), &record)?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(v).expect("serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn save_png(r: &Raster, path: &Path) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    r.save_png(path).map_err(img_err(path))
}

fn load_raster(path: &Path, channels: usize) -> Result<Raster, PipelineError> {
    let r = Raster::load_gray(path).map_err(img_err(path))?;
    Ok(if channels == 3 { r.to_rgb() } else { r })
}

pub fn save_model(model: &Model<f32>, path: &Path) -> Result<(), PipelineError> {
    fs::write(path, to_bytes(model)).map_err(io_err(path))
}

pub fn load_model(path: &Path) -> Result<Model<f32>, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(from_bytes(&bytes)?)
}

/// Load a checkpoint for a run whose input size may differ from the
/// checkpoint's. Positional tables are not parameters, so the weights carry
/// over unchanged.
fn load_model_for(path: &Path, image_h: usize, image_w: usize) -> Result<Model<f32>, PipelineError> {
    let m = load_model(path)?;
    if (m.cfg.image_h, m.cfg.image_w) == (image_h, image_w) {
        return Ok(m);
    }
    let cfg = ModelConfig {
        image_h,
        image_w,
        ..m.cfg.clone()
    };
    let named = m
        .params
        .names
        .iter()
        .cloned()
        .zip(m.params.tensors.iter().cloned())
        .collect();
    Ok(Model::from_tensors(cfg, named)?)
}

/// Paragraph source: the configured corpus file or a generated corpus.
pub fn load_corpus(cfg: &RunConfig) -> Result<TextCorpus, PipelineError> {
    match &cfg.paths.corpus {
        Some(p) => Ok(TextCorpus::from_text(&fs::read_to_string(p).map_err(io_err(p))?)),
        None => Ok(synthetic_corpus(
            &mut rng_for(cfg.seed, "corpus", 0),
            cfg.synth.paragraphs,
        )),
    }
}

/// Render one synthetic scan; index `i` fixes every random choice.
pub fn synth_scan(
    cfg: &RunConfig,
    corpus: &TextCorpus,
    fonts: &FontRegistry,
    i: u64,
) -> Result<(Scan, ManifestEntry), PipelineError> {
    let seed = derive_seed(cfg.seed, "synth", i);
    let plan = layout_paragraphs(
        corpus,
        &mut rng_for(seed, "layout", 0),
        cfg.canvas(),
        fonts,
        &cfg.layout,
    )?;
    let meta = ScanMeta {
        seed,
        source_id: format!("synth-{i:05}"),
        split: "train".into(),
        truncated: false,
    };
    let (mut scan, stats) = plan.to_scan(RasterBackend::Bitmap, fonts, meta)?;
    if stats.missing_glyphs > 0 {
        log::warn!(
            "scan {i}: {} characters drawn with the fallback glyph",
            stats.missing_glyphs
        );
    }
    let mut entry = ManifestEntry::new(format!("scans/{i:05}.png"), seed, "train").with_plan(&plan);
    entry.source_id = scan.meta.source_id.clone();
    if cfg.synth.noisy {
        let (degraded, t) = degrade(&scan, &cfg.degradation, &mut rng_for(seed, "degrade", 0));
        if let Some(p) = &degraded.truth {
            entry = entry.with_plan(p);
        }
        entry.transform = Some(t);
        scan = degraded;
    }
    if cfg.model.channels == 3 {
        scan = scan.map_pixels(scan.pixels().to_rgb());
    }
    Ok((scan, entry))
}

/// `synth`: render and optionally degrade `synth.n` scans.
pub fn run_synth(cfg: &RunConfig) -> Result<Vec<ManifestEntry>, PipelineError> {
    let out = prepare_out(cfg, "synth")?;
    let corpus = load_corpus(cfg)?;
    let fonts = FontRegistry::builtin();
    let made: Vec<(Scan, ManifestEntry)> = (0..cfg.synth.n as u64)
        .into_par_iter()
        .map(|i| synth_scan(cfg, &corpus, &fonts, i))
        .collect::<Result<_, _>>()?;
    for (scan, entry) in &made {
        save_png(scan.pixels(), &out.join(&entry.path))?;
    }
    let manifest = DatasetManifest {
        entries: made.into_iter().map(|(_, e)| e).collect(),
        split_fraction: cfg.synth.val_fraction,
    };
    let entries = if manifest.entries.len() > 1 && cfg.synth.val_fraction > 0.0 {
        split_dataset(&manifest, cfg.synth.val_fraction, &mut rng_for(cfg.seed, "split", 0))?.entries
    } else {
        manifest.entries
    };
    write_jsonl(&out.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

fn page_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "page".into())
}

/// `corpus ingest`: linearize page images into strips and cut sliding
/// crops. A `<page>.regions.json` next to a page supplies its regions;
/// otherwise columns are detected from the ink profile.
pub fn run_ingest(cfg: &RunConfig, pages: &[PathBuf]) -> Result<Vec<ManifestEntry>, PipelineError> {
    if pages.is_empty() {
        return Err(PipelineError::config("pages", "no page images given"));
    }
    let out = prepare_out(cfg, "corpus ingest")?;
    let ic = &cfg.ingest;
    let mut entries = Vec::new();
    for (pi, path) in pages.iter().enumerate() {
        let page = Raster::load_gray(path).map_err(img_err(path))?;
        let id = page_id(path);
        let sidecar = path.with_extension("regions.json");
        let regions: PageRegions = if sidecar.exists() {
            let text = fs::read_to_string(&sidecar).map_err(io_err(&sidecar))?;
            serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", sidecar.display())))?
        } else {
            detect_columns(&page, &id, ic.min_gutter)?
        };
        let strip = linearize(&page, &regions, ic.window)?;
        let meta = ScanMeta {
            seed: derive_seed(cfg.seed, "ingest", pi as u64),
            source_id: id.clone(),
            split: "train".into(),
            truncated: false,
        };
        for (offset, crop) in sliding_crops(&strip.pixels, ic.window, ic.stride, ic.anchor_tail, &meta)? {
            let rel = format!("crops/{id}_{offset:06}.png");
            save_png(crop.pixels(), &out.join(&rel))?;
            let mut e = ManifestEntry::new(rel, meta.seed, "train");
            e.source_id = id.clone();
            e.crop_offset = Some(offset);
            entries.push(e);
        }
    }
    let manifest = DatasetManifest {
        entries,
        split_fraction: ic.val_fraction,
    };
    let entries = if ic.val_fraction > 0.0 {
        split_dataset(&manifest, ic.val_fraction, &mut rng_for(cfg.seed, "split", 0))?.entries
    } else {
        manifest.entries
    };
    write_jsonl(&out.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

/// Scans listed in `<dir>/manifest.jsonl`, or every PNG in `dir` (sorted)
/// when there is no manifest, or the single file `dir`.
pub fn load_dataset(dir: &Path, channels: usize) -> Result<Vec<(String, Raster)>, PipelineError> {
    if dir.is_file() {
        return Ok(vec![(page_id(dir), load_raster(dir, channels)?)]);
    }
    let manifest = dir.join("manifest.jsonl");
    let paths: Vec<String> = if manifest.exists() {
        read_jsonl::<ManifestEntry>(&manifest)?
            .into_iter()
            .filter(|e| e.split != "val")
            .map(|e| e.path)
            .collect()
    } else {
        let mut v: Vec<String> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".png"))
            .collect();
        v.sort();
        v
    };
    if paths.is_empty() {
        return Err(PipelineError::Data(format!("{}: no scans", dir.display())));
    }
    paths
        .into_par_iter()
        .map(|p| {
            let r = load_raster(&dir.join(&p), channels)?;
            Ok((p, r))
        })
        .collect()
}

/// The mask pretraining reuses in fixed mode and evaluation always uses.
pub fn fixed_mask(cfg: &RunConfig, i: usize) -> PatchMask {
    sample_span_mask_with_rects(
        cfg.model.grid(),
        &cfg.mask,
        &mut rng_for(cfg.seed, "mask-fixed", i as u64),
    )
    .0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    /// Task metric after training: masked-patch MSE, accuracy, or the QA
    /// metrics, depending on the command.
    pub eval: Value,
    pub fingerprint: String,
}

/// Batches of indices into `0..n`: everything when `n <= batch`, else
/// consecutive slices of a per-epoch permutation.
fn batch_indices(seed: u64, n: usize, batch: usize, step: u64) -> Vec<usize> {
    if n <= batch {
        return (0..n).collect();
    }
    let per_epoch = (n / batch) as u64;
    let epoch = step / per_epoch;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, "epoch", epoch));
    let off = (step % per_epoch) as usize * batch;
    idx[off..off + batch].to_vec()
}

fn train_loop<F>(
    model: &mut Model<f32>,
    cfg: &RunConfig,
    images: &[&Raster],
    target_for: F,
    log: &mut Vec<StepLog>,
) -> Result<(), PipelineError>
where
    F: Fn(u64, usize) -> Target,
{
    let mut optim = OptimState::new(&model.params, cfg.optim.adamw, cfg.optim.schedule());
    for step in 0..cfg.optim.steps {
        let idx = batch_indices(cfg.seed, images.len(), cfg.optim.batch, step);
        let targets: Vec<Target> = idx.iter().map(|&i| target_for(step, i)).collect();
        let batch: Vec<Example> = idx
            .iter()
            .zip(&targets)
            .map(|(&i, t)| Example {
                image: images[i],
                target: t,
            })
            .collect();
        let s = train_step(model, &mut optim, &batch, step, cfg.seed)?;
        log::debug!("step {step} loss {:.5} lr {:.3e}", s.loss, s.lr);
        log.push(StepLog {
            step,
            loss: s.loss,
            lr: s.lr,
        });
    }
    Ok(())
}

fn finish(out: &Path, model: &Model<f32>, log: &[StepLog], eval: Value) -> Result<TrainSummary, PipelineError> {
    save_model(model, &out.join("model.pxdc"))?;
    write_jsonl(&out.join("metrics.jsonl"), log)?;
    let summary = TrainSummary {
        steps: log.len() as u64,
        final_loss: log.last().map(|s| s.loss),
        eval,
        fingerprint: fingerprint(model),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Mean masked-patch loss over `images` with their fixed masks.
pub fn masked_mse(model: &Model<f32>, cfg: &RunConfig, images: &[&Raster]) -> Result<f64, PipelineError> {
    let losses: Vec<f64> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| Ok(f64::from(model.forward_mae(img, &fixed_mask(cfg, i))?.loss)))
        .collect::<Result<_, ModelError>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

fn init_model(cfg: &RunConfig) -> Result<Model<f32>, PipelineError> {
    match &cfg.paths.checkpoint {
        Some(p) => {
            if !p.exists() {
                return Err(PipelineError::config(
                    "paths.checkpoint",
                    format!("{} does not exist", p.display()),
                ));
            }
            load_model_for(p, cfg.model.image_h, cfg.model.image_w)
        }
        None => Ok(Model::new(cfg.model.clone(), derive_seed(cfg.seed, "init", 0))?),
    }
}

/// `pretrain`: masked-autoencoder training on the scans in `paths.data`.
pub fn run_pretrain(cfg: &RunConfig) -> Result<TrainSummary, PipelineError> {
    let out = prepare_out(cfg, "pretrain")?;
    let data = load_dataset(cfg.data()?, cfg.model.channels)?;
    let images: Vec<&Raster> = data.iter().map(|(_, r)| r).collect();
    let mut model = init_model(cfg)?;
    let grid = model.grid();
    let fixed: Vec<PatchMask> = (0..images.len()).map(|i| fixed_mask(cfg, i)).collect();
    let mut log = Vec::new();
    train_loop(
        &mut model,
        cfg,
        &images,
        |step, i| match cfg.optim.mask_mode {
            MaskMode::Fixed => Target::Mae(fixed[i].clone()),
            MaskMode::Fresh => {
                let stream = step.wrapping_mul(1 << 20) + i as u64;
                Target::Mae(sample_span_mask_with_rects(grid, &cfg.mask, &mut rng_for(cfg.seed, "mask", stream)).0)
            }
        },
        &mut log,
    )?;
    let mse = masked_mse(&model, cfg, &images)?;
    finish(&out, &model, &log, serde_json::json!({ "masked_mse": mse }))
}

/// One row of a QA dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question: String,
    pub answer: String,
    pub has_answer: bool,
    pub image: String,
    pub mask: PatchMask,
    pub seed: u64,
    pub split: String,
}

/// Build the instance with index `i` of `stream` (`"train"` or `"test"`).
pub fn qa_instance(cfg: &RunConfig, fonts: &FontRegistry, stream: &str, i: u64) -> Result<QaInstance, PipelineError> {
    let seed = derive_seed(cfg.seed, stream, i);
    let t = synth_qa_triple(&mut rng_for(seed, "triple", 0), &cfg.qa.synth);
    let ocr = cfg.qa.ocr.engine(derive_seed(cfg.seed, "ocr", 0));
    Ok(build_qa_instance(
        &t.question,
        &t.context,
        &t.answer,
        &cfg.qa.render,
        fonts,
        ocr.as_ref(),
        seed,
        &mut rng_for(seed, "render", 0),
    )?)
}

/// `qa.n_train` training instances and a balanced test set of `qa.n_test`.
/// Test candidates are drawn until the minority class reaches
/// `n_test / 2`; the majority is then downsampled.
pub fn qa_datasets(cfg: &RunConfig) -> Result<(Vec<QaInstance>, Vec<QaInstance>), PipelineError> {
    let fonts = FontRegistry::builtin();
    let train: Vec<QaInstance> = (0..cfg.qa.n_train as u64)
        .into_par_iter()
        .map(|i| qa_instance(cfg, &fonts, "qa-train", i))
        .collect::<Result<_, _>>()?;
    let half = cfg.qa.n_test / 2;
    let mut pool: Vec<QaInstance> = Vec::new();
    let (mut with, mut without) = (0usize, 0usize);
    let mut next = 0u64;
    const CHUNK: u64 = 64;
    let limit = 64 * (cfg.qa.n_test as u64 + CHUNK);
    'fill: while with.min(without) < half {
        if next >= limit {
            return Err(TaskError::OneClassOnly.into());
        }
        let chunk: Vec<QaInstance> = (next..next + CHUNK)
            .into_par_iter()
            .map(|i| qa_instance(cfg, &fonts, "qa-test", i))
            .collect::<Result<_, _>>()?;
        next += CHUNK;
        // Stop at the candidate where the minority class reaches `half`.
        for x in chunk {
            if x.has_answer {
                with += 1;
            } else {
                without += 1;
            }
            pool.push(x);
            if with.min(without) >= half {
                break 'fill;
            }
        }
    }
    let test = if half == 0 {
        Vec::new()
    } else {
        balance_test_set(&pool, |x| x.has_answer, &mut rng_for(cfg.seed, "balance", 0))?
    };
    Ok((train, test))
}

fn qa_record(x: &QaInstance, image: String, split: &str) -> QaRecord {
    QaRecord {
        question: x.question.clone(),
        answer: x.answer.clone(),
        has_answer: x.has_answer,
        image,
        mask: x.mask.clone(),
        seed: x.scan.meta.seed,
        split: split.into(),
    }
}

/// `qa build`: write QA instances as PNGs plus `qa.jsonl`.
pub fn run_qa_build(cfg: &RunConfig) -> Result<Vec<QaRecord>, PipelineError> {
    let out = prepare_out(cfg, "qa build")?;
    let (train, test) = qa_datasets(cfg)?;
    let mut rows = Vec::new();
    for (split, items) in [("train", &train), ("test", &test)] {
        for (i, x) in items.iter().enumerate() {
            let rel = format!("{split}/{i:05}.png");
            save_png(x.scan.pixels(), &out.join(&rel))?;
            rows.push(qa_record(x, rel, split));
        }
    }
    write_jsonl(&out.join("qa.jsonl"), &rows)?;
    Ok(rows)
}

fn load_qa(dir: &Path, channels: usize) -> Result<Vec<(QaRecord, Raster)>, PipelineError> {
    let rows: Vec<QaRecord> = read_jsonl(&dir.join("qa.jsonl"))?;
    rows.into_par_iter()
        .map(|r| {
            let img = load_raster(&dir.join(&r.image), channels)?;
            Ok((r, img))
        })
        .collect()
}

fn qa_model_config(cfg: &RunConfig) -> (usize, usize) {
    (cfg.qa.render.canvas.1, cfg.qa.render.canvas.0)
}

/// `finetune qa`: train the patch head (and encoder) on the training split
/// of `paths.data`, then score the test split.
pub fn run_finetune_qa(cfg: &RunConfig) -> Result<TrainSummary, PipelineError> {
    let out = prepare_out(cfg, "finetune qa")?;
    let rows = load_qa(cfg.data()?, cfg.model.channels)?;
    let (h, w) = qa_model_config(cfg);
    let mut run = cfg.clone();
    run.model.image_h = h;
    run.model.image_w = w;
    let mut model = init_model(&run)?;
    model.set_patch_head(&mut rng_for(cfg.seed, "head", 0));
    let train: Vec<&(QaRecord, Raster)> = rows.iter().filter(|(r, _)| r.split == "train").collect();
    if train.is_empty() {
        return Err(PipelineError::Data("no training instances".into()));
    }
    let images: Vec<&Raster> = train.iter().map(|(_, r)| r).collect();
    let targets: Vec<Target> = train.iter().map(|(r, _)| Target::Patches(r.mask.clone())).collect();
    let mut log = Vec::new();
    train_loop(&mut model, &run, &images, |_, i| targets[i].clone(), &mut log)?;
    let test: Vec<&(QaRecord, Raster)> = rows.iter().filter(|(r, _)| r.split == "test").collect();
    let eval = if test.is_empty() {
        Value::Null
    } else {
        serde_json::to_value(evaluate_qa(&model, &test, cfg.qa.threshold)?).expect("serializes")
    };
    finish(&out, &model, &log, eval)
}

fn qa_probs(model: &Model<f32>, items: &[&(QaRecord, Raster)]) -> Result<Vec<Vec<f32>>, PipelineError> {
    Ok(items
        .par_iter()
        .map(|(_, img)| model.head_patch(img))
        .collect::<Result<_, _>>()?)
}

fn evaluate_qa(model: &Model<f32>, items: &[&(QaRecord, Raster)], threshold: f64) -> Result<QaMetrics, PipelineError> {
    let probs = qa_probs(model, items)?;
    let truth: Vec<PatchMask> = items.iter().map(|(r, _)| r.mask.clone()).collect();
    Ok(qa_metrics(&probs, &truth, threshold)?)
}

/// Per-instance predictions accepted by `eval qa` in place of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPrediction {
    pub probs: Vec<f32>,
}

/// Probability heatmap scaled up to pixels: white 0, black 1.
pub fn heatmap(probs: &[f32], mask: &PatchMask) -> Raster {
    let g = mask.grid();
    let mut r = Raster::filled(g.rows * PATCH_SIZE, g.cols * PATCH_SIZE, 1, 1.0);
    for y in 0..r.height() {
        for x in 0..r.width() {
            let p = probs[g.index(y / PATCH_SIZE, x / PATCH_SIZE)];
            r.set(y, x, 0, 1.0 - p.clamp(0.0, 1.0));
        }
    }
    r
}

/// `eval qa`: score the test split with the checkpoint, or score
/// `preds` (one probability vector per test row) directly.
pub fn run_eval_qa(cfg: &RunConfig, preds: Option<&Path>) -> Result<QaMetrics, PipelineError> {
    let out = prepare_out(cfg, "eval qa")?;
    let dir = cfg.data()?;
    let metrics = match preds {
        Some(p) => {
            let rows: Vec<QaRecord> = read_jsonl(&dir.join("qa.jsonl"))?;
            let truth: Vec<PatchMask> = rows.into_iter().filter(|r| r.split == "test").map(|r| r.mask).collect();
            let probs: Vec<Vec<f32>> = read_jsonl::<PatchPrediction>(p)?.into_iter().map(|p| p.probs).collect();
            qa_metrics(&probs, &truth, cfg.qa.threshold)?
        }
        None => {
            let rows = load_qa(dir, cfg.model.channels)?;
            let (h, w) = qa_model_config(cfg);
            let model = load_model_for(cfg.checkpoint()?, h, w)?;
            let test: Vec<&(QaRecord, Raster)> = rows.iter().filter(|(r, _)| r.split == "test").collect();
            if cfg.qa.heatmaps {
                for (i, (p, (r, _))) in qa_probs(&model, &test)?.iter().zip(&test).enumerate() {
                    save_png(&heatmap(p, &r.mask), &out.join(format!("heatmaps/{i:05}.png")))?;
                }
            }
            evaluate_qa(&model, &test, cfg.qa.threshold)?
        }
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// One row of a sequence-classification dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqRecord {
    pub s1: String,
    pub s2: String,
    pub label: usize,
    pub image: String,
    pub split: String,
}

/// `seq build`: rendered sentence pairs labeled by marker presence.
pub fn run_seq_build(cfg: &RunConfig) -> Result<Vec<SeqRecord>, PipelineError> {
    let out = prepare_out(cfg, "seq build")?;
    let fonts = FontRegistry::builtin();
    let mut task = cfg.seq.task.clone();
    task.canvas = cfg.canvas();
    task.pair.degradation = cfg.degradation.clone();
    let mut rows = Vec::new();
    for (split, n) in [("train", cfg.seq.n_train), ("test", cfg.seq.n_test)] {
        let items = synth_seq_task(VOCAB, n, cfg.seq.noisy, &task, &fonts, &mut rng_for(cfg.seed, split, 0))?;
        for (i, it) in items.into_iter().enumerate() {
            let rel = format!("{split}/{i:05}.png");
            save_png(it.scan.pixels(), &out.join(&rel))?;
            rows.push(SeqRecord {
                s1: it.s1,
                s2: it.s2,
                label: it.label,
                image: rel,
                split: split.into(),
            });
        }
    }
    write_jsonl(&out.join("seq.jsonl"), &rows)?;
    Ok(rows)
}

fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f32::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

/// `finetune seq`: train a two-class sequence head, report test accuracy.
pub fn run_finetune_seq(cfg: &RunConfig) -> Result<TrainSummary, PipelineError> {
    let out = prepare_out(cfg, "finetune seq")?;
    let dir = cfg.data()?;
    let rows: Vec<SeqRecord> = read_jsonl(&dir.join("seq.jsonl"))?;
    let data: Vec<(SeqRecord, Raster)> = rows
        .into_par_iter()
        .map(|r| {
            let img = load_raster(&dir.join(&r.image), cfg.model.channels)?;
            Ok((r, img))
        })
        .collect::<Result<_, PipelineError>>()?;
    let mut model = init_model(cfg)?;
    model.set_seq_head(2, &mut rng_for(cfg.seed, "head", 0));
    let train: Vec<&(SeqRecord, Raster)> = data.iter().filter(|(r, _)| r.split == "train").collect();
    if train.is_empty() {
        return Err(PipelineError::Data("no training pairs".into()));
    }
    let images: Vec<&Raster> = train.iter().map(|(_, r)| r).collect();
    let targets: Vec<Target> = train.iter().map(|(r, _)| Target::Class(r.label)).collect();
    let mut log = Vec::new();
    train_loop(&mut model, cfg, &images, |_, i| targets[i].clone(), &mut log)?;
    let test: Vec<&(SeqRecord, Raster)> = data.iter().filter(|(r, _)| r.split == "test").collect();
    let correct: Vec<bool> = test
        .par_iter()
        .map(|(r, img)| Ok(argmax(&model.head_sequence(img)?) == r.label))
        .collect::<Result<_, ModelError>>()?;
    let acc = correct.iter().filter(|&&c| c).count() as f64 / correct.len().max(1) as f64;
    finish(
        &out,
        &model,
        &log,
        serde_json::json!({ "accuracy": acc, "n_test": correct.len() }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPreview {
    pub rle: String,
    pub count: usize,
    pub rects: Vec<(usize, usize, usize, usize)>,
}

/// Darken masked patches of `img` to mid-gray.
pub fn shade_masked(img: &Raster, mask: &PatchMask) -> Raster {
    let mut r = img.clone();
    let c = r.channels();
    for y in 0..r.height() {
        for x in 0..r.width() {
            if mask.get(y / PATCH_SIZE, x / PATCH_SIZE) {
                for ch in 0..c {
                    r.set(y, x, ch, 0.5);
                }
            }
        }
    }
    r
}

/// `mask-preview`: sample a span mask and draw it over a scan (the
/// optional `paths.data` image) or a blank canvas.
pub fn run_mask_preview(cfg: &RunConfig) -> Result<MaskPreview, PipelineError> {
    let out = prepare_out(cfg, "mask-preview")?;
    let (mask, rects) =
        sample_span_mask_with_rects(cfg.model.grid(), &cfg.mask, &mut rng_for(cfg.seed, "mask-preview", 0));
    let base = match &cfg.paths.data {
        Some(p) => load_raster(p, cfg.model.channels)?,
        None => Raster::filled(cfg.model.image_h, cfg.model.image_w, cfg.model.channels, 1.0),
    };
    if (base.height(), base.width()) != (cfg.model.image_h, cfg.model.image_w) {
        return Err(PipelineError::Data(format!(
            "image is {}x{}, model input is {}x{}",
            base.height(),
            base.width(),
            cfg.model.image_h,
            cfg.model.image_w
        )));
    }
    save_png(&shade_masked(&base, &mask), &out.join("mask.png"))?;
    let preview = MaskPreview {
        rle: mask.to_rle(),
        count: mask.count(),
        rects: rects.iter().map(|r| (r.row, r.col, r.height, r.width)).collect(),
    };
    write_json(&out.join("mask.json"), &preview)?;
    Ok(preview)
}

#[derive(Serialize)]
struct EmbeddingRow<'a> {
    id: &'a str,
    vector: &'a [f32],
}

/// Embed every scan of a dataset into an index.
pub fn build_index(model: &Model<f32>, scans: &[(String, Raster)]) -> Result<EmbeddingIndex, PipelineError> {
    let vectors: Vec<Vec<f32>> = scans
        .par_iter()
        .map(|(_, r)| {
            let s = Scan::new(r.clone(), ScanMeta::default()).map_err(|e| PipelineError::Data(e.to_string()))?;
            Ok(embed(model, &s)?)
        })
        .collect::<Result<_, PipelineError>>()?;
    let mut index = EmbeddingIndex::new(model.cfg.width, fingerprint(model));
    for ((id, _), v) in scans.iter().zip(&vectors) {
        index.insert(id.clone(), v)?;
    }
    Ok(index)
}

/// `embed`: index the scans of `paths.data`; also exports raw vectors as
/// `embeddings.jsonl`.
pub fn run_embed(cfg: &RunConfig) -> Result<EmbeddingIndex, PipelineError> {
    let out = prepare_out(cfg, "embed")?;
    let model = load_model(cfg.checkpoint()?)?;
    let scans = load_dataset(cfg.data()?, model.cfg.channels)?;
    let index = build_index(&model, &scans)?;
    index.save(&out.join("index.pxix"))?;
    let rows: Vec<EmbeddingRow> = index
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| EmbeddingRow {
            id,
            vector: index.vector(i),
        })
        .collect();
    write_jsonl(&out.join("embeddings.jsonl"), &rows)?;
    Ok(index)
}

/// `search`: embed `probe` and return its `k` nearest scans.
pub fn run_search(cfg: &RunConfig, index_path: &Path, probe: &Path) -> Result<Vec<Hit>, PipelineError> {
    cfg.validate()?;
    let index = EmbeddingIndex::load(index_path)?;
    let model = load_model(cfg.checkpoint()?)?;
    let fp = fingerprint(&model);
    if fp != index.fingerprint {
        return Err(PipelineError::Data(format!(
            "index was built with checkpoint {}, not {fp}",
            index.fingerprint
        )));
    }
    let img = load_raster(probe, model.cfg.channels)?;
    let scan = Scan::new(img, ScanMeta::default()).map_err(img_err(probe))?;
    let v = embed(&model, &scan)?;
    let k = cfg.k.min(index.len());
    Ok(index.query(&v, k)?)
}

/// Original, masked input and reconstruction side by side. The third panel
/// shows predictions in masked patches and the original elsewhere.
pub fn triptych(original: &Raster, mask: &PatchMask, recon: &Raster) -> Raster {
    let (h, w, c) = (original.height(), original.width(), original.channels());
    let gap = 4;
    let mut out = Raster::filled(h, 3 * w + 2 * gap, c, 1.0);
    let masked = shade_masked(original, mask);
    let ps = mask.grid().patch_size;
    let mut pasted = original.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y / ps, x / ps) {
                for ch in 0..c {
                    pasted.set(y, x, ch, recon.get(y, x, ch));
                }
            }
        }
    }
    for (k, img) in [original, &masked, &pasted].into_iter().enumerate() {
        let x0 = k * (w + gap);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.set(y, x0 + x, ch, img.get(y, x, ch));
                }
            }
        }
    }
    out
}

/// `recon-dump`: triptychs for the scans of `paths.data`, masked with the
/// same fixed masks pretraining evaluates on.
pub fn run_recon_dump(cfg: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let out = prepare_out(cfg, "recon-dump")?;
    let model = load_model(cfg.checkpoint()?)?;
    let scans = load_dataset(cfg.data()?, model.cfg.channels)?;
    let mut run = cfg.clone();
    run.model = model.cfg.clone();
    let mut written = Vec::new();
    for (i, (_, img)) in scans.iter().enumerate() {
        let mask = fixed_mask(&run, i);
        let r = model.forward_mae(img, &mask)?;
        let path = out.join(format!("recon/{i:05}.png"));
        save_png(&triptych(img, &mask, &r.reconstruction), &path)?;
        written.push(path);
    }
    Ok(written)
}
