//! Python bindings. Images cross the boundary as `(height, width, pixels)`
//! with row-major grayscale values in `[0, 1]`; masks as nested lists of
//! booleans, one inner list per patch row.

use std::path::PathBuf;

use pixeldoc_core::corpus::crop_offsets;
use pixeldoc_core::masking::{self, PatchGrid, PatchMask, SpanMaskConfig};
use pixeldoc_core::model::{self, ModelConfig};
use pixeldoc_core::pipeline::{self, RunConfig};
use pixeldoc_core::render::FontRegistry;
use pixeldoc_core::scan::{PixelBox, Raster, Scan, ScanMeta};
use pixeldoc_core::search;
use pixeldoc_core::seed;
use pixeldoc_core::tasks::{fuzzy, metrics};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn raster(height: usize, width: usize, pixels: Vec<f32>) -> PyResult<Raster> {
    Raster::from_vec(height, width, 1, pixels).map_err(value_err)
}

fn grid_rows(m: &PatchMask) -> Vec<Vec<bool>> {
    let g = m.grid();
    m.bits().chunks(g.cols.max(1)).map(<[bool]>::to_vec).collect()
}

fn mask_from_rows(rows: &[Vec<bool>]) -> PyResult<PatchMask> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("mask rows differ in length"));
    }
    let bits = rows.concat();
    PatchMask::from_bits(PatchGrid::new(rows.len(), cols), bits).ok_or_else(|| PyValueError::new_err("bad mask"))
}

fn config(json: &str) -> PyResult<RunConfig> {
    RunConfig::from_json(json).map_err(value_err)
}

#[pyfunction]
fn derive_seed(root: u64, purpose: &str, index: u64) -> u64 {
    seed::derive_seed(root, purpose, index)
}

#[pyfunction]
#[pyo3(signature = (rows, cols, seed, ratio = 0.28, trim = true))]
fn sample_span_mask(rows: usize, cols: usize, seed: u64, ratio: f64, trim: bool) -> Vec<Vec<bool>> {
    let cfg = SpanMaskConfig {
        ratio,
        trim,
        ..SpanMaskConfig::default()
    };
    grid_rows(&masking::sample_span_mask(
        PatchGrid::new(rows, cols),
        &cfg,
        &mut seed::rng_from(seed),
    ))
}

/// Patch labels for pixel boxes `(x0, y0, x1, y1)`, half-open.
#[pyfunction]
fn boxes_to_mask(boxes: Vec<(i64, i64, i64, i64)>, rows: usize, cols: usize) -> Vec<Vec<bool>> {
    let boxes: Vec<PixelBox> = boxes
        .into_iter()
        .map(|(a, b, c, d)| PixelBox::new(a, b, c, d))
        .collect();
    grid_rows(&masking::boxes_to_mask(&boxes, PatchGrid::new(rows, cols)))
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    fuzzy::levenshtein(a, b)
}

/// Best word window `(start, end, distance)` for `answer`, `end`
/// inclusive, or None.
#[pyfunction]
#[pyo3(signature = (answer, words, max_norm_dist = 0.3))]
fn fuzzy_locate(answer: &str, words: Vec<String>, max_norm_dist: f64) -> Option<(usize, usize, usize)> {
    let words: Vec<&str> = words.iter().map(String::as_str).collect();
    fuzzy::fuzzy_locate(answer, &words, max_norm_dist).map(|m| (m.start, m.end, m.distance))
}

#[pyfunction]
#[pyo3(name = "crop_offsets", signature = (height, window = 368, stride = 128, anchor_tail = false))]
fn py_crop_offsets(height: usize, window: usize, stride: usize, anchor_tail: bool) -> PyResult<Vec<usize>> {
    if stride == 0 {
        return Err(PyValueError::new_err("stride must be positive"));
    }
    Ok(crop_offsets(height, window, stride, anchor_tail))
}

/// `(binary_acc, patch_acc, one_overlap)` of per-patch probabilities.
#[pyfunction]
#[pyo3(signature = (preds, truth, threshold = 0.5))]
fn qa_metrics(preds: Vec<Vec<f32>>, truth: Vec<Vec<Vec<bool>>>, threshold: f64) -> PyResult<(f64, f64, f64)> {
    let truth: Vec<PatchMask> = truth.iter().map(|t| mask_from_rows(t)).collect::<PyResult<_>>()?;
    let m = metrics::qa_metrics(&preds, &truth, threshold).map_err(value_err)?;
    Ok((m.binary_acc, m.patch_acc, m.one_overlap))
}

/// Render synthetic scan `index` under a JSON run configuration.
#[pyfunction]
#[pyo3(signature = (index, config = "{}"))]
fn synth_scan(index: u64, config: &str) -> PyResult<(usize, usize, Vec<f32>)> {
    let cfg = self::config(config)?;
    let corpus = pipeline::load_corpus(&cfg).map_err(value_err)?;
    let (scan, _) = pipeline::synth_scan(&cfg, &corpus, &FontRegistry::builtin(), index).map_err(value_err)?;
    let px = scan.pixels().to_gray();
    Ok((px.height(), px.width(), px.into_data()))
}

#[pyfunction]
fn load_png(path: PathBuf) -> PyResult<(usize, usize, Vec<f32>)> {
    let r = Raster::load_gray(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok((r.height(), r.width(), r.into_data()))
}

fn dispatch(command: &str, cfg: &RunConfig) -> Result<Option<serde_json::Value>, pipeline::PipelineError> {
    let to_value = |v| serde_json::to_value(v).expect("serializes");
    Ok(Some(match command {
        "synth" => serde_json::json!({ "scans": pipeline::run_synth(cfg)?.len() }),
        "pretrain" => to_value(pipeline::run_pretrain(cfg)?),
        "qa-build" => serde_json::json!({ "instances": pipeline::run_qa_build(cfg)?.len() }),
        "finetune-qa" => to_value(pipeline::run_finetune_qa(cfg)?),
        "seq-build" => serde_json::json!({ "pairs": pipeline::run_seq_build(cfg)?.len() }),
        "finetune-seq" => to_value(pipeline::run_finetune_seq(cfg)?),
        "embed" => serde_json::json!({ "vectors": pipeline::run_embed(cfg)?.len() }),
        "recon-dump" => serde_json::json!({ "triptychs": pipeline::run_recon_dump(cfg)?.len() }),
        _ => return Ok(None),
    }))
}

/// Run a pipeline command (`synth`, `pretrain`, `qa-build`, `finetune-qa`,
/// `seq-build`, `finetune-seq`, `embed`, `recon-dump`) and return its
/// result as JSON.
#[pyfunction]
#[pyo3(signature = (command, config = "{}"))]
fn run(py: Python<'_>, command: &str, config: &str) -> PyResult<String> {
    let cfg = self::config(config)?;
    match py.detach(|| dispatch(command, &cfg)) {
        Ok(Some(v)) => Ok(v.to_string()),
        Ok(None) => Err(PyValueError::new_err(format!("unknown command {command:?}"))),
        Err(e) => Err(value_err(e)),
    }
}

/// A masked-autoencoder vision transformer (32-bit).
#[pyclass(name = "Model")]
struct PyModel {
    inner: model::Model<f32>,
}

#[pymethods]
impl PyModel {
    /// New model from a JSON `ModelConfig` and an initialization seed.
    #[new]
    #[pyo3(signature = (config = "{}", seed = 0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config).map_err(value_err)?;
        Ok(Self {
            inner: model::Model::new(cfg, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = model::load_checkpoint(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.inner, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn fingerprint(&self) -> String {
        model::fingerprint(&self.inner)
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.inner.cfg).expect("serializes")
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params.scalar_count()
    }

    /// Unit-norm mean-pooled embedding of an image.
    fn embed(&self, height: usize, width: usize, pixels: Vec<f32>) -> PyResult<Vec<f32>> {
        let scan = Scan::new(raster(height, width, pixels)?, ScanMeta::default()).map_err(value_err)?;
        search::embed(&self.inner, &scan).map_err(value_err)
    }

    /// Masked-patch loss and the reconstructed image for `mask`.
    fn reconstruct(
        &self,
        height: usize,
        width: usize,
        pixels: Vec<f32>,
        mask: Vec<Vec<bool>>,
    ) -> PyResult<(f32, Vec<f32>)> {
        let img = raster(height, width, pixels)?;
        let out = self
            .inner
            .forward_mae(&img, &mask_from_rows(&mask)?)
            .map_err(value_err)?;
        Ok((out.loss, out.reconstruction.into_data()))
    }

    /// Per-patch answer probabilities (needs a patch head).
    fn patch_probs(&self, height: usize, width: usize, pixels: Vec<f32>) -> PyResult<Vec<f32>> {
        self.inner
            .head_patch(&raster(height, width, pixels)?)
            .map_err(value_err)
    }
}

/// Exact cosine-similarity index.
#[pyclass(name = "EmbeddingIndex")]
struct PyIndex {
    inner: search::EmbeddingIndex,
}

#[pymethods]
impl PyIndex {
    #[new]
    #[pyo3(signature = (width, fingerprint = ""))]
    fn new(width: usize, fingerprint: &str) -> Self {
        Self {
            inner: search::EmbeddingIndex::new(width, fingerprint),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = search::EmbeddingIndex::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn insert(&mut self, id: String, vector: Vec<f32>) -> PyResult<()> {
        self.inner.insert(id, &vector).map_err(value_err)
    }

    /// Top `k` `(id, cosine)` pairs, best first.
    #[pyo3(signature = (vector, k = 10))]
    fn query(&self, vector: Vec<f32>, k: usize) -> PyResult<Vec<(String, f64)>> {
        Ok(self
            .inner
            .query(&vector, k)
            .map_err(value_err)?
            .into_iter()
            .map(|h| (h.id, h.cosine))
            .collect())
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Pixel-based language modelling for historical document scans.
#[pymodule]
fn pixeldoc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyIndex>()?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(sample_span_mask, m)?)?;
    m.add_function(wrap_pyfunction!(boxes_to_mask, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(fuzzy_locate, m)?)?;
    m.add_function(wrap_pyfunction!(py_crop_offsets, m)?)?;
    m.add_function(wrap_pyfunction!(qa_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scan, m)?)?;
    m.add_function(wrap_pyfunction!(load_png, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
