//! JSONL dataset manifests shared by synthetic and ingested datasets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::degrade::AppliedTransform;
use crate::render::RenderPlan;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordBoxRecord {
    pub text: String,
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub font: usize,
    pub size: u32,
    pub offset: usize,
}

/// One scan in a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub seed: u64,
    pub split: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_offset: Option<usize>,
    #[serde(default)]
    pub word_boxes: Vec<WordBoxRecord>,
    #[serde(default)]
    pub spans: Vec<SpanRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<AppliedTransform>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

impl ManifestEntry {
    pub fn new(path: impl Into<String>, seed: u64, split: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            seed,
            split: split.into(),
            source_id: String::new(),
            crop_offset: None,
            word_boxes: Vec::new(),
            spans: Vec::new(),
            transform: None,
            truncated: false,
        }
    }

    /// Fill word boxes and spans from a layout.
    pub fn with_plan(mut self, plan: &RenderPlan) -> Self {
        self.word_boxes = plan
            .words
            .iter()
            .map(|w| WordBoxRecord {
                text: w.text.clone(),
                x0: w.bbox.x0,
                y0: w.bbox.y0,
                x1: w.bbox.x1,
                y1: w.bbox.y1,
            })
            .collect();
        self.spans = plan
            .spans
            .iter()
            .map(|s| SpanRecord {
                font: s.font.family_id,
                size: s.font.size_px,
                offset: s.offset,
            })
            .collect();
        self.truncated |= plan.truncated;
        self
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ManifestError> {
    let io = |source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for row in rows {
        let line = serde_json::to_string(row).expect("manifest rows serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ManifestError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|source| ManifestError::Io {
        path: p.clone(),
        source,
    })?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ManifestError::Io {
            path: p.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|source| ManifestError::Parse {
            path: p.clone(),
            line: i + 1,
            source,
        })?);
    }
    Ok(rows)
}
