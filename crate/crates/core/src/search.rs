//! Mean-pooled scan embeddings and exact cosine-similarity search.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::model::{Model, ModelError, Scalar};
use crate::scan::Scan;

const MAGIC: &[u8; 4] = b"PXIX";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("index is empty")]
    EmptyIndex,
    #[error("k = {k} exceeds index size {n}")]
    TooManyResults { k: usize, n: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("vector has width {got}, index expects {want}")]
    Width { got: usize, want: usize },
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("corrupt index: {0}")]
    Format(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Scale to unit L2 norm, accumulating in `f64`.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>, SearchError> {
    let n = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(SearchError::ZeroVector);
    }
    Ok(v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

/// Unit-normalized mean of the final-layer patch embeddings.
pub fn embed<T: Scalar>(model: &Model<T>, scan: &Scan) -> Result<Vec<f32>, SearchError> {
    let pooled = model.pooled_embedding(scan.pixels())?;
    let v: Vec<f32> = pooled.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect();
    normalize(&v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    width: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    /// Checkpoint fingerprint of the embedding model.
    pub fingerprint: String,
}

impl EmbeddingIndex {
    pub fn new(width: usize, fingerprint: impl Into<String>) -> Self {
        Self {
            width,
            ids: Vec::new(),
            vectors: Vec::new(),
            fingerprint: fingerprint.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.width..(i + 1) * self.width]
    }

    /// Add a vector; it is normalized on the way in.
    pub fn insert(&mut self, id: impl Into<String>, v: &[f32]) -> Result<(), SearchError> {
        let id = id.into();
        if v.len() != self.width {
            return Err(SearchError::Width {
                got: v.len(),
                want: self.width,
            });
        }
        if self.ids.contains(&id) {
            return Err(SearchError::DuplicateId(id));
        }
        self.vectors.extend(normalize(v)?);
        self.ids.push(id);
        Ok(())
    }

    /// Exact top-`k` by descending cosine, ties broken by ascending id.
    pub fn query(&self, probe: &[f32], k: usize) -> Result<Vec<Hit>, SearchError> {
        if self.is_empty() {
            return Err(SearchError::EmptyIndex);
        }
        if k > self.len() {
            return Err(SearchError::TooManyResults { k, n: self.len() });
        }
        if probe.len() != self.width {
            return Err(SearchError::Width {
                got: probe.len(),
                want: self.width,
            });
        }
        let p: Vec<f64> = normalize(probe)?.iter().map(|&x| f64::from(x)).collect();
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|i| {
                let dot = self.vector(i).iter().zip(&p).map(|(&a, &b)| f64::from(a) * b).sum();
                (dot, i)
            })
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        if k < scored.len() && k > 0 {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(cosine, i)| Hit {
                id: self.ids[i].clone(),
                cosine,
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.vectors.len() * 4);
        out.extend_from_slice(MAGIC);
        for n in [VERSION, self.len() as u32, self.width as u32] {
            out.extend_from_slice(&n.to_le_bytes());
        }
        put_str(&mut out, &self.fingerprint);
        for id in &self.ids {
            put_str(&mut out, id);
        }
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut r: &[u8]) -> Result<Self, SearchError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SearchError::Format("bad magic".into()));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(SearchError::Format(format!("unsupported version {version}")));
        }
        let n = get_u32(&mut r)? as usize;
        let width = get_u32(&mut r)? as usize;
        let fingerprint = get_str(&mut r)?;
        let ids = (0..n).map(|_| get_str(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id) {
                return Err(SearchError::DuplicateId(id.clone()));
            }
        }
        let need = n
            .checked_mul(width)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| SearchError::Format("size overflow".into()))?;
        if r.len() != need {
            return Err(SearchError::Format(format!(
                "expected {need} vector bytes, found {}",
                r.len()
            )));
        }
        let vectors = r
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self {
            width,
            ids,
            vectors,
            fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SearchError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SearchError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_u32(r: &mut &[u8]) -> Result<u32, SearchError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String, SearchError> {
    let n = get_u32(r)? as usize;
    if r.len() < n {
        return Err(SearchError::Format("truncated string".into()));
    }
    let (s, rest) = r.split_at(n);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|e| SearchError::Format(e.to_string()))
}
