//! Embedding matrices on disk, keyed by original node id.
//!
//! Binary layout (little-endian): magic `EMB1`, `count: u64`, `d: u32`, then
//! per row `id_len: u32`, UTF-8 id bytes, `d` × `f32`. The CSV layout is
//! `node_id,e0,...,e{d-1}`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmbeddingError + '_ {
    move |source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> EmbeddingError {
    EmbeddingError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub ids: Vec<String>,
    pub dim: usize,
    /// Row-major, `ids.len() × dim`.
    pub values: Vec<f32>,
}

impl Embeddings {
    pub fn new(ids: Vec<String>, dim: usize, values: Vec<f32>) -> Self {
        assert_eq!(ids.len() * dim, values.len(), "embedding shape mismatch");
        Self { ids, dim, values }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.values.len() * 4 + self.ids.len() * 12);
        out.extend_from_slice(EMBEDDINGS_MAGIC);
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in self.row(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, EmbeddingError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], EmbeddingError> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| fmt_err(path, "truncated file"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != EMBEDDINGS_MAGIC {
            return Err(fmt_err(path, "bad magic (expected EMB1)"));
        }
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        let mut values = Vec::with_capacity((count * dim).min(1 << 24));
        for _ in 0..count {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let id = std::str::from_utf8(take(len)?).map_err(|_| fmt_err(path, "id is not UTF-8"))?;
            ids.push(id.to_string());
            for chunk in take(dim * 4)?.chunks_exact(4) {
                values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
        if take(1).is_ok() {
            return Err(fmt_err(path, "trailing bytes"));
        }
        Ok(Self { ids, dim, values })
    }

    pub fn write_bin(&self, path: &Path) -> Result<(), EmbeddingError> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EmbeddingError> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        let header: Vec<String> = std::iter::once("node_id".to_string())
            .chain((0..self.dim).map(|j| format!("e{j}")))
            .collect();
        writeln!(w, "{}", header.join(",")).map_err(io_err(path))?;
        for (i, id) in self.ids.iter().enumerate() {
            write!(w, "{id}").map_err(io_err(path))?;
            for v in self.row(i) {
                write!(w, ",{v}").map_err(io_err(path))?;
            }
            writeln!(w).map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn read_csv(path: &Path) -> Result<Self, EmbeddingError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| fmt_err(path, e.to_string()))?;
        let dim = rdr.headers().map_err(|e| fmt_err(path, e.to_string()))?.len().saturating_sub(1);
        let (mut ids, mut values) = (Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| fmt_err(path, e.to_string()))?;
            ids.push(rec[0].to_string());
            for f in rec.iter().skip(1) {
                let v: f32 = f.parse().map_err(|_| fmt_err(path, format!("line {}: bad value {f:?}", i + 2)))?;
                values.push(v);
            }
        }
        Ok(Self { ids, dim, values })
    }

    /// Reads either layout, detected by the magic bytes.
    pub fn read(path: &Path) -> Result<Self, EmbeddingError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        if bytes.starts_with(EMBEDDINGS_MAGIC) {
            Self::from_bytes(&bytes, path)
        } else {
            Self::read_csv(path)
        }
    }
}

/// Reads `node_id,class_id` rows.
pub fn read_labels(path: &Path) -> Result<Vec<(String, usize)>, EmbeddingError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| fmt_err(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| fmt_err(path, e.to_string()))?;
        let class = rec
            .get(1)
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| fmt_err(path, format!("line {}: expected node_id,class_id", i + 2)))?;
        out.push((rec[0].to_string(), class));
    }
    Ok(out)
}

/// Embedding rows and labels for ids present in both, in embedding order.
pub fn join_labels(emb: &Embeddings, labels: &[(String, usize)]) -> (Vec<String>, Vec<Vec<f64>>, Vec<usize>) {
    let map: HashMap<&str, usize> = labels.iter().map(|(id, c)| (id.as_str(), *c)).collect();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for (i, id) in emb.ids.iter().enumerate() {
        if let Some(&c) = map.get(id.as_str()) {
            ids.push(id.clone());
            rows.push(emb.row(i).iter().map(|&v| v as f64).collect());
            ys.push(c);
        }
    }
    (ids, rows, ys)
}
