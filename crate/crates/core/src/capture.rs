//! Activation capture bundles: the interchange unit between a model executor
//! (the built-in toy model or an external exporter) and the analysis code.
//!
//! On disk a bundle is a directory:
//!
//! ```text
//! manifest.json          format "MCT1", model metadata, trace table, blob table
//! wv_<layer>.bin         value projection, d_model x value_out_dim
//! <trace>_v_<layer>.bin  last-token value vector, value_out_dim
//! <trace>_h_<layer>.bin  last-token post-attention residual, d_model
//! <trace>_emb.bin        input embedding of the edited token, d_model (optional)
//! ```
//!
//! Blobs are raw little-endian arrays, row-major, with no header. Their byte
//! length must equal `product(shape) * dtype_size`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

pub const FORMAT_VERSION: &str = "MCT1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn encode(self, values: &[f64], out: &mut Vec<u8>) {
        match self {
            Dtype::F32 => {
                for &v in values {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub model_id: String,
    pub n_layers: usize,
    pub d_model: usize,
    /// Columns of each layer's W_V. Equals `d_model` unless the model uses
    /// grouped-query attention.
    pub value_out_dim: usize,
    pub dtype: Dtype,
    /// Free text: tokenizer, hook points, head layout.
    #[serde(default)]
    pub notes: String,
}

/// Last-token activations for one input text.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTrace {
    pub label: String,
    pub text: String,
    pub token_count: usize,
    pub edited_token_index: Option<usize>,
    pub edited_token_embedding: Option<Vector>,
    /// Per layer, the last token's value vector (`z W_V`).
    pub v_last: Vec<Vector>,
    /// Per layer, the last token's hidden state after the attention residual.
    pub h_last: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureBundle {
    pub meta: TraceMeta,
    pub w_v: Vec<Matrix>,
    pub traces: Vec<InputTrace>,
}

impl CaptureBundle {
    pub fn trace(&self, label: &str) -> Result<&InputTrace> {
        self.traces
            .iter()
            .find(|t| t.label == label)
            .ok_or_else(|| Error::MissingTrace(label.to_string()))
    }

    pub fn trace_by_text(&self, text: &str) -> Option<&InputTrace> {
        self.traces.iter().find(|t| t.text == text)
    }

    pub fn n_layers(&self) -> usize {
        self.meta.n_layers
    }
}

/// One failed invariant, with where it failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl Violation {
    fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            location: location.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    model_id: String,
    n_layers: usize,
    d_model: usize,
    value_out_dim: usize,
    dtype: Dtype,
    #[serde(default)]
    notes: String,
    traces: Vec<TraceEntry>,
    blobs: BTreeMap<String, BlobEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceEntry {
    label: String,
    text: String,
    token_count: usize,
    edited_token_index: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobEntry {
    file: String,
    dtype: Dtype,
    shape: Vec<usize>,
}

pub fn wv_blob(layer: usize) -> String {
    format!("wv_{layer}")
}

pub fn value_blob(trace: &str, layer: usize) -> String {
    format!("{trace}_v_{layer}")
}

pub fn hidden_blob(trace: &str, layer: usize) -> String {
    format!("{trace}_h_{layer}")
}

pub fn embedding_blob(trace: &str) -> String {
    format!("{trace}_emb")
}

/// Trace labels become file-name prefixes.
fn label_problem(label: &str) -> Option<&'static str> {
    if label.is_empty() {
        Some("label is empty")
    } else if label == "." || label == ".." || label.starts_with('.') {
        Some("label may not start with '.'")
    } else if label
        .chars()
        .any(|c| matches!(c, '/' | '\\' | '\0') || c.is_control())
    {
        Some("label contains a path separator or control character")
    } else {
        None
    }
}

fn check_vector(out: &mut Vec<Violation>, location: String, v: &Vector, len: usize) {
    if v.len() != len {
        out.push(Violation::new(
            location,
            format!("length {} but expected {len}", v.len()),
        ));
    } else if !v.is_finite() {
        out.push(Violation::new(location, "contains non-finite values"));
    }
}

/// Checks every structural invariant of `b`. An empty list means valid.
pub fn validate_bundle(b: &CaptureBundle) -> Vec<Violation> {
    let mut out = Vec::new();
    let m = &b.meta;
    if m.n_layers == 0 {
        out.push(Violation::new("meta.n_layers", "must be at least 1"));
    }
    if m.d_model == 0 {
        out.push(Violation::new("meta.d_model", "must be at least 1"));
    }
    if m.value_out_dim == 0 {
        out.push(Violation::new("meta.value_out_dim", "must be at least 1"));
    }

    if b.w_v.len() != m.n_layers {
        out.push(Violation::new(
            "w_v",
            format!(
                "{} matrices but meta declares {} layers",
                b.w_v.len(),
                m.n_layers
            ),
        ));
    }
    for (l, w) in b.w_v.iter().enumerate() {
        if w.shape() != (m.d_model, m.value_out_dim) {
            out.push(Violation::new(
                format!("w_v[{l}]"),
                format!(
                    "shape {}x{} but expected {}x{}",
                    w.rows(),
                    w.cols(),
                    m.d_model,
                    m.value_out_dim
                ),
            ));
        } else if !w.is_finite() {
            out.push(Violation::new(
                format!("w_v[{l}]"),
                "contains non-finite values",
            ));
        }
    }

    let mut seen = HashSet::new();
    for t in &b.traces {
        let at = |field: &str| format!("trace {:?}.{field}", t.label);
        if let Some(problem) = label_problem(&t.label) {
            out.push(Violation::new(at("label"), problem));
        }
        if !seen.insert(t.label.as_str()) {
            out.push(Violation::new(at("label"), "duplicate trace label"));
        }
        if let Some(idx) = t.edited_token_index {
            if idx >= t.token_count {
                out.push(Violation::new(
                    at("edited_token_index"),
                    format!("{idx} is not below token_count {}", t.token_count),
                ));
            }
        }
        if let Some(emb) = &t.edited_token_embedding {
            check_vector(&mut out, at("edited_token_embedding"), emb, m.d_model);
        }
        for (name, vs, len) in [
            ("v_last", &t.v_last, m.value_out_dim),
            ("h_last", &t.h_last, m.d_model),
        ] {
            if vs.len() != m.n_layers {
                out.push(Violation::new(
                    at(name),
                    format!("{} layers but meta declares {}", vs.len(), m.n_layers),
                ));
            }
            for (l, v) in vs.iter().enumerate() {
                check_vector(&mut out, format!("trace {:?}.{name}[{l}]", t.label), v, len);
            }
        }
    }
    out
}

/// Writes `b` as an `MCT1` directory at `path`, creating it if needed.
/// The manifest is written last.
pub fn write_bundle(b: &CaptureBundle, path: &Path) -> Result<()> {
    let violations = validate_bundle(b);
    if !violations.is_empty() {
        return Err(Error::InvalidBundle(violations));
    }
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;

    let dtype = b.meta.dtype;
    let mut blobs = BTreeMap::new();
    let mut emit = |name: String, shape: Vec<usize>, values: &[f64]| -> Result<()> {
        let file = format!("{name}.bin");
        let mut bytes = Vec::with_capacity(values.len() * dtype.size());
        dtype.encode(values, &mut bytes);
        let target = path.join(&file);
        fs::write(&target, bytes).map_err(|e| Error::io(&target, e))?;
        blobs.insert(name, BlobEntry { file, dtype, shape });
        Ok(())
    };

    for (l, w) in b.w_v.iter().enumerate() {
        emit(wv_blob(l), vec![w.rows(), w.cols()], w.data())?;
    }
    for t in &b.traces {
        for (l, v) in t.v_last.iter().enumerate() {
            emit(value_blob(&t.label, l), vec![v.len()], v)?;
        }
        for (l, h) in t.h_last.iter().enumerate() {
            emit(hidden_blob(&t.label, l), vec![h.len()], h)?;
        }
        if let Some(e) = &t.edited_token_embedding {
            emit(embedding_blob(&t.label), vec![e.len()], e)?;
        }
    }

    let manifest = Manifest {
        format: FORMAT_VERSION.to_string(),
        model_id: b.meta.model_id.clone(),
        n_layers: b.meta.n_layers,
        d_model: b.meta.d_model,
        value_out_dim: b.meta.value_out_dim,
        dtype,
        notes: b.meta.notes.clone(),
        traces: b
            .traces
            .iter()
            .map(|t| TraceEntry {
                label: t.label.clone(),
                text: t.text.clone(),
                token_count: t.token_count,
                edited_token_index: t.edited_token_index,
            })
            .collect(),
        blobs,
    };
    let target = path.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&target, text).map_err(|e| Error::io(&target, e))?;
    Ok(())
}

/// Reads and validates a bundle directory. 32-bit blobs are widened to f64.
pub fn read_bundle(path: &Path) -> Result<CaptureBundle> {
    let manifest_path = path.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    match raw.get("format").and_then(|f| f.as_str()) {
        Some(FORMAT_VERSION) => {}
        Some(other) => return Err(Error::UnsupportedVersion(other.to_string())),
        None => return Err(Error::UnsupportedVersion(String::new())),
    }
    let manifest: Manifest = serde_json::from_value(raw)?;

    let load = |name: &str, expected_shape: &[usize]| -> Result<Vec<f64>> {
        let entry = manifest.blobs.get(name).ok_or_else(|| {
            Error::InvalidBundle(vec![Violation::new(
                format!("blobs.{name}"),
                "missing from manifest blob table",
            )])
        })?;
        if entry.shape != expected_shape {
            return Err(Error::InvalidBundle(vec![Violation::new(
                format!("blobs.{name}"),
                format!(
                    "shape {:?} but meta implies {:?}",
                    entry.shape, expected_shape
                ),
            )]));
        }
        read_blob(path, name, entry)
    };

    let d = manifest.d_model;
    let vout = manifest.value_out_dim;
    let mut w_v = Vec::with_capacity(manifest.n_layers);
    for l in 0..manifest.n_layers {
        let data = load(&wv_blob(l), &[d, vout])?;
        w_v.push(Matrix::new(d, vout, data)?);
    }

    let mut traces = Vec::with_capacity(manifest.traces.len());
    for entry in &manifest.traces {
        if let Some(problem) = label_problem(&entry.label) {
            return Err(Error::InvalidBundle(vec![Violation::new(
                format!("trace {:?}.label", entry.label),
                problem,
            )]));
        }
        let mut v_last = Vec::with_capacity(manifest.n_layers);
        let mut h_last = Vec::with_capacity(manifest.n_layers);
        for l in 0..manifest.n_layers {
            v_last.push(Vector::new(load(&value_blob(&entry.label, l), &[vout])?));
            h_last.push(Vector::new(load(&hidden_blob(&entry.label, l), &[d])?));
        }
        let emb_name = embedding_blob(&entry.label);
        let edited_token_embedding = if manifest.blobs.contains_key(&emb_name) {
            Some(Vector::new(load(&emb_name, &[d])?))
        } else {
            None
        };
        traces.push(InputTrace {
            label: entry.label.clone(),
            text: entry.text.clone(),
            token_count: entry.token_count,
            edited_token_index: entry.edited_token_index,
            edited_token_embedding,
            v_last,
            h_last,
        });
    }

    let bundle = CaptureBundle {
        meta: TraceMeta {
            model_id: manifest.model_id,
            n_layers: manifest.n_layers,
            d_model: manifest.d_model,
            value_out_dim: manifest.value_out_dim,
            dtype: manifest.dtype,
            notes: manifest.notes,
        },
        w_v,
        traces,
    };
    let violations = validate_bundle(&bundle);
    if !violations.is_empty() {
        return Err(Error::InvalidBundle(violations));
    }
    Ok(bundle)
}

fn read_blob(dir: &Path, name: &str, entry: &BlobEntry) -> Result<Vec<f64>> {
    if Path::new(&entry.file).components().count() != 1 {
        return Err(Error::InvalidBundle(vec![Violation::new(
            format!("blobs.{name}.file"),
            "blob file must be a plain file name inside the bundle directory",
        )]));
    }
    let file = dir.join(&entry.file);
    let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
    let expected = entry.shape.iter().product::<usize>() * entry.dtype.size();
    if bytes.len() != expected {
        return Err(Error::BlobShapeMismatch {
            blob: name.to_string(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(entry.dtype.decode(&bytes))
}
