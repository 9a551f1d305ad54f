//! Layer-wise propagation diagnostics and the embedding-distance study.
//!
//! - [`value_similarity_curve`]: per-layer cosine of two inputs' last-token value vectors.
//! - [`delta_h_alignment`]: cosine between consecutive layers' counterfactual
//!   differences of the post-attention residual stream.
//! - [`aggregate_curves`]: pointwise mean and population std over curves,
//!   e.g. over context perturbations.
//! - [`correlation_report`]: Pearson/Spearman of edited-token embedding
//!   distance against branching layer, per case and pooled.

pub mod stats;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::capture::CaptureBundle;
use crate::error::{Error, Result};
use crate::linalg::{self, Vector};
use crate::tree::ConceptPairSpec;

pub use stats::{pearson, spearman, Correlation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub name: String,
    pub values: Vec<f64>,
    /// Population standard deviation per point, set by [`aggregate_curves`].
    #[serde(default)]
    pub std: Option<Vec<f64>>,
    /// Points where an input vector had (near-)zero norm; their value is 0.
    #[serde(default)]
    pub degenerate_layers: Vec<usize>,
}

impl LayerCurve {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            values,
            std: None,
            degenerate_layers: Vec::new(),
        }
    }

    /// `layer,value,std` with an empty std column when unaggregated.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,value,std\n");
        for (l, v) in self.values.iter().enumerate() {
            match &self.std {
                Some(std) => {
                    let _ = writeln!(s, "{l},{v},{}", std[l]);
                }
                None => {
                    let _ = writeln!(s, "{l},{v},");
                }
            }
        }
        s
    }
}

fn cosine_or_flag(a: &[f64], b: &[f64], layer: usize, degenerate: &mut Vec<usize>) -> Result<f64> {
    match linalg::cosine(a, b) {
        Ok(c) => Ok(c),
        Err(Error::DegenerateVector { .. }) => {
            degenerate.push(layer);
            Ok(0.0)
        }
        Err(e) => Err(e),
    }
}

/// `values[l] = cos(v_A[l], v_B[l])`.
pub fn value_similarity_curve(
    bundle: &CaptureBundle,
    label_a: &str,
    label_b: &str,
) -> Result<LayerCurve> {
    let a = bundle.trace(label_a)?;
    let b = bundle.trace(label_b)?;
    if a.v_last.len() != b.v_last.len() {
        return Err(Error::DimensionMismatch(format!(
            "traces have {} and {} layers",
            a.v_last.len(),
            b.v_last.len()
        )));
    }
    let mut curve = LayerCurve::new(format!("value_cos:{label_a}/{label_b}"), Vec::new());
    for (l, (va, vb)) in a.v_last.iter().zip(&b.v_last).enumerate() {
        let c = cosine_or_flag(va, vb, l, &mut curve.degenerate_layers)?;
        curve.values.push(c);
    }
    Ok(curve)
}

/// `values[l] = cos(δ_l, δ_{l+1})` with `δ_l = h_A[l] − h_B[l]`; length `L − 1`.
pub fn delta_h_alignment(
    bundle: &CaptureBundle,
    label_a: &str,
    label_b: &str,
) -> Result<LayerCurve> {
    let a = bundle.trace(label_a)?;
    let b = bundle.trace(label_b)?;
    let layers = a.h_last.len();
    if b.h_last.len() != layers {
        return Err(Error::DimensionMismatch(format!(
            "traces have {} and {} layers",
            layers,
            b.h_last.len()
        )));
    }
    if layers < 2 {
        return Err(Error::InvalidInput(
            "delta-h alignment needs at least 2 layers".into(),
        ));
    }
    let deltas: Vec<Vec<f64>> = a
        .h_last
        .iter()
        .zip(&b.h_last)
        .map(|(x, y)| {
            if x.len() != y.len() {
                return Err(Error::DimensionMismatch(
                    "hidden state lengths differ".into(),
                ));
            }
            Ok(x.iter().zip(y.iter()).map(|(p, q)| p - q).collect())
        })
        .collect::<Result<_>>()?;
    let mut curve = LayerCurve::new(format!("delta_h_cos:{label_a}/{label_b}"), Vec::new());
    for l in 0..layers - 1 {
        let c = cosine_or_flag(&deltas[l], &deltas[l + 1], l, &mut curve.degenerate_layers)?;
        curve.values.push(c);
    }
    Ok(curve)
}

/// Pointwise mean with population standard deviation (divide by N).
pub fn aggregate_curves(curves: &[LayerCurve], name: &str) -> Result<LayerCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::EmptyInput("no curves to aggregate".into()))?;
    let len = first.values.len();
    if curves.iter().any(|c| c.values.len() != len) {
        return Err(Error::DimensionMismatch(
            "curves to aggregate have different lengths".into(),
        ));
    }
    let n = curves.len() as f64;
    let mut mean = vec![0.0; len];
    for c in curves {
        for (m, v) in mean.iter_mut().zip(&c.values) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; len];
    for c in curves {
        for ((s, v), m) in var.iter_mut().zip(&c.values).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    let mut degenerate: Vec<usize> = curves
        .iter()
        .flat_map(|c| c.degenerate_layers.iter().copied())
        .collect();
    degenerate.sort_unstable();
    degenerate.dedup();
    Ok(LayerCurve {
        name: name.to_string(),
        values: mean,
        std: Some(std),
        degenerate_layers: degenerate,
    })
}

fn embedding<'b>(bundle: &'b CaptureBundle, label: &str) -> Result<&'b Vector> {
    bundle
        .trace(label)?
        .edited_token_embedding
        .as_ref()
        .ok_or_else(|| Error::MissingEmbedding(label.to_string()))
}

/// L2 distance between the original and counterfactual token embeddings.
pub fn pair_embedding_distance(bundle: &CaptureBundle, pair: &ConceptPairSpec) -> Result<f64> {
    let a = embedding(bundle, &pair.original_trace_label)?;
    let b = embedding(bundle, &pair.counterfactual_trace_label)?;
    linalg::l2(a, b)
}

/// One observation for the distance/branching study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseSample {
    pub distance: f64,
    pub branching_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub case: String,
    /// Samples used (inseparable pairs excluded).
    pub n: usize,
    pub excluded_inseparable: usize,
    pub pearson: Option<Correlation>,
    pub spearman: Option<Correlation>,
    /// Why statistics are missing, when they are.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub rows: Vec<CorrelationRow>,
}

pub const POOLED_CASE: &str = "Overall";

fn correlate_case(case: &str, samples: &[CaseSample]) -> CorrelationRow {
    let (xs, ys): (Vec<f64>, Vec<f64>) = samples
        .iter()
        .filter_map(|s| s.branching_layer.map(|l| (s.distance, l as f64)))
        .unzip();
    let excluded = samples.len() - xs.len();
    let mut row = CorrelationRow {
        case: case.to_string(),
        n: xs.len(),
        excluded_inseparable: excluded,
        pearson: None,
        spearman: None,
        note: None,
    };
    if xs.len() < 3 {
        row.note = Some(format!("insufficient samples ({} < 3)", xs.len()));
        return row;
    }
    let mut notes = Vec::new();
    match pearson(&xs, &ys) {
        Ok(c) => row.pearson = Some(c),
        Err(e) => notes.push(format!("pearson: {e}")),
    }
    match spearman(&xs, &ys) {
        Ok(c) => row.spearman = Some(c),
        Err(e) => notes.push(format!("spearman: {e}")),
    }
    if !notes.is_empty() {
        row.note = Some(notes.join("; "));
    }
    row
}

/// Per-case rows plus a pooled [`POOLED_CASE`] row over all samples.
pub fn correlation_report(cases: &[(String, Vec<CaseSample>)]) -> CorrelationTable {
    let mut rows: Vec<CorrelationRow> = cases
        .iter()
        .map(|(name, samples)| correlate_case(name, samples))
        .collect();
    let pooled: Vec<CaseSample> = cases.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    rows.push(correlate_case(POOLED_CASE, &pooled));
    CorrelationTable { rows }
}

impl CorrelationTable {
    pub fn row(&self, case: &str) -> Option<&CorrelationRow> {
        self.rows.iter().find(|r| r.case == case)
    }

    /// `case,pearson_r,pearson_p,spearman_rho,spearman_p,n`; missing statistics as `NA`.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut s = String::from("case,pearson_r,pearson_p,spearman_rho,spearman_p,n\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                csv_field(&r.case),
                fmt(r.pearson.map(|c| c.r)),
                fmt(r.pearson.map(|c| c.p)),
                fmt(r.spearman.map(|c| c.r)),
                fmt(r.spearman.map(|c| c.p)),
                r.n
            );
        }
        s
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
