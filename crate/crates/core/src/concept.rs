//! Concept paths, separation scores and branching layers.
//!
//! For a layer with value projection `W_V = U Σ Rᵀ`, the concept path of a
//! last-token value vector `v` is `[⟨v, u_1⟩σ_1, …, ⟨v, u_p⟩σ_p]`. Two inputs
//! are compared per layer by the cosine of their top-k filtered paths, and
//! the branching layer is the first layer whose score drops below `tau`.
//!
//! In raw mode the value vector itself is used as the path (no SVD).

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::capture::CaptureBundle;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SvdResult, Vector};
use crate::tree::ConceptPairSpec;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_TAU: f64 = 0.9;
/// Raw value vectors sit much closer together, so the baseline needs a finer threshold.
pub const DEFAULT_RAW_TAU: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Svd,
    Raw,
}

impl Mode {
    pub fn default_tau(self) -> f64 {
        match self {
            Mode::Svd => DEFAULT_TAU,
            Mode::Raw => DEFAULT_RAW_TAU,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Svd => "svd",
            Mode::Raw => "raw",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svd" => Ok(Mode::Svd),
            "raw" => Ok(Mode::Raw),
            other => Err(Error::InvalidInput(format!(
                "unknown mode {other:?}, expected svd or raw"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisParams {
    pub k: usize,
    pub tau: f64,
    pub mode: Mode,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            tau: DEFAULT_TAU,
            mode: Mode::Svd,
        }
    }
}

impl AnalysisParams {
    pub fn new(k: usize, tau: f64, mode: Mode) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::InvalidInput(format!("tau {tau} is outside (0, 1]")));
        }
        Ok(Self { k, tau, mode })
    }

    /// Fills unset values with the defaults for `mode`.
    pub fn resolve(k: Option<usize>, tau: Option<f64>, mode: Mode) -> Result<Self> {
        Self::new(
            k.unwrap_or(DEFAULT_K),
            tau.unwrap_or_else(|| mode.default_tau()),
            mode,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPath {
    pub layer: usize,
    pub coeffs: Vector,
}

/// `coeffs[i] = ⟨v, u_i⟩ · σ_i`.
pub fn concept_path(v: &[f64], decomp: &SvdResult, layer: usize) -> Result<ConceptPath> {
    if v.len() != decomp.u.rows() {
        return Err(Error::DimensionMismatch(format!(
            "value vector of length {} against singular vectors of length {}",
            v.len(),
            decomp.u.rows()
        )));
    }
    let p = decomp.sigma.len();
    let mut coeffs = vec![0.0; p];
    for (r, &x) in v.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (c, slot) in coeffs.iter_mut().enumerate() {
            *slot += x * decomp.u.get(r, c);
        }
    }
    for (slot, s) in coeffs.iter_mut().zip(decomp.sigma.iter()) {
        *slot *= s;
    }
    Ok(ConceptPath {
        layer,
        coeffs: Vector::new(coeffs),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separation {
    pub score: f64,
    /// Set when either filtered path had (near-)zero norm; `score` is then 0.
    pub degenerate: bool,
}

/// Cosine of the two paths after independent top-k filtering.
pub fn separation_score(a: &ConceptPath, b: &ConceptPath, k: usize) -> Result<Separation> {
    if a.layer != b.layer {
        return Err(Error::DimensionMismatch(format!(
            "paths from layers {} and {}",
            a.layer, b.layer
        )));
    }
    if a.coeffs.len() != b.coeffs.len() {
        return Err(Error::DimensionMismatch(format!(
            "paths of length {} and {}",
            a.coeffs.len(),
            b.coeffs.len()
        )));
    }
    let fa = linalg::topk_mask(&a.coeffs, k)?;
    let fb = linalg::topk_mask(&b.coeffs, k)?;
    match linalg::cosine(&fa, &fb) {
        Ok(score) => Ok(Separation {
            score,
            degenerate: false,
        }),
        Err(Error::DegenerateVector { .. }) => Ok(Separation {
            score: 0.0,
            degenerate: true,
        }),
        Err(e) => Err(e),
    }
}

/// First layer whose score is below `tau`, or `None` if the pair never separates.
pub fn branching_layer(scores: &[f64], tau: f64) -> Option<usize> {
    scores.iter().position(|&s| s < tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAnalysis {
    pub pair_label: String,
    pub scores: Vec<f64>,
    pub branching_layer: Option<usize>,
    pub params: AnalysisParams,
    pub degenerate_layers: Vec<usize>,
}

impl PairAnalysis {
    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    pub fn is_inseparable(&self) -> bool {
        self.branching_layer.is_none()
    }
}

/// Analysis state over one bundle. Per-layer SVDs are computed on first use
/// and shared; concurrent first use may compute twice but always stores the
/// same (deterministic) result.
pub struct Analyzer<'a> {
    bundle: &'a CaptureBundle,
    bases: Vec<OnceLock<SvdResult>>,
}

impl<'a> Analyzer<'a> {
    pub fn new(bundle: &'a CaptureBundle) -> Self {
        Self {
            bundle,
            bases: (0..bundle.w_v.len()).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn bundle(&self) -> &'a CaptureBundle {
        self.bundle
    }

    /// The spectral basis used for concept paths at `layer`.
    ///
    /// For a square W_V this is its SVD. For a non-square W_V (grouped-query
    /// models) the value vector lives in the output space, so the SVD of
    /// `W_Vᵀ` is used: its left singular vectors are W_V's right singular
    /// vectors and the singular values are the same.
    pub fn layer_basis(&self, layer: usize) -> Result<&SvdResult> {
        let cell = self.bases.get(layer).ok_or_else(|| {
            Error::DimensionMismatch(format!(
                "layer {layer} outside bundle with {} layers",
                self.bases.len()
            ))
        })?;
        if let Some(basis) = cell.get() {
            return Ok(basis);
        }
        let w: &Matrix = &self.bundle.w_v[layer];
        let decomp = if w.rows() == w.cols() {
            linalg::svd(w)?
        } else {
            linalg::svd(&w.transpose())?
        };
        let _ = cell.set(decomp);
        Ok(cell.get().expect("cell was just filled"))
    }

    /// Concept paths of one trace, every layer.
    pub fn concept_paths(&self, label: &str, mode: Mode) -> Result<Vec<ConceptPath>> {
        let trace = self.bundle.trace(label)?;
        let meta = &self.bundle.meta;
        if trace.v_last.len() != meta.n_layers || self.bundle.w_v.len() != meta.n_layers {
            return Err(Error::DimensionMismatch(format!(
                "trace {label:?} has {} layers, W_V has {}, meta declares {}",
                trace.v_last.len(),
                self.bundle.w_v.len(),
                meta.n_layers
            )));
        }
        trace
            .v_last
            .iter()
            .enumerate()
            .map(|(layer, v)| {
                if v.len() != meta.value_out_dim {
                    return Err(Error::DimensionMismatch(format!(
                        "trace {label:?} layer {layer}: value vector length {} but meta \
                         declares {}",
                        v.len(),
                        meta.value_out_dim
                    )));
                }
                match mode {
                    Mode::Raw => Ok(ConceptPath {
                        layer,
                        coeffs: v.clone(),
                    }),
                    Mode::Svd => concept_path(v, self.layer_basis(layer)?, layer),
                }
            })
            .collect()
    }

    pub fn analyze_pair(
        &self,
        original_label: &str,
        counterfactual_label: &str,
        params: AnalysisParams,
    ) -> Result<PairAnalysis> {
        self.analyze_labeled(
            format!("{original_label}/{counterfactual_label}"),
            original_label,
            counterfactual_label,
            params,
        )
    }

    /// Like [`Analyzer::analyze_pair`], labeled with the pair's tokens.
    pub fn analyze_spec(
        &self,
        pair: &ConceptPairSpec,
        params: AnalysisParams,
    ) -> Result<PairAnalysis> {
        self.analyze_labeled(
            pair.label(),
            &pair.original_trace_label,
            &pair.counterfactual_trace_label,
            params,
        )
    }

    fn analyze_labeled(
        &self,
        pair_label: String,
        original_label: &str,
        counterfactual_label: &str,
        params: AnalysisParams,
    ) -> Result<PairAnalysis> {
        let params = AnalysisParams::new(params.k, params.tau, params.mode)?;
        let a = self.concept_paths(original_label, params.mode)?;
        let b = self.concept_paths(counterfactual_label, params.mode)?;
        let mut scores = Vec::with_capacity(a.len());
        let mut degenerate_layers = Vec::new();
        for (pa, pb) in a.iter().zip(&b) {
            let sep = separation_score(pa, pb, params.k)?;
            if sep.degenerate {
                degenerate_layers.push(pa.layer);
            }
            scores.push(sep.score);
        }
        Ok(PairAnalysis {
            pair_label,
            branching_layer: branching_layer(&scores, params.tau),
            scores,
            params,
            degenerate_layers,
        })
    }

    /// Analyzes every pair, spreading work over up to `jobs` threads.
    /// Results keep the order of `pairs`.
    pub fn analyze_many(
        &self,
        pairs: &[ConceptPairSpec],
        params: AnalysisParams,
        jobs: usize,
    ) -> Vec<Result<PairAnalysis>> {
        let jobs = jobs.max(1).min(pairs.len().max(1));
        if jobs == 1 {
            return pairs.iter().map(|p| self.analyze_spec(p, params)).collect();
        }
        let chunk = pairs.len().div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = pairs
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|p| self.analyze_spec(p, params))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("analysis worker panicked"))
                .collect()
        })
    }
}

/// One-shot convenience over [`Analyzer::analyze_pair`].
pub fn analyze_pair(
    bundle: &CaptureBundle,
    original_label: &str,
    counterfactual_label: &str,
    params: AnalysisParams,
) -> Result<PairAnalysis> {
    Analyzer::new(bundle).analyze_pair(original_label, counterfactual_label, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{Dtype, InputTrace, TraceMeta};
    use proptest::prelude::*;

    fn diag_basis() -> SvdResult {
        linalg::svd(&Matrix::from_diag(&[3.0, 2.0, 1.0])).unwrap()
    }

    fn path(layer: usize, c: &[f64]) -> ConceptPath {
        ConceptPath {
            layer,
            coeffs: Vector::from(c),
        }
    }

    #[test]
    fn path_of_singular_direction() {
        let p = concept_path(&[0.0, 1.0, 0.0], &diag_basis(), 0).unwrap();
        assert_eq!(p.coeffs.as_slice(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn path_of_ones_matches_full_basis_projection() {
        let basis = diag_basis();
        let v = [1.0, 1.0, 1.0];
        let p = concept_path(&v, &basis, 0).unwrap();
        // naive projection through every basis column
        let naive: Vec<f64> = (0..3)
            .map(|i| {
                let u = basis.left(i);
                v.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() * basis.sigma[i]
            })
            .collect();
        assert_eq!(p.coeffs.as_slice(), naive.as_slice());
        assert_eq!(p.coeffs.as_slice(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn path_of_zero_and_mismatch() {
        let p = concept_path(&[0.0; 3], &diag_basis(), 2).unwrap();
        assert_eq!(p.coeffs.as_slice(), &[0.0; 3]);
        assert_eq!(p.layer, 2);
        assert!(matches!(
            concept_path(&[1.0; 4], &diag_basis(), 0),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn separation_examples() {
        let a = path(0, &[3.0, 2.0, 1.0, 0.0, 0.0]);
        assert_eq!(separation_score(&a, &a, 10).unwrap().score, 1.0);
        let b = path(0, &[3.0, 2.0, -1.0, 0.0, 0.0]);
        let s = separation_score(&a, &b, 3).unwrap();
        assert!((s.score - 12.0 / 14.0).abs() < 1e-15);
        assert!((s.score - 0.857143).abs() < 1e-6);

        let a = path(1, &[5.0, 0.1, 0.0, 0.0, 0.0, 0.2]);
        let b = path(1, &[0.1, 0.0, 0.0, 0.0, 0.0, 4.0]);
        let s = separation_score(&a, &b, 1).unwrap();
        assert_eq!(s.score, 0.0);
        assert!(!s.degenerate);
    }

    #[test]
    fn separation_degenerate_and_errors() {
        let z = path(0, &[0.0, 0.0]);
        let a = path(0, &[1.0, 0.0]);
        let s = separation_score(&z, &a, 1).unwrap();
        assert_eq!(
            s,
            Separation {
                score: 0.0,
                degenerate: true
            }
        );
        assert!(separation_score(&a, &path(1, &[1.0, 0.0]), 1).is_err());
        assert!(separation_score(&a, &path(0, &[1.0]), 1).is_err());
        assert!(separation_score(&a, &a, 0).is_err());
    }

    #[test]
    fn branching_examples() {
        assert_eq!(branching_layer(&[1.0, 0.95, 0.85, 0.2], 0.9), Some(2));
        assert_eq!(branching_layer(&[1.0, 1.0], 0.9), None);
        assert_eq!(branching_layer(&[0.5, 0.99], 0.9), Some(0));
        assert_eq!(branching_layer(&[0.9], 0.9), None);
    }

    #[test]
    fn params_validation_and_defaults() {
        assert_eq!(
            AnalysisParams::default(),
            AnalysisParams::new(10, 0.9, Mode::Svd).unwrap()
        );
        assert_eq!(
            AnalysisParams::resolve(None, None, Mode::Raw).unwrap().tau,
            0.99
        );
        assert_eq!(
            AnalysisParams::resolve(None, Some(0.5), Mode::Raw)
                .unwrap()
                .tau,
            0.5
        );
        assert!(AnalysisParams::new(0, 0.9, Mode::Svd).is_err());
        assert!(AnalysisParams::new(1, 0.0, Mode::Svd).is_err());
        assert!(AnalysisParams::new(1, 1.5, Mode::Svd).is_err());
        assert!(AnalysisParams::new(1, 1.0, Mode::Svd).is_ok());
        assert_eq!("raw".parse::<Mode>().unwrap(), Mode::Raw);
        assert!("spectral".parse::<Mode>().is_err());
    }

    fn hand_bundle(w_v: Vec<Matrix>, traces: Vec<(&str, Vec<Vec<f64>>)>) -> CaptureBundle {
        let (d, vout) = w_v[0].shape();
        CaptureBundle {
            meta: TraceMeta {
                model_id: "hand".into(),
                n_layers: w_v.len(),
                d_model: d,
                value_out_dim: vout,
                dtype: Dtype::F64,
                notes: String::new(),
            },
            traces: traces
                .into_iter()
                .map(|(label, vs)| InputTrace {
                    label: label.into(),
                    text: label.into(),
                    token_count: 1,
                    edited_token_index: None,
                    edited_token_embedding: None,
                    h_last: vs.iter().map(|_| Vector::zeros(d)).collect(),
                    v_last: vs.into_iter().map(Vector::new).collect(),
                })
                .collect(),
            w_v,
        }
    }

    #[test]
    fn self_pair_is_inseparable() {
        let b = hand_bundle(
            vec![Matrix::from_diag(&[3.0, 2.0, 1.0]); 2],
            vec![("x", vec![vec![0.3, -1.7, 2.2], vec![1.0, 1e-3, 7.0]])],
        );
        for mode in [Mode::Svd, Mode::Raw] {
            let a = analyze_pair(&b, "x", "x", AnalysisParams::new(2, 1.0, mode).unwrap()).unwrap();
            assert_eq!(a.scores, vec![1.0, 1.0]);
            assert_eq!(a.branching_layer, None);
            assert!(a.degenerate_layers.is_empty());
            assert_eq!(a.pair_label, "x/x");
        }
    }

    #[test]
    fn missing_trace_and_bad_dims() {
        let b = hand_bundle(
            vec![Matrix::identity(2)],
            vec![
                ("x", vec![vec![1.0, 0.0]]),
                ("y", vec![vec![1.0, 0.0, 0.0]]),
            ],
        );
        assert!(matches!(
            analyze_pair(&b, "x", "nope", AnalysisParams::default()),
            Err(Error::MissingTrace(l)) if l == "nope"
        ));
        assert!(matches!(
            analyze_pair(&b, "x", "y", AnalysisParams::default()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn zero_value_vector_is_flagged_not_fatal() {
        let b = hand_bundle(
            vec![Matrix::identity(2); 2],
            vec![
                ("x", vec![vec![0.0, 0.0], vec![1.0, 0.0]]),
                ("y", vec![vec![1.0, 1.0], vec![1.0, 0.0]]),
            ],
        );
        let a = analyze_pair(&b, "x", "y", AnalysisParams::default()).unwrap();
        assert_eq!(a.degenerate_layers, vec![0]);
        assert_eq!(a.scores, vec![0.0, 1.0]);
        assert_eq!(a.branching_layer, Some(0));
    }

    #[test]
    fn non_square_projection_uses_output_space_basis() {
        // d = 3, value_out_dim = 2
        let w = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let b = hand_bundle(
            vec![w],
            vec![("x", vec![vec![1.0, 1.0]]), ("y", vec![vec![1.0, -1.0]])],
        );
        let analyzer = Analyzer::new(&b);
        let paths = analyzer.concept_paths("x", Mode::Svd).unwrap();
        assert_eq!(paths[0].coeffs.as_slice(), &[2.0, 1.0]);
        let a = analyzer
            .analyze_pair("x", "y", AnalysisParams::default())
            .unwrap();
        assert!((a.scores[0] - 3.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn analyze_many_keeps_order_across_threads() {
        let b = hand_bundle(
            vec![Matrix::from_diag(&[3.0, 2.0, 1.0])],
            vec![
                ("base", vec![vec![1.0, 1.0, 1.0]]),
                ("a", vec![vec![1.0, 1.0, -1.0]]),
                ("b", vec![vec![-1.0, 1.0, 1.0]]),
                ("c", vec![vec![1.0, 1.0, 1.0]]),
            ],
        );
        let pairs: Vec<ConceptPairSpec> = ["a", "b", "c", "zz"]
            .iter()
            .map(|cf| ConceptPairSpec::against_base("base", "w", cf, None))
            .collect();
        let analyzer = Analyzer::new(&b);
        let serial = analyzer.analyze_many(&pairs, AnalysisParams::default(), 1);
        let parallel = analyzer.analyze_many(&pairs, AnalysisParams::default(), 3);
        assert_eq!(serial.len(), 4);
        for (s, p) in serial.iter().zip(&parallel) {
            match (s, p) {
                (Ok(x), Ok(y)) => assert_eq!(x, y),
                (Err(_), Err(_)) => {}
                _ => panic!("serial and parallel disagree"),
            }
        }
        assert!(serial[3].is_err());
        assert_eq!(serial[2].as_ref().unwrap().scores, vec![1.0]);
    }

    proptest! {
        #[test]
        fn branching_is_min_below_tau(
            scores in prop::collection::vec(-1.0f64..=1.0, 1..20),
            tau in 0.01f64..=1.0,
        ) {
            match branching_layer(&scores, tau) {
                Some(l) => {
                    prop_assert!(scores[l] < tau);
                    prop_assert!(scores[..l].iter().all(|&s| s >= tau));
                }
                None => prop_assert!(scores.iter().all(|&s| s >= tau)),
            }
        }
    }
}
