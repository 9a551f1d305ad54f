//! A small seeded decoder-only transformer used to exercise the analysis
//! stack end to end without an external model.
//!
//! Each layer is pre-norm attention followed by an optional MLP:
//!
//! ```text
//! x̂ = rmsnorm(x) * scale
//! Q, K, V = x̂ W_Q, x̂ W_K, x̂ W_V          (heads are column blocks)
//! A = causal_softmax(Q K^T / sqrt(d_head)) per head
//! H = x + concat_heads(A V) W_O           (recorded as h_last)
//! x' = H + relu(rmsnorm(H) W_in) W_out    (only with use_mlp)
//! ```
//!
//! There is no positional encoding. Weights come from a splitmix64 stream
//! keyed on `(seed, tensor name)` and indexed by element position, so a
//! config always produces the same model bit for bit.

use crate::capture::{CaptureBundle, Dtype, InputTrace, TraceMeta};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

const RMS_EPS: f64 = 1e-6;
const MLP_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub use_mlp: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            d_model: 32,
            n_heads: 4,
            vocab_size: 64,
            seed: 7,
            use_mlp: true,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::InvalidConfig("n_layers must be at least 1".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::InvalidConfig(
                "d_model and n_heads must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub norm_scale: Vec<f64>,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLayer {
    pub norm_scale: Vec<f64>,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub mlp: Option<Mlp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyConfig,
    /// `vocab_size x d_model`.
    pub embeddings: Matrix,
    pub layers: Vec<ToyLayer>,
}

/// Intermediate values of one layer, over the whole sequence.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    /// Residual stream entering the layer, `n x d`.
    pub input: Matrix,
    pub normed: Matrix,
    pub values: Matrix,
    /// One `n x n` row-stochastic matrix per head.
    pub attention: Vec<Matrix>,
    /// Attention output after `W_O`, before the residual add.
    pub attn_out: Matrix,
    /// `input + attn_out`.
    pub hidden: Matrix,
    /// Residual stream leaving the layer (after the MLP, if any).
    pub output: Matrix,
}

/// One step of the splitmix64 generator, applied to the state `z`.
pub fn splitmix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a hash.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Element `index` of the stream for `(seed, name)`, uniform in `[-1, 1)`.
pub fn seeded_uniform(seed: u64, name: &str, index: u64) -> f64 {
    let key = splitmix64(seed ^ fnv1a64(name));
    let bits = splitmix64(key.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    let unit = (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    2.0 * unit - 1.0
}

fn seeded_matrix(seed: u64, name: &str, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|i| seeded_uniform(seed, name, i as u64) * scale)
        .collect();
    Matrix::new(rows, cols, data).expect("positive dimensions")
}

impl ToyModel {
    pub fn init_seeded(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let scale = 1.0 / (d as f64).sqrt();
        let seed = config.seed;
        let embeddings = seeded_matrix(seed, "embed", config.vocab_size, d, scale);
        let layers = (0..config.n_layers)
            .map(|l| {
                let m = |name: &str, r: usize, c: usize| {
                    seeded_matrix(seed, &format!("layer{l}.{name}"), r, c, scale)
                };
                ToyLayer {
                    norm_scale: vec![1.0; d],
                    w_q: m("w_q", d, d),
                    w_k: m("w_k", d, d),
                    w_v: m("w_v", d, d),
                    w_o: m("w_o", d, d),
                    mlp: config.use_mlp.then(|| Mlp {
                        norm_scale: vec![1.0; d],
                        w_in: m("mlp.w_in", d, MLP_EXPANSION * d),
                        w_out: m("mlp.w_out", MLP_EXPANSION * d, d),
                    }),
                }
            })
            .collect();
        Ok(Self {
            config,
            embeddings,
            layers,
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence is empty".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let rows: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| self.embeddings.row(t).to_vec())
            .collect();
        Matrix::from_rows(&rows)
    }

    /// Runs the model and returns every layer's intermediates.
    pub fn forward_trace(&self, tokens: &[usize]) -> Result<Vec<LayerRecord>> {
        let mut x = self.embed(tokens)?;
        let mut records = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let record = self.run_layer(layer, x)?;
            x = record.output.clone();
            records.push(record);
        }
        Ok(records)
    }

    fn run_layer(&self, layer: &ToyLayer, input: Matrix) -> Result<LayerRecord> {
        let n = input.rows();
        let heads = self.config.n_heads;
        let hd = self.config.head_dim();
        let normed = rms_norm(&input, &layer.norm_scale);
        let q = normed.matmul(&layer.w_q)?;
        let k = normed.matmul(&layer.w_k)?;
        let values = normed.matmul(&layer.w_v)?;
        let inv_sqrt = 1.0 / (hd as f64).sqrt();

        let mut mixed = Matrix::zeros(n, self.config.d_model);
        let mut attention = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let mut probs = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let kj = &k.row(j)[cols.clone()];
                        qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt
                    })
                    .collect();
                let row = softmax(&scores);
                for (j, &p) in row.iter().enumerate() {
                    probs.set(i, j, p);
                    for c in cols.clone() {
                        let v = mixed.get(i, c) + p * values.get(j, c);
                        mixed.set(i, c, v);
                    }
                }
            }
            attention.push(probs);
        }
        let attn_out = mixed.matmul(&layer.w_o)?;
        let hidden = add(&input, &attn_out);
        let output = match &layer.mlp {
            Some(mlp) => {
                let pre = rms_norm(&hidden, &mlp.norm_scale).matmul(&mlp.w_in)?;
                let act = Matrix::new(
                    pre.rows(),
                    pre.cols(),
                    pre.data().iter().map(|x| x.max(0.0)).collect(),
                )?;
                add(&hidden, &act.matmul(&mlp.w_out)?)
            }
            None => hidden.clone(),
        };
        Ok(LayerRecord {
            input,
            normed,
            values,
            attention,
            attn_out,
            hidden,
            output,
        })
    }

    /// Runs the model and keeps only what a capture bundle stores.
    pub fn forward_capture(
        &self,
        tokens: &[usize],
        label: &str,
        edited_index: Option<usize>,
    ) -> Result<InputTrace> {
        self.check_tokens(tokens)?;
        if let Some(idx) = edited_index {
            if idx >= tokens.len() {
                return Err(Error::InvalidInput(format!(
                    "edited index {idx} outside sequence of {} tokens",
                    tokens.len()
                )));
            }
        }
        let records = self.forward_trace(tokens)?;
        let last = tokens.len() - 1;
        Ok(InputTrace {
            label: label.to_string(),
            text: ids_to_text(tokens),
            token_count: tokens.len(),
            edited_token_index: edited_index,
            edited_token_embedding: edited_index
                .map(|i| Vector::from(self.embeddings.row(tokens[i]))),
            v_last: records
                .iter()
                .map(|r| Vector::from(r.values.row(last)))
                .collect(),
            h_last: records
                .iter()
                .map(|r| Vector::from(r.hidden.row(last)))
                .collect(),
        })
    }

    pub fn meta(&self) -> TraceMeta {
        let c = &self.config;
        TraceMeta {
            model_id: format!("toy-l{}-d{}-seed{}", c.n_layers, c.d_model, c.seed),
            n_layers: c.n_layers,
            d_model: c.d_model,
            value_out_dim: c.d_model,
            dtype: Dtype::F64,
            notes: format!(
                "toy decoder; heads={} head_dim={} concatenated into one W_V; h recorded after \
                 attention residual, before MLP (mlp={})",
                c.n_heads,
                c.head_dim(),
                c.use_mlp
            ),
        }
    }
}

/// One input to [`make_toy_bundle`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyInput {
    pub label: String,
    /// Stored as the trace text; defaults to the space-joined ids.
    pub text: Option<String>,
    pub tokens: Vec<usize>,
    pub edited_index: Option<usize>,
}

impl ToyInput {
    pub fn new(label: impl Into<String>, tokens: Vec<usize>, edited_index: Option<usize>) -> Self {
        Self {
            label: label.into(),
            text: None,
            tokens,
            edited_index,
        }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }
}

pub fn ids_to_text(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Runs every input through `model` and packs the results with the model's
/// per-layer W_V.
pub fn make_toy_bundle(model: &ToyModel, inputs: &[ToyInput]) -> Result<CaptureBundle> {
    let traces = inputs
        .iter()
        .map(|inp| {
            let mut t = model.forward_capture(&inp.tokens, &inp.label, inp.edited_index)?;
            if let Some(text) = &inp.text {
                t.text = text.clone();
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CaptureBundle {
        meta: model.meta(),
        w_v: model.layers.iter().map(|l| l.w_v.clone()).collect(),
        traces,
    })
}

fn rms_norm(x: &Matrix, scale: &[f64]) -> Matrix {
    let mut out = x.clone();
    let d = x.cols() as f64;
    for r in 0..x.rows() {
        let row = x.row(r);
        let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / d + RMS_EPS).sqrt();
        for (c, (&v, &s)) in row.iter().zip(scale).enumerate() {
            out.set(r, c, v * inv * s);
        }
    }
    out
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Matrix::new(a.rows(), a.cols(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::validate_bundle;

    fn cfg(seed: u64) -> ToyConfig {
        ToyConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            vocab_size: 16,
            seed,
            use_mlp: true,
        }
    }

    #[test]
    fn same_config_same_weights() {
        let a = ToyModel::init_seeded(cfg(3)).unwrap();
        let b = ToyModel::init_seeded(cfg(3)).unwrap();
        assert_eq!(a, b);
        let bits = |m: &ToyModel| -> Vec<u64> {
            m.layers[0].w_v.data().iter().map(|x| x.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn different_seeds_differ() {
        let a = ToyModel::init_seeded(cfg(1)).unwrap();
        let b = ToyModel::init_seeded(cfg(2)).unwrap();
        assert_ne!(a.layers[0].w_v, b.layers[0].w_v);
    }

    #[test]
    fn weights_in_scaled_range() {
        let m = ToyModel::init_seeded(cfg(9)).unwrap();
        let bound = 1.0 / 8f64.sqrt();
        for l in &m.layers {
            for w in [&l.w_q, &l.w_k, &l.w_v, &l.w_o] {
                assert!(w.data().iter().all(|x| x.abs() <= bound));
            }
        }
        // tensors get independent streams
        assert_ne!(m.layers[0].w_q, m.layers[0].w_k);
        assert_ne!(m.layers[0].w_v, m.layers[1].w_v);
    }

    #[test]
    fn invalid_configs() {
        let bad = ToyConfig {
            d_model: 8,
            n_heads: 3,
            ..cfg(1)
        };
        assert!(matches!(
            ToyModel::init_seeded(bad),
            Err(Error::InvalidConfig(_))
        ));
        let bad = ToyConfig {
            vocab_size: 1,
            ..cfg(1)
        };
        assert!(matches!(
            ToyModel::init_seeded(bad),
            Err(Error::InvalidConfig(_))
        ));
        let bad = ToyConfig {
            n_layers: 0,
            ..cfg(1)
        };
        assert!(ToyModel::init_seeded(bad).is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let m = ToyModel::init_seeded(cfg(4)).unwrap();
        for rec in m.forward_trace(&[5]).unwrap() {
            for a in &rec.attention {
                assert_eq!(a.data(), &[1.0]);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = ToyModel::init_seeded(cfg(4)).unwrap();
        for rec in m.forward_trace(&[1, 7, 3, 3, 15, 0]).unwrap() {
            for a in &rec.attention {
                for i in 0..a.rows() {
                    let row = a.row(i);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    assert!(row.iter().all(|&p| p >= 0.0));
                    assert!(row[i + 1..].iter().all(|&p| p == 0.0));
                }
            }
        }
    }

    #[test]
    fn residual_identity() {
        let m = ToyModel::init_seeded(cfg(5)).unwrap();
        let tokens = [2, 4, 6, 8];
        let trace = m.forward_capture(&tokens, "t", None).unwrap();
        for (l, rec) in m.forward_trace(&tokens).unwrap().iter().enumerate() {
            let last = tokens.len() - 1;
            for c in 0..8 {
                let diff = trace.h_last[l][c] - rec.attn_out.get(last, c);
                assert!((diff - rec.input.get(last, c)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn causal_truncation() {
        let m = ToyModel::init_seeded(cfg(6)).unwrap();
        let tokens = [3, 1, 4, 1, 5, 9];
        let full = m.forward_trace(&tokens).unwrap();
        for t in 1..=tokens.len() {
            let prefix = m.forward_capture(&tokens[..t], "p", None).unwrap();
            for (l, rec) in full.iter().enumerate() {
                for c in 0..8 {
                    assert!((prefix.v_last[l][c] - rec.values.get(t - 1, c)).abs() <= 1e-12);
                    assert!((prefix.h_last[l][c] - rec.hidden.get(t - 1, c)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_capture_errors() {
        let m = ToyModel::init_seeded(cfg(1)).unwrap();
        assert!(matches!(
            m.forward_capture(&[16], "x", None),
            Err(Error::TokenOutOfRange {
                id: 16,
                vocab_size: 16
            })
        ));
        assert!(m.forward_capture(&[], "x", None).is_err());
        assert!(m.forward_capture(&[1, 2], "x", Some(2)).is_err());
    }

    #[test]
    fn identical_tokens_identical_traces() {
        let m = ToyModel::init_seeded(cfg(8)).unwrap();
        let a = m.forward_capture(&[1, 2, 3], "a", Some(1)).unwrap();
        let b = m.forward_capture(&[1, 2, 3], "a", Some(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.edited_token_embedding.unwrap().as_slice(),
            m.embeddings.row(2)
        );
    }

    #[test]
    fn bundles() {
        let m = ToyModel::init_seeded(cfg(2)).unwrap();
        let b = make_toy_bundle(
            &m,
            &[
                ToyInput::new("base", vec![1, 2, 3], Some(1)),
                ToyInput::new("cf", vec![1, 9, 3, 4, 5], Some(1)),
            ],
        )
        .unwrap();
        assert_eq!(b.traces.len(), 2);
        assert_eq!(b.w_v.len(), 2);
        assert!(validate_bundle(&b).is_empty());
        assert_eq!(b.traces[0].text, "1 2 3");

        let empty = make_toy_bundle(&m, &[]).unwrap();
        assert!(empty.traces.is_empty());
        assert!(validate_bundle(&empty).is_empty());

        assert!(make_toy_bundle(&m, &[ToyInput::new("x", vec![99], None)]).is_err());
    }

    #[test]
    fn mlp_toggle_only_changes_downstream_layers() {
        let with = ToyModel::init_seeded(cfg(3)).unwrap();
        let without = ToyModel::init_seeded(ToyConfig {
            use_mlp: false,
            ..cfg(3)
        })
        .unwrap();
        let a = with.forward_capture(&[1, 2], "a", None).unwrap();
        let b = without.forward_capture(&[1, 2], "a", None).unwrap();
        assert_eq!(a.h_last[0], b.h_last[0]);
        assert_ne!(a.h_last[1], b.h_last[1]);
    }
}
