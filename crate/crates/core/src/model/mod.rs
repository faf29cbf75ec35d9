//! A small pre-norm decoder-only transformer.
//!
//! Each block computes attention on `LN1(h)`, adds it to the residual
//! stream, then runs a bias-free FFN on `LN2(h + a)`:
//!
//! ```text
//! k = act(W_in · LN2(h + a))      (d_ffn)
//! m = W_out · k                   (d_model)
//! h' = h + a + m
//! ```
//!
//! `W_out` of each block is the editable associative memory: it maps keys
//! `k` to values `m` with no bias, so `m = W_out k` holds exactly.

mod backward;
mod config;
pub(crate) mod forward;
mod generate;
mod train;

pub use backward::{grad_delta, loss_and_grad_at, DeltaObjective};
pub use config::{Activation, NormKind, ToyModelConfig, LAYERNORM_EPS};
pub use forward::{
    forward, forward_with_delta, forward_with_memory_override, next_token_probs, ForwardTrace,
    Intervention, LayerTrace,
};
pub use generate::{generate, GenerateMode};
pub use train::{pretrain, PretrainReport, TrainConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::checkpoint::{CheckpointError, TensorFile};
use crate::linalg::{LinalgError, Matrix, Vector};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptyInput,
    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange { what: &'static str, index: usize, bound: usize },
    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    ShapeMismatch { what: String, expected: String, found: String },
    #[error("pretraining corpus is empty")]
    EmptyCorpus,
    #[error("pretraining did not reduce held-out loss enough: {initial:.4} -> {final_loss:.4}")]
    InsufficientProgress { initial: f64, final_loss: f64 },
    #[error("non-finite value encountered during {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Weights of one transformer block. Projections are stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Vector,
    pub ln1_bias: Vector,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_gain: Vector,
    pub ln2_bias: Vector,
    /// `d_ffn x d_model`
    pub w_in: Matrix,
    /// `d_model x d_ffn`; the associative memory.
    pub w_out: Matrix,
}

/// All trainable tensors. Also used as the gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub blocks: Vec<Block>,
    pub lnf_gain: Vector,
    pub lnf_bias: Vector,
    /// `vocab x d_model`; `None` when tied to the token embedding.
    pub head: Option<Matrix>,
}

impl Weights {
    fn init(cfg: &ToyModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = 0.02;
        let proj_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let (d, f, v) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size);
        let mut gauss = |rows: usize, cols: usize, s: f64| {
            let n = Normal::new(0.0, s).expect("positive std");
            Matrix::from_raw(rows, cols, (0..rows * cols).map(|_| n.sample(&mut rng)).collect())
        };
        let token_embedding = gauss(v, d, std);
        let position_embedding = gauss(cfg.max_seq, d, std);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1_gain: Vector::from_raw(vec![1.0; d]),
                ln1_bias: Vector::zeros(d),
                w_q: gauss(d, d, std),
                w_k: gauss(d, d, std),
                w_v: gauss(d, d, std),
                w_o: gauss(d, d, proj_std),
                ln2_gain: Vector::from_raw(vec![1.0; d]),
                ln2_bias: Vector::zeros(d),
                w_in: gauss(f, d, std),
                w_out: gauss(d, f, proj_std),
            })
            .collect();
        let head = if cfg.tie_embeddings { None } else { Some(gauss(v, d, std)) };
        Self {
            token_embedding,
            position_embedding,
            blocks,
            lnf_gain: Vector::from_raw(vec![1.0; d]),
            lnf_bias: Vector::zeros(d),
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let zv = |v: &Vector| Vector::zeros(v.len());
        Self {
            token_embedding: z(&self.token_embedding),
            position_embedding: z(&self.position_embedding),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_gain: zv(&b.ln1_gain),
                    ln1_bias: zv(&b.ln1_bias),
                    w_q: z(&b.w_q),
                    w_k: z(&b.w_k),
                    w_v: z(&b.w_v),
                    w_o: z(&b.w_o),
                    ln2_gain: zv(&b.ln2_gain),
                    ln2_bias: zv(&b.ln2_bias),
                    w_in: z(&b.w_in),
                    w_out: z(&b.w_out),
                })
                .collect(),
            lnf_gain: zv(&self.lnf_gain),
            lnf_bias: zv(&self.lnf_bias),
            head: self.head.as_ref().map(z),
        }
    }

    pub fn head(&self) -> &Matrix {
        self.head.as_ref().unwrap_or(&self.token_embedding)
    }

    /// Named tensors with their shapes, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        fn mat(name: String, m: &Matrix) -> (String, Vec<usize>, &[f64]) {
            (name, vec![m.rows(), m.cols()], m.as_slice())
        }
        out.push(mat("token_embedding".into(), &self.token_embedding));
        out.push(mat("position_embedding".into(), &self.position_embedding));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.push((p("ln1_gain"), vec![b.ln1_gain.len()], b.ln1_gain.as_slice()));
            out.push((p("ln1_bias"), vec![b.ln1_bias.len()], b.ln1_bias.as_slice()));
            out.push(mat(p("w_q"), &b.w_q));
            out.push(mat(p("w_k"), &b.w_k));
            out.push(mat(p("w_v"), &b.w_v));
            out.push(mat(p("w_o"), &b.w_o));
            out.push((p("ln2_gain"), vec![b.ln2_gain.len()], b.ln2_gain.as_slice()));
            out.push((p("ln2_bias"), vec![b.ln2_bias.len()], b.ln2_bias.as_slice()));
            out.push(mat(p("w_in"), &b.w_in));
            out.push(mat(p("w_out"), &b.w_out));
        }
        out.push(("lnf_gain".into(), vec![self.lnf_gain.len()], self.lnf_gain.as_slice()));
        out.push(("lnf_bias".into(), vec![self.lnf_bias.len()], self.lnf_bias.as_slice()));
        if let Some(h) = &self.head {
            out.push(mat("head".into(), h));
        }
        out
    }

    /// Mutable views in the same order as [`Weights::tensors`].
    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.token_embedding.as_mut_slice());
        out.push(self.position_embedding.as_mut_slice());
        for b in &mut self.blocks {
            out.push(b.ln1_gain.as_mut_slice());
            out.push(b.ln1_bias.as_mut_slice());
            out.push(b.w_q.as_mut_slice());
            out.push(b.w_k.as_mut_slice());
            out.push(b.w_v.as_mut_slice());
            out.push(b.w_o.as_mut_slice());
            out.push(b.ln2_gain.as_mut_slice());
            out.push(b.ln2_bias.as_mut_slice());
            out.push(b.w_in.as_mut_slice());
            out.push(b.w_out.as_mut_slice());
        }
        out.push(self.lnf_gain.as_mut_slice());
        out.push(self.lnf_bias.as_mut_slice());
        if let Some(h) = &mut self.head {
            out.push(h.as_mut_slice());
        }
        out
    }
}

/// The toy language model. Immutable once built; edits return new values.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyModelConfig,
    weights: Weights,
    version: u64,
}

impl ToyModel {
    /// Randomly initialized model, deterministic in `config.seed`.
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config);
        Ok(Self { config, weights, version: 0 })
    }

    pub fn from_weights(config: ToyModelConfig, weights: Weights, version: u64) -> Result<Self> {
        config.validate()?;
        let reference = Weights::init(&ToyModelConfig { seed: 0, ..config.clone() });
        let want = reference.tensors();
        let got = weights.tensors();
        if want.len() != got.len() {
            return Err(ModelError::ShapeMismatch {
                what: "weights".into(),
                expected: format!("{} tensors", want.len()),
                found: format!("{} tensors", got.len()),
            });
        }
        for ((name, shape, _), (gname, gshape, data)) in want.iter().zip(&got) {
            if shape != gshape || name != gname {
                return Err(ModelError::ShapeMismatch {
                    what: name.clone(),
                    expected: format!("{name} {shape:?}"),
                    found: format!("{gname} {gshape:?}"),
                });
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::NonFinite("weight loading"));
            }
        }
        Ok(Self { config, weights, version })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// `W_out` of `layer`.
    pub fn memory_weight(&self, layer: usize) -> Result<&Matrix> {
        self.check_layer(layer)?;
        Ok(&self.weights.blocks[layer].w_out)
    }

    pub(crate) fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(ModelError::IndexOutOfRange {
                what: "layer",
                index: layer,
                bound: self.config.n_layers,
            });
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if tokens.len() > self.config.max_seq {
            return Err(ModelError::SequenceTooLong { len: tokens.len(), max: self.config.max_seq });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { token: t, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Returns a new model with `W_out[layer] += delta` and the version bumped.
    pub fn apply_weight_delta(&self, layer: usize, delta: &Matrix) -> Result<ToyModel> {
        self.check_layer(layer)?;
        let w = &self.weights.blocks[layer].w_out;
        if w.shape() != delta.shape() {
            return Err(ModelError::ShapeMismatch {
                what: format!("weight delta for layer {layer}"),
                expected: format!("{}x{}", w.rows(), w.cols()),
                found: format!("{}x{}", delta.rows(), delta.cols()),
            });
        }
        if !delta.is_finite() {
            return Err(ModelError::NonFinite("apply_weight_delta"));
        }
        let mut next = self.clone();
        next.weights.blocks[layer].w_out.add_assign(delta)?;
        next.version += 1;
        Ok(next)
    }

    /// `W_out[layer] · key`
    pub fn memory_from_key(&self, layer: usize, key: &Vector) -> Result<Vector> {
        Ok(self.memory_weight(layer)?.matvec(key)?)
    }

    /// Recomputes the FFN key from the residual stream and attention output.
    pub fn key_from_inputs(&self, layer: usize, h: &Vector, a: &Vector) -> Result<Vector> {
        self.check_layer(layer)?;
        let b = &self.weights.blocks[layer];
        let u = h.add(a)?;
        let z = forward::layer_norm_row(u.as_slice(), b.ln2_gain.as_slice(), b.ln2_bias.as_slice());
        let pre = b.w_in.matvec(&Vector::from_raw(z))?;
        Ok(Vector::from_raw(
            pre.as_slice().iter().map(|&x| self.config.ffn_activation.apply(x)).collect(),
        ))
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut file = TensorFile::default();
        let c = &self.config;
        for (k, v) in [
            ("vocab_size", c.vocab_size.to_string()),
            ("d_model", c.d_model.to_string()),
            ("d_ffn", c.d_ffn.to_string()),
            ("n_layers", c.n_layers.to_string()),
            ("n_heads", c.n_heads.to_string()),
            ("max_seq", c.max_seq.to_string()),
            ("ffn_activation", c.ffn_activation.name().to_string()),
            ("norm_kind", "layernorm".to_string()),
            ("tie_embeddings", c.tie_embeddings.to_string()),
            ("seed", c.seed.to_string()),
            ("version", self.version.to_string()),
        ] {
            file.meta.insert(k.to_string(), v);
        }
        for (name, shape, data) in self.weights.tensors() {
            file.push(name, shape, data.to_vec());
        }
        file
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<ToyModel> {
        let get = |k: &str| -> Result<&str> {
            file.meta
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| ModelError::InvalidConfig(format!("checkpoint missing meta key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::InvalidConfig(format!("checkpoint meta {k} is not a count")))
        };
        let config = ToyModelConfig {
            vocab_size: num("vocab_size")?,
            d_model: num("d_model")?,
            d_ffn: num("d_ffn")?,
            n_layers: num("n_layers")?,
            n_heads: num("n_heads")?,
            max_seq: num("max_seq")?,
            ffn_activation: Activation::parse(get("ffn_activation")?)
                .ok_or_else(|| ModelError::InvalidConfig("unknown ffn_activation".into()))?,
            norm_kind: NormKind::Layernorm,
            tie_embeddings: get("tie_embeddings")? == "true",
            seed: num("seed")? as u64,
        };
        let version = num("version")? as u64;
        config.validate()?;
        let mut weights = Weights::init(&ToyModelConfig { seed: 0, ..config.clone() });
        let names: Vec<(String, Vec<usize>)> =
            weights.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if names.len() != file.tensors.len() {
            return Err(ModelError::ShapeMismatch {
                what: "checkpoint".into(),
                expected: format!("{} tensors", names.len()),
                found: format!("{} tensors", file.tensors.len()),
            });
        }
        for ((name, shape), slot) in names.iter().zip(weights.tensors_mut()) {
            let t = file.get(name).ok_or_else(|| ModelError::ShapeMismatch {
                what: name.clone(),
                expected: "present".into(),
                found: "missing".into(),
            })?;
            if &t.shape != shape {
                return Err(ModelError::ShapeMismatch {
                    what: name.clone(),
                    expected: format!("{shape:?}"),
                    found: format!("{:?}", t.shape),
                });
            }
            slot.copy_from_slice(&t.data);
        }
        ToyModel::from_weights(config, weights, version)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(self.to_tensor_file().save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<ToyModel> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyModel {
        ToyModel::new(ToyModelConfig {
            vocab_size: 13,
            d_model: 8,
            d_ffn: 12,
            n_layers: 2,
            n_heads: 2,
            max_seq: 10,
            seed: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_delta_bumps_version_only() {
        let m = tiny();
        let z = Matrix::zeros(8, 12);
        let m2 = m.apply_weight_delta(1, &z).unwrap();
        assert_eq!(m2.version(), m.version() + 1);
        assert_eq!(m2.weights(), m.weights());
        let t = [1, 2, 3];
        assert_eq!(forward(&m, &t).unwrap().logits, forward(&m2, &t).unwrap().logits);
    }

    #[test]
    fn delta_then_negation_restores_outputs() {
        let m = tiny();
        let d = Matrix::from_fn(8, 12, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.01 - 0.02).unwrap();
        let back = m.apply_weight_delta(0, &d).unwrap().apply_weight_delta(0, &d.scale(-1.0)).unwrap();
        let t = [0, 5, 9, 2];
        let a = forward(&m, &t).unwrap().logits;
        let b = forward(&back, &t).unwrap().logits;
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.as_slice().iter().zip(y.as_slice()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
        assert_eq!(back.version(), 2);
        // the original value is untouched
        assert_eq!(m.version(), 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = tiny();
        assert!(matches!(
            m.apply_weight_delta(0, &Matrix::zeros(12, 8)),
            Err(ModelError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            m.apply_weight_delta(5, &Matrix::zeros(8, 12)),
            Err(ModelError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(tiny().weights(), tiny().weights());
    }
}
