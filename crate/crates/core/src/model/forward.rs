//! Forward passes, activation caches and interventions.
//!
//! A pass can start at any row: rows before `start` are taken from a cached
//! base pass (their keys and values feed attention), rows from `start` on are
//! recomputed. Every per-row computation reduces in a fixed order, so a
//! partial pass reproduces the corresponding rows of a full pass exactly.

use super::{Block, ModelError, Result, ToyModel, ToyModelConfig, LAYERNORM_EPS};
use crate::linalg::kernels;
use crate::linalg::Vector;

/// A change applied to one position of one layer during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Intervention {
    /// Add `delta` to the residual stream right after the block's FFN.
    AddResidual { layer: usize, position: usize, delta: Vector },
    /// Replace the FFN output `m` with `memory`.
    ReplaceMemory { layer: usize, position: usize, memory: Vector },
}

impl Intervention {
    fn layer(&self) -> usize {
        match self {
            Intervention::AddResidual { layer, .. } | Intervention::ReplaceMemory { layer, .. } => *layer,
        }
    }

    fn position(&self) -> usize {
        match self {
            Intervention::AddResidual { position, .. }
            | Intervention::ReplaceMemory { position, .. } => *position,
        }
    }

    fn vector(&self) -> &Vector {
        match self {
            Intervention::AddResidual { delta, .. } => delta,
            Intervention::ReplaceMemory { memory, .. } => memory,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Activations of one block for rows `start..len`.
#[derive(Debug, Clone)]
pub(crate) struct LayerActs {
    pub start: usize,
    pub len: usize,
    pub h_in: Vec<f64>,
    pub ln1: NormCache,
    pub n1: Vec<f64>,
    pub q: Vec<f64>,
    /// Keys and values for all `len` rows.
    pub k_all: Vec<f64>,
    pub v_all: Vec<f64>,
    /// `[head][row][len]`, only `s <= t` populated.
    pub probs: Vec<f64>,
    pub ctx: Vec<f64>,
    pub attn: Vec<f64>,
    pub ln2: NormCache,
    pub z: Vec<f64>,
    pub pre: Vec<f64>,
    pub key: Vec<f64>,
    pub mem: Vec<f64>,
    pub h_out: Vec<f64>,
}

impl LayerActs {
    pub fn rows(&self) -> usize {
        self.len - self.start
    }
}

/// A (possibly partial) forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Pass {
    pub len: usize,
    pub start: usize,
    /// `layers[i]` belongs to block `first_layer + i`.
    pub first_layer: usize,
    pub layers: Vec<LayerActs>,
    /// First row whose logits were computed.
    pub logit_start: usize,
    pub lnf: NormCache,
    pub f: Vec<f64>,
    pub logits: Vec<f64>,
}

pub(crate) fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let (xhat, _) = normalize_row(x);
    xhat.iter().zip(gain).zip(bias).map(|((x, g), b)| x * g + b).collect()
}

fn normalize_row(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * rstd).collect(), rstd)
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (NormCache, Vec<f64>) {
    let rows = x.len() / d;
    let mut cache = NormCache { xhat: Vec::with_capacity(x.len()), rstd: Vec::with_capacity(rows) };
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let (xhat, rstd) = normalize_row(&x[r * d..(r + 1) * d]);
        out.extend(xhat.iter().zip(gain).zip(bias).map(|((x, g), b)| x * g + b));
        cache.xhat.extend_from_slice(&xhat);
        cache.rstd.push(rstd);
    }
    (cache, out)
}

fn project(x: &[f64], w: &crate::linalg::Matrix) -> Vec<f64> {
    let rows = x.len() / w.cols();
    let mut out = vec![0.0; rows * w.rows()];
    kernels::matmul_transb(x, w.as_slice(), rows, w.cols(), w.rows(), &mut out);
    out
}

/// Runs one block on rows `start..len`. `base` supplies keys/values of rows
/// before `start`. `edit` is an intervention already resolved to this block.
pub(crate) fn layer_forward(
    block: &Block,
    cfg: &ToyModelConfig,
    h_in: Vec<f64>,
    start: usize,
    len: usize,
    base: Option<&LayerActs>,
    edit: Option<&Intervention>,
) -> LayerActs {
    let d = cfg.d_model;
    let rows = len - start;
    debug_assert_eq!(h_in.len(), rows * d);
    let (ln1, n1) = layer_norm(&h_in, d, block.ln1_gain.as_slice(), block.ln1_bias.as_slice());
    let q = project(&n1, &block.w_q);
    let k_new = project(&n1, &block.w_k);
    let v_new = project(&n1, &block.w_v);
    let (k_all, v_all) = if start == 0 {
        (k_new, v_new)
    } else {
        let base = base.expect("partial pass needs a base pass");
        let mut k = base.k_all[..start * d].to_vec();
        k.extend_from_slice(&k_new);
        let mut v = base.v_all[..start * d].to_vec();
        v.extend_from_slice(&v_new);
        (k, v)
    };

    let nh = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; nh * rows * len];
    let mut ctx = vec![0.0; rows * d];
    for h in 0..nh {
        let off = h * dh;
        for r in 0..rows {
            let t = start + r;
            let qr = &q[r * d + off..r * d + off + dh];
            let p = &mut probs[(h * rows + r) * len..(h * rows + r) * len + t + 1];
            let mut max = f64::NEG_INFINITY;
            for (s, ps) in p.iter_mut().enumerate() {
                *ps = kernels::dot(qr, &k_all[s * d + off..s * d + off + dh]) * scale;
                max = max.max(*ps);
            }
            let mut sum = 0.0;
            for ps in p.iter_mut() {
                *ps = (*ps - max).exp();
                sum += *ps;
            }
            for ps in p.iter_mut() {
                *ps /= sum;
            }
            let c = &mut ctx[r * d + off..r * d + off + dh];
            for (s, &ps) in p.iter().enumerate() {
                kernels::axpy(ps, &v_all[s * d + off..s * d + off + dh], c);
            }
        }
    }
    let attn = project(&ctx, &block.w_o);
    let u: Vec<f64> = h_in.iter().zip(&attn).map(|(h, a)| h + a).collect();
    let (ln2, z) = layer_norm(&u, d, block.ln2_gain.as_slice(), block.ln2_bias.as_slice());
    let pre = project(&z, &block.w_in);
    let key: Vec<f64> = pre.iter().map(|&x| cfg.ffn_activation.apply(x)).collect();
    let mut mem = project(&key, &block.w_out);
    if let Some(Intervention::ReplaceMemory { position, memory, .. }) = edit {
        let r = position - start;
        mem[r * d..(r + 1) * d].copy_from_slice(memory.as_slice());
    }
    let mut h_out: Vec<f64> = u.iter().zip(&mem).map(|(u, m)| u + m).collect();
    if let Some(Intervention::AddResidual { position, delta, .. }) = edit {
        let r = position - start;
        for (h, x) in h_out[r * d..(r + 1) * d].iter_mut().zip(delta.as_slice()) {
            *h += x;
        }
    }
    LayerActs {
        start,
        len,
        h_in,
        ln1,
        n1,
        q,
        k_all,
        v_all,
        probs,
        ctx,
        attn,
        ln2,
        z,
        pre,
        key,
        mem,
        h_out,
    }
}

impl ToyModel {
    pub(crate) fn validate_intervention(&self, tokens: &[usize], iv: &Intervention) -> Result<()> {
        self.check_layer(iv.layer())?;
        if iv.position() >= tokens.len() {
            return Err(ModelError::IndexOutOfRange {
                what: "position",
                index: iv.position(),
                bound: tokens.len(),
            });
        }
        if iv.vector().len() != self.config().d_model {
            return Err(ModelError::ShapeMismatch {
                what: "intervention vector".into(),
                expected: format!("length {}", self.config().d_model),
                found: format!("length {}", iv.vector().len()),
            });
        }
        Ok(())
    }

    /// Full pass from the embeddings. Logits are computed for rows
    /// `logit_start..len`.
    pub(crate) fn run(&self, tokens: &[usize], edit: Option<&Intervention>, logit_start: usize) -> Pass {
        let cfg = self.config();
        let w = self.weights();
        let d = cfg.d_model;
        let len = tokens.len();
        let mut h = Vec::with_capacity(len * d);
        for (t, &tok) in tokens.iter().enumerate() {
            let e = w.token_embedding.row(tok);
            let p = w.position_embedding.row(t);
            h.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, block) in w.blocks.iter().enumerate() {
            let e = edit.filter(|iv| iv.layer() == l);
            let acts = layer_forward(block, cfg, h, 0, len, None, e);
            h = acts.h_out.clone();
            layers.push(acts);
        }
        self.finish(layers, 0, 0, len, h, logit_start)
    }

    /// Recomputes blocks `first_layer..` for rows `start..` given their new
    /// input `h_rows`; everything else comes from `base`.
    pub(crate) fn run_suffix(
        &self,
        base: &Pass,
        first_layer: usize,
        start: usize,
        h_rows: Vec<f64>,
        logit_start: usize,
    ) -> Pass {
        let cfg = self.config();
        let len = base.len;
        let mut h = h_rows;
        let mut layers = Vec::with_capacity(cfg.n_layers - first_layer);
        for l in first_layer..cfg.n_layers {
            let acts =
                layer_forward(&self.weights().blocks[l], cfg, h, start, len, Some(&base.layers[l]), None);
            h = acts.h_out.clone();
            layers.push(acts);
        }
        self.finish(layers, first_layer, start, len, h, logit_start.max(start))
    }

    fn finish(
        &self,
        layers: Vec<LayerActs>,
        first_layer: usize,
        start: usize,
        len: usize,
        final_h: Vec<f64>,
        logit_start: usize,
    ) -> Pass {
        let cfg = self.config();
        let w = self.weights();
        let d = cfg.d_model;
        let rows = &final_h[(logit_start - start) * d..];
        let (lnf, f) = layer_norm(rows, d, w.lnf_gain.as_slice(), w.lnf_bias.as_slice());
        let logits = project(&f, w.head());
        Pass { len, start, first_layer, layers, logit_start, lnf, f, logits }
    }
}

/// Per-layer slice of a [`ForwardTrace`]; one entry per token position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Residual stream entering the block (`h^{l-1}`).
    pub h_in: Vec<Vector>,
    /// Attention block output (`a^l`).
    pub attn: Vec<Vector>,
    /// FFN key (`k`, post-activation inner vector).
    pub key: Vec<Vector>,
    /// FFN output (`m^l`).
    pub memory: Vec<Vector>,
    /// Residual stream leaving the block (`h^l`).
    pub h_out: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub logits: Vec<Vector>,
}

fn split_rows(data: &[f64], width: usize) -> Vec<Vector> {
    data.chunks(width).map(|c| Vector::from_raw(c.to_vec())).collect()
}

impl ForwardTrace {
    fn from_pass(pass: &Pass, cfg: &ToyModelConfig) -> Self {
        let d = cfg.d_model;
        let layers = pass
            .layers
            .iter()
            .map(|a| LayerTrace {
                h_in: split_rows(&a.h_in, d),
                attn: split_rows(&a.attn, d),
                key: split_rows(&a.key, cfg.d_ffn),
                memory: split_rows(&a.mem, d),
                h_out: split_rows(&a.h_out, d),
            })
            .collect();
        Self { layers, logits: split_rows(&pass.logits, cfg.vocab_size) }
    }

    pub fn n_positions(&self) -> usize {
        self.logits.len()
    }
}

pub fn forward(model: &ToyModel, tokens: &[usize]) -> Result<ForwardTrace> {
    model.check_tokens(tokens)?;
    let pass = model.run(tokens, None, 0);
    Ok(ForwardTrace::from_pass(&pass, model.config()))
}

fn logits_with(model: &ToyModel, tokens: &[usize], iv: &Intervention) -> Result<Vec<Vector>> {
    model.check_tokens(tokens)?;
    model.validate_intervention(tokens, iv)?;
    let pass = model.run(tokens, Some(iv), 0);
    Ok(split_rows(&pass.logits, model.config().vocab_size))
}

/// Logits with `delta` added to the residual stream after block `layer` at
/// `position`.
pub fn forward_with_delta(
    model: &ToyModel,
    tokens: &[usize],
    layer: usize,
    position: usize,
    delta: &Vector,
) -> Result<Vec<Vector>> {
    logits_with(model, tokens, &Intervention::AddResidual { layer, position, delta: delta.clone() })
}

/// Logits with the FFN output of block `layer` at `position` replaced.
pub fn forward_with_memory_override(
    model: &ToyModel,
    tokens: &[usize],
    layer: usize,
    position: usize,
    memory: &Vector,
) -> Result<Vec<Vector>> {
    logits_with(model, tokens, &Intervention::ReplaceMemory { layer, position, memory: memory.clone() })
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Next-token distribution after the last position, optionally under an
/// intervention.
pub fn next_token_probs(
    model: &ToyModel,
    tokens: &[usize],
    edit: Option<&Intervention>,
) -> Result<Vector> {
    model.check_tokens(tokens)?;
    if let Some(iv) = edit {
        model.validate_intervention(tokens, iv)?;
    }
    let pass = model.run(tokens, edit, tokens.len() - 1);
    Ok(Vector::from_raw(softmax(&pass.logits)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(layers: usize) -> ToyModel {
        ToyModel::new(ToyModelConfig {
            vocab_size: 17,
            d_model: 12,
            d_ffn: 20,
            n_layers: layers,
            n_heads: 3,
            max_seq: 12,
            seed: 9,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = model(2);
        let tr = forward(&m, &[1, 4, 7, 2, 16]).unwrap();
        for row in &tr.logits {
            let s: f64 = softmax(row.as_slice()).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn traced_memory_recomputes_from_key_and_inputs() {
        let m = model(3);
        let tr = forward(&m, &[3, 1, 4, 1, 5, 9]).unwrap();
        for (l, lt) in tr.layers.iter().enumerate() {
            for t in 0..tr.n_positions() {
                let from_key = m.memory_from_key(l, &lt.key[t]).unwrap();
                let from_inputs = m.key_from_inputs(l, &lt.h_in[t], &lt.attn[t]).unwrap();
                for (a, b) in from_key.as_slice().iter().zip(lt.memory[t].as_slice()) {
                    assert!((a - b).abs() < 1e-10);
                }
                for (a, b) in from_inputs.as_slice().iter().zip(lt.key[t].as_slice()) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn single_token_trace_shape() {
        let m = model(2);
        let tr = forward(&m, &[5]).unwrap();
        assert_eq!(tr.layers.len(), 2);
        for lt in &tr.layers {
            assert_eq!(lt.h_in.len(), 1);
            assert_eq!(lt.attn.len(), 1);
            assert_eq!(lt.key.len(), 1);
            assert_eq!(lt.memory.len(), 1);
            assert_eq!(lt.key[0].len(), 20);
            assert_eq!(lt.memory[0].len(), 12);
        }
    }

    #[test]
    fn zero_delta_and_identity_override_are_exact() {
        let m = model(3);
        let toks = [2, 8, 3, 11];
        let plain = forward(&m, &toks).unwrap();
        let zero = forward_with_delta(&m, &toks, 1, 2, &Vector::zeros(12)).unwrap();
        assert_eq!(plain.logits, zero);
        let same = forward_with_memory_override(&m, &toks, 1, 2, &plain.layers[1].memory[2]).unwrap();
        assert_eq!(plain.logits, same);
    }

    #[test]
    fn interventions_are_causal() {
        let m = model(3);
        let toks = [2, 8, 3, 11, 6];
        let plain = forward(&m, &toks).unwrap();
        let delta = Vector::new((0..12).map(|i| 0.3 * i as f64).collect()).unwrap();
        let pushed = forward_with_delta(&m, &toks, 2, 4, &delta).unwrap();
        assert_eq!(plain.logits[..4], pushed[..4]);
        assert_ne!(plain.logits[4], pushed[4]);
        let over = forward_with_memory_override(&m, &toks, 0, 2, &delta).unwrap();
        assert_eq!(plain.logits[..2], over[..2]);
    }

    #[test]
    fn partial_pass_matches_full_pass() {
        let m = model(3);
        let toks = [2, 8, 3, 11, 6, 1];
        let full = m.run(&toks, None, 0);
        let d = 12;
        let rows = full.layers[0].h_out[3 * d..].to_vec();
        let part = m.run_suffix(&full, 1, 3, rows, 0);
        assert_eq!(&full.logits[3 * 17..], &part.logits[..]);
    }

    #[test]
    fn input_validation() {
        let m = model(2);
        assert!(matches!(forward(&m, &[]), Err(ModelError::EmptyInput)));
        assert!(matches!(forward(&m, &[17]), Err(ModelError::TokenOutOfRange { .. })));
        assert!(matches!(forward(&m, &[0; 13]), Err(ModelError::SequenceTooLong { .. })));
        let d = Vector::zeros(12);
        assert!(forward_with_delta(&m, &[1, 2], 2, 0, &d).is_err());
        assert!(forward_with_delta(&m, &[1, 2], 0, 2, &d).is_err());
        assert!(forward_with_delta(&m, &[1, 2], 0, 1, &Vector::zeros(3)).is_err());
    }
}
