//! Reverse-mode gradients.
//!
//! The same block backward serves two callers: pretraining (full pass,
//! weight gradients accumulated) and residual optimization (partial pass
//! from the injection point, no weight gradients).

use super::forward::{softmax, LayerActs, NormCache, Pass};
use super::{Block, ModelError, Result, ToyModel, ToyModelConfig, Weights};
use crate::linalg::kernels;
use crate::linalg::{Matrix, Vector};

fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    gain: &[f64],
    d: usize,
    mut dgain: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        if let Some(g) = dgain.as_deref_mut() {
            for i in 0..d {
                g[i] += dyr[i] * xh[i];
            }
        }
        if let Some(b) = dbias.as_deref_mut() {
            for i in 0..d {
                b[i] += dyr[i];
            }
        }
        let dxhat: Vec<f64> = dyr.iter().zip(gain).map(|(a, g)| a * g).collect();
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rstd = cache.rstd[r];
        for i in 0..d {
            dx[r * d + i] = rstd * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

/// `dX = dY · W` and optionally `dW += dY^T · X` for a projection `Y = X W^T`.
fn project_backward(dy: &[f64], x: &[f64], w: &Matrix, dw: Option<&mut Matrix>) -> Vec<f64> {
    let rows = dy.len() / w.rows();
    if let Some(dw) = dw {
        kernels::matmul_transa_acc(dy, x, rows, w.rows(), w.cols(), dw.as_mut_slice());
    }
    let mut dx = vec![0.0; rows * w.cols()];
    kernels::matmul_acc(dy, w.as_slice(), rows, w.rows(), w.cols(), &mut dx);
    dx
}

/// Backward through one block for rows `acts.start..acts.len`. Gradients
/// flowing into cached rows before `start` are dropped.
pub(crate) fn layer_backward(
    block: &Block,
    cfg: &ToyModelConfig,
    acts: &LayerActs,
    d_out: &[f64],
    mut grads: Option<&mut Block>,
) -> Vec<f64> {
    let d = cfg.d_model;
    let rows = acts.rows();
    let start = acts.start;
    let len = acts.len;

    // h_out = u + m
    let dkey_src = d_out;
    let dkey = project_backward(dkey_src, &acts.key, &block.w_out, grads.as_deref_mut().map(|g| &mut g.w_out));
    let dpre: Vec<f64> =
        dkey.iter().zip(&acts.pre).map(|(g, &x)| g * cfg.ffn_activation.derivative(x)).collect();
    let dz = project_backward(&dpre, &acts.z, &block.w_in, grads.as_deref_mut().map(|g| &mut g.w_in));
    let (dg2, db2) = match grads.as_deref_mut() {
        Some(g) => (Some(g.ln2_gain.as_mut_slice()), Some(g.ln2_bias.as_mut_slice())),
        None => (None, None),
    };
    let du_ln = layer_norm_backward(&dz, &acts.ln2, block.ln2_gain.as_slice(), d, dg2, db2);
    let du: Vec<f64> = d_out.iter().zip(&du_ln).map(|(a, b)| a + b).collect();

    // u = h_in + attn
    let dctx = project_backward(&du, &acts.ctx, &block.w_o, grads.as_deref_mut().map(|g| &mut g.w_o));
    let nh = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut dp = vec![0.0; len];
    for h in 0..nh {
        let off = h * dh;
        for r in 0..rows {
            let t = start + r;
            let p = &acts.probs[(h * rows + r) * len..(h * rows + r) * len + t + 1];
            let dc = &dctx[r * d + off..r * d + off + dh];
            let mut weighted = 0.0;
            for s in 0..=t {
                dp[s] = kernels::dot(dc, &acts.v_all[s * d + off..s * d + off + dh]);
                weighted += p[s] * dp[s];
                if s >= start {
                    kernels::axpy(p[s], dc, &mut dv[(s - start) * d + off..(s - start) * d + off + dh]);
                }
            }
            let qr = &acts.q[r * d + off..r * d + off + dh];
            for s in 0..=t {
                let ds = p[s] * (dp[s] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                kernels::axpy(ds, &acts.k_all[s * d + off..s * d + off + dh], &mut dq[r * d + off..r * d + off + dh]);
                if s >= start {
                    kernels::axpy(ds, qr, &mut dk[(s - start) * d + off..(s - start) * d + off + dh]);
                }
            }
        }
    }
    let mut dn1 = project_backward(&dq, &acts.n1, &block.w_q, grads.as_deref_mut().map(|g| &mut g.w_q));
    let dn1_k = project_backward(&dk, &acts.n1, &block.w_k, grads.as_deref_mut().map(|g| &mut g.w_k));
    let dn1_v = project_backward(&dv, &acts.n1, &block.w_v, grads.as_deref_mut().map(|g| &mut g.w_v));
    for ((a, b), c) in dn1.iter_mut().zip(&dn1_k).zip(&dn1_v) {
        *a += b + c;
    }
    let (dg1, db1) = match grads {
        Some(g) => (Some(g.ln1_gain.as_mut_slice()), Some(g.ln1_bias.as_mut_slice())),
        None => (None, None),
    };
    let dh_ln = layer_norm_backward(&dn1, &acts.ln1, block.ln1_gain.as_slice(), d, dg1, db1);
    du.iter().zip(&dh_ln).map(|(a, b)| a + b).collect()
}

/// Backward through the final norm and head. Returns the gradient for the
/// residual rows `pass.start..pass.len` (zero above `logit_start`).
pub(crate) fn head_backward(
    weights: &Weights,
    cfg: &ToyModelConfig,
    pass: &Pass,
    dlogits: &[f64],
    grads: Option<&mut Weights>,
) -> Vec<f64> {
    let d = cfg.d_model;
    let head = weights.head();
    let (df, dgain, dbias) = match grads {
        Some(g) => {
            let dhead = match g.head.as_mut() {
                Some(h) => h,
                None => &mut g.token_embedding,
            };
            let df = project_backward(dlogits, &pass.f, head, Some(dhead));
            (df, Some(g.lnf_gain.as_mut_slice()), Some(g.lnf_bias.as_mut_slice()))
        }
        None => (project_backward(dlogits, &pass.f, head, None), None, None),
    };
    let dh_tail = layer_norm_backward(&df, &pass.lnf, weights.lnf_gain.as_slice(), d, dgain, dbias);
    let mut out = vec![0.0; (pass.len - pass.start) * d];
    let skip = (pass.logit_start - pass.start) * d;
    out[skip..].copy_from_slice(&dh_tail);
    out
}

/// Negative log-probability of `target` after the last position, with the
/// softmax gradient written to `dlogits_last`.
fn nll_last_row(logits_last: &[f64], target: usize) -> (f64, Vec<f64>) {
    let mut p = softmax(logits_last);
    let loss = -p[target].max(f64::MIN_POSITIVE).ln();
    p[target] -= 1.0;
    (loss, p)
}

struct Context {
    base: Pass,
    position: usize,
    target: usize,
}

/// Mean next-token NLL of a target over several contexts as a function of a
/// vector added to the residual stream after block `layer` at each context's
/// position. Lower blocks are evaluated once and cached.
pub struct DeltaObjective<'m> {
    model: &'m ToyModel,
    layer: usize,
    contexts: Vec<Context>,
}

impl<'m> DeltaObjective<'m> {
    /// `contexts` holds `(tokens, position)` pairs; the loss is read after
    /// the last token of each.
    pub fn new(
        model: &'m ToyModel,
        layer: usize,
        contexts: &[(Vec<usize>, usize)],
        target: usize,
    ) -> Result<Self> {
        model.check_layer(layer)?;
        if target >= model.config().vocab_size {
            return Err(ModelError::TokenOutOfRange { token: target, vocab: model.config().vocab_size });
        }
        if contexts.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let mut out = Vec::with_capacity(contexts.len());
        for (tokens, position) in contexts {
            model.check_tokens(tokens)?;
            if *position >= tokens.len() {
                return Err(ModelError::IndexOutOfRange {
                    what: "position",
                    index: *position,
                    bound: tokens.len(),
                });
            }
            let base = model.run(tokens, None, tokens.len() - 1);
            out.push(Context { base, position: *position, target });
        }
        Ok(Self { model, layer, contexts: out })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// Residual stream `h^layer` at each context's position.
    pub fn hidden_states(&self) -> Vec<Vector> {
        let d = self.model.config().d_model;
        self.contexts
            .iter()
            .map(|c| {
                let h = &c.base.layers[self.layer].h_out;
                Vector::from_raw(h[c.position * d..(c.position + 1) * d].to_vec())
            })
            .collect()
    }

    /// Mean loss and its gradient with respect to `delta`.
    pub fn loss_and_grad(&self, delta: &Vector) -> Result<(f64, Vector)> {
        let cfg = self.model.config();
        let d = cfg.d_model;
        if delta.len() != d {
            return Err(ModelError::ShapeMismatch {
                what: "delta".into(),
                expected: format!("length {d}"),
                found: format!("length {}", delta.len()),
            });
        }
        let mut total = 0.0;
        let mut grad = vec![0.0; d];
        for c in &self.contexts {
            let (loss, g) = self.one(c, delta);
            total += loss;
            kernels::axpy(1.0, &g, &mut grad);
        }
        let n = self.contexts.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        let loss = total / n;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite("residual objective"));
        }
        Ok((loss, Vector::from_raw(grad)))
    }

    /// Mean loss only.
    pub fn loss(&self, delta: &Vector) -> Result<f64> {
        Ok(self.loss_and_grad(delta)?.0)
    }

    fn one(&self, c: &Context, delta: &Vector) -> (f64, Vec<f64>) {
        let model = self.model;
        let cfg = model.config();
        let d = cfg.d_model;
        let len = c.base.len;
        let mut rows = c.base.layers[self.layer].h_out[c.position * d..].to_vec();
        kernels::axpy(1.0, delta.as_slice(), &mut rows[..d]);
        let pass = model.run_suffix(&c.base, self.layer + 1, c.position, rows, len - 1);
        let (loss, dlogits) = nll_last_row(&pass.logits, c.target);
        let mut dh = head_backward(model.weights(), cfg, &pass, &dlogits, None);
        for (i, acts) in pass.layers.iter().enumerate().rev() {
            let block = &model.weights().blocks[pass.first_layer + i];
            dh = layer_backward(block, cfg, acts, &dh, None);
        }
        dh.truncate(d);
        (loss, dh)
    }
}

/// Gradient at `delta = 0` of `-log P(target | tokens)` with respect to a
/// vector added to the residual stream after block `layer` at `position`.
pub fn grad_delta(
    model: &ToyModel,
    tokens: &[usize],
    layer: usize,
    position: usize,
    target: usize,
) -> Result<Vector> {
    let zero = Vector::zeros(model.config().d_model);
    Ok(loss_and_grad_at(model, tokens, layer, position, target, &zero)?.1)
}

/// Loss and gradient at an arbitrary `delta`.
pub fn loss_and_grad_at(
    model: &ToyModel,
    tokens: &[usize],
    layer: usize,
    position: usize,
    target: usize,
    delta: &Vector,
) -> Result<(f64, Vector)> {
    DeltaObjective::new(model, layer, &[(tokens.to_vec(), position)], target)?.loss_and_grad(delta)
}

/// Full backward for pretraining: mean cross-entropy of next-token
/// prediction over every position. Returns the summed loss and the number
/// of predicted tokens; gradients of the summed loss go into `grads`.
pub(crate) fn sequence_loss_and_grads(model: &ToyModel, tokens: &[usize], grads: &mut Weights) -> (f64, usize) {
    let cfg = model.config();
    let v = cfg.vocab_size;
    let d = cfg.d_model;
    let n = tokens.len() - 1;
    let pass = model.run(&tokens[..n], None, 0);
    let mut dlogits = vec![0.0; n * v];
    let mut loss = 0.0;
    for t in 0..n {
        let (l, g) = nll_last_row(&pass.logits[t * v..(t + 1) * v], tokens[t + 1]);
        loss += l;
        dlogits[t * v..(t + 1) * v].copy_from_slice(&g);
    }
    let mut dh = head_backward(model.weights(), cfg, &pass, &dlogits, Some(grads));
    for (l, acts) in pass.layers.iter().enumerate().rev() {
        dh = layer_backward(&model.weights().blocks[l], cfg, acts, &dh, Some(&mut grads.blocks[l]));
    }
    for (t, &tok) in tokens[..n].iter().enumerate() {
        let row = &dh[t * d..(t + 1) * d];
        kernels::axpy(1.0, row, &mut grads.token_embedding.as_mut_slice()[tok * d..(tok + 1) * d]);
        kernels::axpy(1.0, row, &mut grads.position_embedding.as_mut_slice()[t * d..(t + 1) * d]);
    }
    (loss, n)
}

/// Summed next-token loss over every position, without gradients.
pub(crate) fn sequence_loss(model: &ToyModel, tokens: &[usize]) -> (f64, usize) {
    let v = model.config().vocab_size;
    let n = tokens.len() - 1;
    let pass = model.run(&tokens[..n], None, 0);
    let mut loss = 0.0;
    for t in 0..n {
        let p = softmax(&pass.logits[t * v..(t + 1) * v]);
        loss -= p[tokens[t + 1]].max(f64::MIN_POSITIVE).ln();
    }
    (loss, n)
}
