//! Pretraining with Adam on packed sentences.
//!
//! Each training sequence is a BOS token followed by whole sentences drawn
//! from a shuffled corpus until `max_seq` would be exceeded. The held-out
//! slice is a fixed set of packings drawn once from an independent RNG
//! stream; it measures how well the corpus is modeled rather than
//! generalization to unseen sentences, because the facts have to be
//! memorized before they can be edited.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::{sequence_loss, sequence_loss_and_grads};
use super::{ModelError, Result, ToyModel, ToyModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr` (linear decay).
    pub final_lr_fraction: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub heldout_sequences: usize,
    /// Required relative reduction of held-out loss.
    pub min_improvement: f64,
    pub bos_token: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 3e-3,
            batch_size: 8,
            warmup_steps: 50,
            final_lr_fraction: 0.1,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.99,
            heldout_sequences: 16,
            min_improvement: 0.2,
            bos_token: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    /// Mean training loss per token, one entry per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

fn pack(corpus: &[Vec<usize>], order: &[usize], bos: usize, max_seq: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![bos];
    for &i in order {
        let s = &corpus[i];
        if cur.len() + s.len() > max_seq && cur.len() > 1 {
            out.push(std::mem::replace(&mut cur, vec![bos]));
        }
        cur.extend(s.iter().take(max_seq - 1));
    }
    if cur.len() > 1 {
        out.push(cur);
    }
    out
}

fn heldout_loss(model: &ToyModel, seqs: &[Vec<usize>]) -> f64 {
    let (mut total, mut n) = (0.0, 0);
    for s in seqs {
        let (l, c) = sequence_loss(model, s);
        total += l;
        n += c;
    }
    total / n as f64
}

/// Trains a fresh model initialized from `config` on `corpus`.
pub fn pretrain(
    config: &ToyModelConfig,
    corpus: &[Vec<usize>],
    train: &TrainConfig,
) -> Result<(ToyModel, PretrainReport)> {
    let corpus: Vec<Vec<usize>> = corpus.iter().filter(|s| !s.is_empty()).cloned().collect();
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let mut model = ToyModel::new(config.clone())?;
    for s in &corpus {
        model.check_tokens(s)?;
    }
    model.check_tokens(&[train.bos_token])?;
    if config.max_seq < 2 {
        return Err(ModelError::InvalidConfig("pretraining needs max_seq >= 2".into()));
    }
    if train.batch_size == 0 {
        return Err(ModelError::InvalidConfig("batch_size must be at least 1".into()));
    }

    let mut held_rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut held_rng);
    let mut heldout = pack(&corpus, &order, train.bos_token, config.max_seq);
    heldout.truncate(train.heldout_sequences.max(1));
    let initial = heldout_loss(&model, &heldout);

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let seqs_per_epoch = pack(&corpus, &order, train.bos_token, config.max_seq).len();
    let total_steps = train.epochs * seqs_per_epoch.div_ceil(train.batch_size);
    let mut m = model.weights().zeros_like();
    let mut v = model.weights().zeros_like();
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(train.epochs);

    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let seqs = pack(&corpus, &order, train.bos_token, config.max_seq);
        let (mut epoch_total, mut epoch_n) = (0.0, 0);
        for chunk in seqs.chunks(train.batch_size) {
            let mut grads = model.weights().zeros_like();
            let (mut loss, mut n) = (0.0, 0);
            for s in chunk {
                let (l, c) = sequence_loss_and_grads(&model, s, &mut grads);
                loss += l;
                n += c;
            }
            if !loss.is_finite() {
                return Err(ModelError::NonFinite("pretraining loss"));
            }
            epoch_total += loss;
            epoch_n += n;
            let scale = 1.0 / n as f64;
            let mut gslices = grads.tensors_mut();
            let norm = gslices
                .iter()
                .flat_map(|t| t.iter())
                .map(|g| (g * scale) * (g * scale))
                .sum::<f64>()
                .sqrt();
            let clip = if norm > train.grad_clip { train.grad_clip / norm } else { 1.0 };
            for t in gslices.iter_mut() {
                t.iter_mut().for_each(|g| *g *= scale * clip);
            }

            step += 1;
            let lr = schedule(train, step, total_steps);
            let b1c = 1.0 - train.beta1.powi(step as i32);
            let b2c = 1.0 - train.beta2.powi(step as i32);
            let mut ms = m.tensors_mut();
            let mut vs = v.tensors_mut();
            let mut ws = model.weights_mut().tensors_mut();
            for (((w, g), mt), vt) in ws.iter_mut().zip(&gslices).zip(ms.iter_mut()).zip(vs.iter_mut()) {
                for i in 0..w.len() {
                    mt[i] = train.beta1 * mt[i] + (1.0 - train.beta1) * g[i];
                    vt[i] = train.beta2 * vt[i] + (1.0 - train.beta2) * g[i] * g[i];
                    w[i] -= lr * (mt[i] / b1c) / ((vt[i] / b2c).sqrt() + 1e-8);
                }
            }
        }
        epoch_losses.push(epoch_total / epoch_n as f64);
    }

    let final_loss = heldout_loss(&model, &heldout);
    if !final_loss.is_finite() || final_loss > (1.0 - train.min_improvement) * initial {
        return Err(ModelError::InsufficientProgress { initial, final_loss });
    }
    Ok((
        model,
        PretrainReport { initial_heldout_loss: initial, final_heldout_loss: final_loss, epoch_losses, steps: step },
    ))
}

fn schedule(train: &TrainConfig, step: usize, total: usize) -> f64 {
    if step <= train.warmup_steps {
        return train.lr * step as f64 / train.warmup_steps.max(1) as f64;
    }
    let span = total.saturating_sub(train.warmup_steps).max(1) as f64;
    let frac = ((step - train.warmup_steps) as f64 / span).min(1.0);
    train.lr * (1.0 - frac * (1.0 - train.final_lr_fraction))
}
