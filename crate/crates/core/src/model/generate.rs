use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::forward::softmax;
use super::{ModelError, Result, ToyModel};

/// Decoding rule for [`generate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GenerateMode {
    /// Argmax at each step; ties go to the lowest token id.
    Greedy,
    /// Sample from `softmax(logits / temperature)` with a seeded stream.
    Temperature { temperature: f64, seed: u64 },
}

/// Autoregressive continuation of `prompt`. Returns only the new tokens.
pub fn generate(model: &ToyModel, prompt: &[usize], n_new: usize, mode: GenerateMode) -> Result<Vec<usize>> {
    model.check_tokens(prompt)?;
    let max = model.config().max_seq;
    if prompt.len() + n_new > max {
        return Err(ModelError::SequenceTooLong { len: prompt.len() + n_new, max });
    }
    let mut rng = match mode {
        GenerateMode::Temperature { temperature, seed } => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(ModelError::InvalidConfig(format!(
                    "temperature must be positive and finite, got {temperature}"
                )));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        GenerateMode::Greedy => None,
    };
    let mut tokens = prompt.to_vec();
    for _ in 0..n_new {
        let pass = model.run(&tokens, None, tokens.len() - 1);
        let next = match (mode, rng.as_mut()) {
            (GenerateMode::Temperature { temperature, .. }, Some(rng)) => {
                let scaled: Vec<f64> = pass.logits.iter().map(|x| x / temperature).collect();
                let p = softmax(&scaled);
                WeightedIndex::new(&p)
                    .map_err(|_| ModelError::NonFinite("sampling distribution"))?
                    .sample(rng)
            }
            _ => argmax(&pass.logits),
        };
        tokens.push(next);
    }
    Ok(tokens.split_off(prompt.len()))
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToyModelConfig;

    fn model() -> ToyModel {
        ToyModel::new(ToyModelConfig {
            vocab_size: 9,
            d_model: 8,
            d_ffn: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq: 8,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn modes_are_deterministic() {
        let m = model();
        let g = generate(&m, &[1, 2], 5, GenerateMode::Greedy).unwrap();
        assert_eq!(g, generate(&m, &[1, 2], 5, GenerateMode::Greedy).unwrap());
        assert_eq!(g.len(), 5);
        let t = GenerateMode::Temperature { temperature: 1.0, seed: 3 };
        assert_eq!(generate(&m, &[1], 6, t).unwrap(), generate(&m, &[1], 6, t).unwrap());
    }

    #[test]
    fn zero_new_tokens_and_overflow() {
        let m = model();
        assert!(generate(&m, &[1, 2, 3], 0, GenerateMode::Greedy).unwrap().is_empty());
        assert!(matches!(
            generate(&m, &[1, 2, 3], 6, GenerateMode::Greedy),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.5, 2.0, 2.0, 1.0]), 1);
    }
}
