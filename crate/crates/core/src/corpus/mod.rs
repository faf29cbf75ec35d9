//! Synthetic fact world, word tokenizer, prompt prefixes and fact files.

mod io;
mod tokenizer;
mod world;

pub use io::{load_facts, parse_facts, save_facts};
pub use tokenizer::{Tokenizer, BOS, UNK};
pub use world::{
    encode_prompt, encode_text, object_token, synth_world, EditBatch, EditSequence, Fact, Neighbor,
    PromptTokens, SynthWorld, WorldConfig, MAX_OBJECTS, MAX_RELATIONS, SUBJECT,
};

use thiserror::Error;

use crate::model::{generate, GenerateMode, ModelError, ToyModel};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid world counts: {0}")]
    InvalidCounts(String),
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("fact {fact}: subject placeholder not found in {template:?}")]
    SubjectNotFound { fact: String, template: String },
    #[error("object {0:?} is not a single token")]
    MultiTokenObject(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: field {field:?}: {msg}")]
    Field { line: usize, field: String, msg: String },
    #[error("fact {fact}: {msg}")]
    Invariant { fact: String, msg: String },
    #[error("duplicate fact id {0:?}")]
    DuplicateId(String),
    #[error("batch {0} is empty")]
    EmptyBatch(usize),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// `count` sampled continuations of BOS, each exactly `len` tokens long.
/// `count = 0` gives a single empty prefix.
pub fn make_prefixes(model: &ToyModel, bos: usize, count: usize, len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if count == 0 {
        return Ok(vec![Vec::new()]);
    }
    (0..count)
        .map(|j| {
            let mode = GenerateMode::Temperature { temperature: 1.0, seed: seed.wrapping_add(j as u64) };
            Ok(generate(model, &[bos], len, mode)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToyModelConfig;

    #[test]
    fn prefixes_shape_and_determinism() {
        let m = ToyModel::new(ToyModelConfig { vocab_size: 12, d_model: 8, d_ffn: 8, n_layers: 1, n_heads: 2, max_seq: 10, ..Default::default() })
            .unwrap();
        assert_eq!(make_prefixes(&m, 0, 0, 5, 1).unwrap(), vec![Vec::<usize>::new()]);
        let p = make_prefixes(&m, 0, 4, 5, 1).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|x| x.len() == 5));
        assert_eq!(p, make_prefixes(&m, 0, 4, 5, 1).unwrap());
    }
}
