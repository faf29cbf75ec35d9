use std::collections::HashSet;

use super::{EditError, Result};
use crate::corpus::{encode_prompt, encode_text, make_prefixes, object_token, Fact, Tokenizer};
use crate::model::{ModelError, ToyModel};

/// A fact encoded against a tokenizer, with the contexts used for key
/// collection and residual optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedFact {
    pub id: String,
    /// `BOS + prompt`.
    pub prompt: Vec<usize>,
    /// Index of the last subject token in `prompt`.
    pub subject_last: usize,
    /// `(tokens, subject position)`; the bare prompt first, then one entry
    /// per non-empty prefix.
    pub contexts: Vec<(Vec<usize>, usize)>,
    pub paraphrases: Vec<Vec<usize>>,
    /// `(tokens, expected object)`
    pub neighborhood: Vec<(Vec<usize>, usize)>,
    pub object_true: usize,
    pub object_new: usize,
}

impl PreparedFact {
    pub fn new(tok: &Tokenizer, fact: &Fact, prefixes: &[Vec<usize>], max_seq: usize) -> Result<Self> {
        fact.validate()?;
        let p = encode_prompt(tok, &fact.id, &fact.prompt, &fact.subject)?;
        let mut contexts = vec![(p.tokens.clone(), p.subject_last)];
        for prefix in prefixes.iter().filter(|x| !x.is_empty()) {
            let mut t = vec![tok.bos()];
            t.extend_from_slice(prefix);
            t.extend_from_slice(&p.tokens[1..]);
            contexts.push((t, p.subject_last + prefix.len()));
        }
        let paraphrases = fact
            .paraphrases
            .iter()
            .map(|t| Ok(encode_prompt(tok, &fact.id, t, &fact.subject)?.tokens))
            .collect::<Result<Vec<_>>>()?;
        let neighborhood = fact
            .neighborhood
            .iter()
            .map(|n| Ok((encode_text(tok, &n.prompt)?, object_token(tok, &n.expected_object)?)))
            .collect::<Result<Vec<_>>>()?;
        let longest = contexts
            .iter()
            .map(|c| c.0.len())
            .chain(paraphrases.iter().map(Vec::len))
            .chain(neighborhood.iter().map(|n| n.0.len()))
            .max()
            .unwrap_or(0);
        if longest > max_seq {
            return Err(ModelError::SequenceTooLong { len: longest, max: max_seq }.into());
        }
        Ok(Self {
            id: fact.id.clone(),
            prompt: p.tokens,
            subject_last: p.subject_last,
            contexts,
            paraphrases,
            neighborhood,
            object_true: object_token(tok, &fact.object_true)?,
            object_new: object_token(tok, &fact.object_new)?,
        })
    }
}

/// Encodes a batch, sampling `n_prefixes` prefixes of `prefix_len` tokens
/// from `model`. Rejects empty batches and duplicate ids before any work.
pub fn prepare_batch(
    model: &ToyModel,
    tok: &Tokenizer,
    facts: &[Fact],
    n_prefixes: usize,
    prefix_len: usize,
    seed: u64,
) -> Result<Vec<PreparedFact>> {
    if facts.is_empty() {
        return Err(EditError::EmptyBatch);
    }
    let mut seen = HashSet::new();
    for f in facts {
        if !seen.insert(&f.id) {
            return Err(EditError::DuplicateFact(f.id.clone()));
        }
    }
    let prefixes = if prefix_len == 0 { vec![Vec::new()] } else { make_prefixes(model, tok.bos(), n_prefixes, prefix_len, seed)? };
    facts.iter().map(|f| PreparedFact::new(tok, f, &prefixes, model.config().max_seq)).collect()
}
