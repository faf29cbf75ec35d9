//! Generation-based metrics: n-gram entropy and TF-IDF similarity.

use std::collections::HashMap;
use std::hash::Hash;

use crate::corpus::Tokenizer;
use crate::edit::PreparedFact;
use crate::model::{generate, GenerateMode, ToyModel};

use super::{EvalConfig, EvalError, Result};

/// Shannon entropy (bits) of the n-gram frequency distribution of `seq`.
pub fn ngram_entropy<T: Eq + Hash>(seq: &[T], n: usize) -> f64 {
    if n == 0 || seq.len() < n {
        return 0.0;
    }
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    for w in seq.windows(n) {
        *counts.entry(w).or_default() += 1;
    }
    let total = (seq.len() - n + 1) as f64;
    let mut h = 0.0;
    // Sum in a fixed order so the result does not depend on hash iteration.
    let mut freqs: Vec<usize> = counts.into_values().collect();
    freqs.sort_unstable();
    for c in freqs {
        let f = c as f64 / total;
        h -= f * f.log2();
    }
    h
}

/// `w2 * H_2 + w3 * H_3` of one token sequence.
pub fn fluency_of(seq: &[usize], bigram_weight: f64, trigram_weight: f64) -> f64 {
    bigram_weight * ngram_entropy(seq, 2) + trigram_weight * ngram_entropy(seq, 3)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextScore {
    pub score: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

fn sample(model: &ToyModel, prompt: &[usize], i: usize, n_new: usize, cfg: &EvalConfig) -> Result<Vec<usize>> {
    let seed = cfg.seed.wrapping_add(i as u64);
    let n_new = n_new.min(model.config().max_seq.saturating_sub(prompt.len()));
    Ok(generate(model, prompt, n_new, GenerateMode::Temperature { temperature: cfg.temperature, seed })?)
}

/// Mean n-gram entropy score over sampled continuations of `prompts`.
/// Continuations shorter than three tokens are skipped and counted.
pub fn fluency(model: &ToyModel, prompts: &[Vec<usize>], cfg: &EvalConfig) -> Result<TextScore> {
    if prompts.is_empty() {
        return Err(EvalError::NoFacts);
    }
    let (mut total, mut evaluated, mut skipped) = (0.0, 0, 0);
    for (i, p) in prompts.iter().enumerate() {
        let g = sample(model, p, i, cfg.fluency_tokens, cfg)?;
        if g.len() < 3 {
            skipped += 1;
            continue;
        }
        total += fluency_of(&g, cfg.bigram_weight, cfg.trigram_weight);
        evaluated += 1;
    }
    Ok(TextScore { score: if evaluated == 0 { 0.0 } else { total / evaluated as f64 }, evaluated, skipped })
}

/// Smoothed inverse document frequencies over a document collection:
/// `idf(t) = ln((1 + N) / (1 + df(t))) + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TfIdf {
    idf: HashMap<String, f64>,
    unseen: f64,
}

impl TfIdf {
    pub fn new<S: AsRef<str>>(documents: &[S]) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        for d in documents {
            let mut terms: Vec<&str> = d.as_ref().split_whitespace().collect();
            terms.sort_unstable();
            terms.dedup();
            for t in terms {
                *df.entry(t.to_string()).or_default() += 1;
            }
        }
        let n = documents.len() as f64;
        let idf = df.into_iter().map(|(t, c)| (t, ((1.0 + n) / (1.0 + c as f64)).ln() + 1.0)).collect();
        Self { idf, unseen: (1.0 + n).ln() + 1.0 }
    }

    pub fn idf(&self, term: &str) -> f64 {
        self.idf.get(term).copied().unwrap_or(self.unseen)
    }

    fn vector<'a>(&self, terms: &[&'a str]) -> Vec<(&'a str, f64)> {
        let mut tf: HashMap<&str, usize> = HashMap::new();
        for t in terms {
            *tf.entry(t).or_default() += 1;
        }
        let mut v: Vec<(&str, f64)> = tf.into_iter().map(|(t, c)| (t, c as f64 * self.idf(t))).collect();
        v.sort_unstable_by(|a, b| a.0.cmp(b.0));
        v
    }

    /// Cosine between the TF-IDF vectors of two whitespace-tokenized
    /// texts; 0 when either is empty.
    pub fn cosine(&self, a: &str, b: &str) -> f64 {
        let a: Vec<&str> = a.split_whitespace().collect();
        let b: Vec<&str> = b.split_whitespace().collect();
        let (va, vb) = (self.vector(&a), self.vector(&b));
        let norm = |v: &[(&str, f64)]| v.iter().map(|x| x.1 * x.1).sum::<f64>().sqrt();
        let (na, nb) = (norm(&va), norm(&vb));
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let wb: HashMap<&str, f64> = vb.into_iter().collect();
        let dot: f64 = va.iter().map(|(t, x)| x * wb.get(t).copied().unwrap_or(0.0)).sum();
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

/// Mean TF-IDF cosine between each fact's sampled continuation of its
/// prompt and its reference text. Empty continuations are skipped.
pub fn consistency(
    model: &ToyModel,
    tok: &Tokenizer,
    facts: &[PreparedFact],
    references: &[String],
    tfidf: &TfIdf,
    cfg: &EvalConfig,
) -> Result<TextScore> {
    if facts.is_empty() {
        return Err(EvalError::NoFacts);
    }
    if references.len() != facts.len() {
        return Err(EvalError::CountMismatch { expected: facts.len(), found: references.len() });
    }
    let (mut total, mut evaluated, mut skipped) = (0.0, 0, 0);
    for (i, (pf, reference)) in facts.iter().zip(references).enumerate() {
        if reference.trim().is_empty() {
            return Err(EvalError::EmptyReference(pf.id.clone()));
        }
        let g: Vec<usize> = sample(model, &pf.prompt, i, cfg.consistency_tokens, cfg)?
            .into_iter()
            .filter(|&t| t != tok.bos())
            .collect();
        if g.is_empty() {
            skipped += 1;
            continue;
        }
        total += tfidf.cosine(&tok.detokenize(&g), reference);
        evaluated += 1;
    }
    Ok(TextScore { score: if evaluated == 0 { 0.0 } else { total / evaluated as f64 }, evaluated, skipped })
}
