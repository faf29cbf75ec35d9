use crate::edit::PreparedFact;
use crate::model::{next_token_probs, ToyModel};

use super::{EvalError, Result};

fn prefers(model: &ToyModel, tokens: &[usize], winner: usize, loser: usize) -> Result<bool> {
    let p = next_token_probs(model, tokens, None)?;
    let p = p.as_slice();
    Ok(p[winner] > p[loser])
}

/// Fraction of facts whose prompt gives `P(o*) > P(o)`; ties fail.
pub fn efficacy(model: &ToyModel, facts: &[PreparedFact]) -> Result<f64> {
    if facts.is_empty() {
        return Err(EvalError::NoFacts);
    }
    let mut hits = 0;
    for pf in facts {
        if prefers(model, &pf.prompt, pf.object_new, pf.object_true)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / facts.len() as f64)
}

/// Per-fact paraphrase success rate, averaged over facts that have
/// paraphrases. Returns the score and the number of evaluable facts; with
/// no evaluable facts the score is 0.
pub fn generalization(model: &ToyModel, facts: &[PreparedFact]) -> Result<(f64, usize)> {
    if facts.is_empty() {
        return Err(EvalError::NoFacts);
    }
    let mut total = 0.0;
    let mut evaluable = 0;
    for pf in facts.iter().filter(|pf| !pf.paraphrases.is_empty()) {
        let mut hits = 0;
        for p in &pf.paraphrases {
            if prefers(model, p, pf.object_new, pf.object_true)? {
                hits += 1;
            }
        }
        total += hits as f64 / pf.paraphrases.len() as f64;
        evaluable += 1;
    }
    Ok((if evaluable == 0 { 0.0 } else { total / evaluable as f64 }, evaluable))
}

/// Fraction of neighborhood prompts where the expected object still beats
/// `o*`. Returns the score and the number of prompts.
pub fn specificity(model: &ToyModel, facts: &[PreparedFact]) -> Result<(f64, usize)> {
    if facts.is_empty() {
        return Err(EvalError::NoFacts);
    }
    let mut hits = 0;
    let mut n = 0;
    for pf in facts {
        for (tokens, expected) in &pf.neighborhood {
            if prefers(model, tokens, *expected, pf.object_new)? {
                hits += 1;
            }
            n += 1;
        }
    }
    Ok((if n == 0 { 0.0 } else { hits as f64 / n as f64 }, n))
}
