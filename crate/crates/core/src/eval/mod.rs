//! Edit metrics and the sequential editing protocol.

mod metrics;
mod run;
mod text;

pub use metrics::{efficacy, generalization, specificity};
pub use run::{
    run_sequential, run_sequential_in_memory, write_outputs, BatchRecord, RunConfig, RunContext, RunOutput, RunSummary,
    REPORT_COLUMNS,
};
pub(crate) use run::write_json;
pub use text::{consistency, fluency, fluency_of, ngram_entropy, TextScore, TfIdf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Tokenizer;
use crate::edit::PreparedFact;
use crate::model::ToyModel;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no facts to evaluate")]
    NoFacts,
    #[error("expected {expected} reference texts, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("fact {0}: empty reference text")]
    EmptyReference(String),
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Io { path: std::path::PathBuf, msg: String },
    #[error("batch {batch}: {source}")]
    Batch {
        batch: usize,
        #[source]
        source: Box<EvalError>,
        /// Everything recorded before the failure.
        summary: Box<RunSummary>,
    },
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Edit(#[from] crate::edit::EditError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Analysis(#[from] Box<crate::analysis::AnalysisError>),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Generation settings for fluency and consistency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fluency_tokens: usize,
    pub consistency_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    pub bigram_weight: f64,
    pub trigram_weight: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fluency_tokens: 12,
            consistency_tokens: 12,
            temperature: 1.0,
            seed: 0,
            bigram_weight: 1.0 / 3.0,
            trigram_weight: 2.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub fluency: f64,
    pub consistency: f64,
    pub n_facts: usize,
    pub model_version: u64,
    /// Facts with at least one paraphrase.
    pub n_generalization_facts: usize,
    pub n_neighborhood_prompts: usize,
    pub n_fluency_skipped: usize,
    pub n_consistency_skipped: usize,
}

/// All five metrics on `facts`; `references[i]` belongs to `facts[i]`.
pub fn evaluate(
    model: &ToyModel,
    tok: &Tokenizer,
    facts: &[PreparedFact],
    references: &[String],
    tfidf: &TfIdf,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let eff = efficacy(model, facts)?;
    let (gen, n_gen) = generalization(model, facts)?;
    let (spec, n_spec) = specificity(model, facts)?;
    let prompts: Vec<Vec<usize>> = facts.iter().map(|pf| pf.prompt.clone()).collect();
    let flu = fluency(model, &prompts, cfg)?;
    let con = consistency(model, tok, facts, references, tfidf, cfg)?;
    Ok(EvalReport {
        efficacy: eff,
        generalization: gen,
        specificity: spec,
        fluency: flu.score,
        consistency: con.score,
        n_facts: facts.len(),
        model_version: model.version(),
        n_generalization_facts: n_gen,
        n_neighborhood_prompts: n_spec,
        n_fluency_skipped: flu.skipped,
        n_consistency_skipped: con.skipped,
    })
}
