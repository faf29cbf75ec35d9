//! Layer-wise diagnostics of residual distribution: simulated-edit
//! contribution scores, memory cosines, residual gaps, weight-shift error
//! bounds and error scaling.
//!
//! CSV output uses a header row, 9 significant digits for floats and rows
//! ordered by fact id, then layer.

mod bounds;
mod profiles;
mod report;
mod scaling;

pub use bounds::{lemma_bound, theorem_bound, BoundReport};
pub use profiles::{
    contribution_profile, contribution_records, contribution_score, memory_cosine_profile, memory_cosines,
    residual_gap_profile, ContributionMode, ContributionRecord, DeltaTable,
};
pub use report::{run_analysis, AnalysisSummary, LayerProfile, SCALING_COLUMNS};
pub use scaling::{error_scaling_experiment, ScalingRow, Sweep};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::linalg::LinalgError;
use crate::model::{forward, ModelError, ToyModel};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no facts to analyze")]
    NoFacts,
    #[error("layer {layer} is above the last layer {last}")]
    LayerOrder { layer: usize, last: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need {needed} facts, only {available} available")]
    InsufficientFacts { needed: usize, available: usize },
    #[error("{0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Edit(#[from] crate::edit::EditError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

impl From<AnalysisError> for crate::eval::EvalError {
    fn from(e: AnalysisError) -> Self {
        Box::new(e).into()
    }
}

/// Float format shared by every CSV this crate writes.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.8e}")
}

/// Writes `header` and `rows` to `path` atomically.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let io = |e: &dyn std::fmt::Display| AnalysisError::Io { path: path.to_path_buf(), msg: e.to_string() };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| io(&e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io(&e))?;
    }
    let bytes = w.into_inner().map_err(|e| io(&e))?;
    crate::checkpoint::write_atomic(path, &bytes).map_err(|e| io(&e))
}

pub const BOUND_COLUMNS: [&str; 9] =
    ["layer", "last_layer", "term_gap", "term_dist", "norm_q", "q_kind", "bound", "actual_error", "satisfied"];

/// A [`BoundReport`] as CSV fields in [`BOUND_COLUMNS`] order.
pub fn bound_fields(r: &BoundReport) -> Vec<String> {
    vec![
        r.layer.to_string(),
        r.last_layer.to_string(),
        fmt_f64(r.term_gap),
        fmt_f64(r.term_dist),
        fmt_f64(r.norm_q),
        match r.q_kind {
            crate::edit::QKind::Q => "q".into(),
            crate::edit::QKind::QPrime => "q_prime".into(),
        },
        fmt_f64(r.bound),
        fmt_f64(r.actual_error),
        r.satisfied.to_string(),
    ]
}

/// Writes `h^layer` at the final position of each prompt, one row per
/// prompt: `id, h0, ..., h{d-1}`. Returns the number of rows.
pub fn hidden_state_dump(model: &ToyModel, prompts: &[(String, Vec<usize>)], layer: usize, path: &Path) -> Result<usize> {
    if prompts.is_empty() {
        return Err(AnalysisError::NoFacts);
    }
    let d = model.config().d_model;
    let mut header = vec!["id".to_string()];
    header.extend((0..d).map(|i| format!("h{i}")));
    let mut rows = Vec::with_capacity(prompts.len());
    for (id, tokens) in prompts {
        let trace = forward(model, tokens)?;
        let h = trace
            .layers
            .get(layer)
            .ok_or(ModelError::IndexOutOfRange { what: "layer", index: layer, bound: model.n_layers() })?
            .h_out
            .last()
            .ok_or(ModelError::EmptyInput)?;
        let mut row = vec![id.clone()];
        row.extend(h.as_slice().iter().map(|&x| fmt_f64(x)));
        rows.push(row);
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, &header, &rows)?;
    Ok(rows.len())
}
