use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{lemma_bound, theorem_bound, AnalysisError, BoundReport, Result};
use crate::edit::{
    collect_keys, optimize_residual, q_matrix, CovarianceCache, CriticalLayers, EditConfig, IdentityHooks,
    PreparedFact, StrategyRegistry,
};
use crate::eval::{efficacy, generalization, specificity};
use crate::linalg::{spectral_norm, Matrix};
use crate::model::ToyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// One batch of the first `value` facts.
    BatchSize,
    /// `value` consecutive batches of `batch_size` facts.
    SeqLength { batch_size: usize },
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Self::BatchSize => "batch_size",
            Self::SeqLength { .. } => "seq_length",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub sweep: String,
    pub value: usize,
    pub method: String,
    /// Bound at the first critical layer for the last batch applied.
    pub report: BoundReport,
    /// `|C_p|_2` at the first critical layer after the run.
    pub prior_cov_norm: f64,
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
}

/// Bound terms for a batch about to be applied to `model`: `R^{l*}` is
/// optimized at the first critical layer, `R^L` at the last. A strategy
/// that solves the first layer from its own residual has no distribution
/// error there, which is reported as the degenerate `l = L` case.
fn first_layer_bound(
    model: &ToyModel,
    batch: &[PreparedFact],
    layers: &CriticalLayers,
    cfg: &EditConfig,
    covs: &CovarianceCache,
    distributes: bool,
) -> Result<BoundReport> {
    let (first, last) = (layers.first(), layers.last());
    let opt = |l: usize| -> Result<Matrix> {
        let cols = batch
            .iter()
            .map(|pf| Ok(optimize_residual(model, pf, l, &cfg.residual)?.delta))
            .collect::<Result<Vec<_>>>()?;
        Ok(Matrix::from_columns(&cols)?)
    };
    let r_star = opt(first)?;
    let k1 = collect_keys(model, batch, first)?.keys;
    let cp = covs.prior(first)?;
    let q = q_matrix(&k1, covs.preserved(first)?, &cp)?;
    let sequential = !cp.is_zero();
    let (r_last, l, big_l) = if distributes { (opt(last)?, first, last) } else { (r_star.clone(), first, first) };
    if sequential {
        lemma_bound(&r_star, &r_last, l, big_l, &q)
    } else {
        theorem_bound(&r_star, &r_last, l, big_l, &q)
    }
}

/// Runs every registered method on fresh copies of `model` for each sweep
/// value. Rows are ordered by value, then method name.
#[allow(clippy::too_many_arguments)]
pub fn error_scaling_experiment(
    model: &ToyModel,
    facts: &[PreparedFact],
    layers: &CriticalLayers,
    sweep: Sweep,
    values: &[usize],
    cfg: &EditConfig,
    preserved: &BTreeMap<usize, Matrix>,
    registry: &StrategyRegistry,
) -> Result<Vec<ScalingRow>> {
    let per_value = |v: usize| match sweep {
        Sweep::BatchSize => (v, 1),
        Sweep::SeqLength { batch_size } => (batch_size, v),
    };
    for &v in values {
        let (bs, n) = per_value(v);
        if bs == 0 || n == 0 {
            return Err(AnalysisError::Config(format!("sweep value {v} gives an empty run")));
        }
        if bs * n > facts.len() {
            return Err(AnalysisError::InsufficientFacts { needed: bs * n, available: facts.len() });
        }
    }
    let mut rows = Vec::with_capacity(values.len() * registry.names().len());
    for &v in values {
        let (bs, n) = per_value(v);
        for name in registry.names() {
            let strategy = registry.get(name)?;
            let mut cur = model.clone();
            let mut covs = CovarianceCache::new(preserved.clone());
            let mut report = None;
            for batch in facts.chunks(bs).take(n) {
                let distributes = strategy.distributes_residual() && layers.len() > 1;
                report = Some(first_layer_bound(&cur, batch, layers, cfg, &covs, distributes)?);
                let out = strategy.edit(&cur, batch, layers, cfg, &covs, &IdentityHooks)?;
                for (l, k1) in &out.keys {
                    covs.record_keys(*l, k1)?;
                }
                cur = out.model;
            }
            let edited = &facts[..bs * n];
            rows.push(ScalingRow {
                sweep: sweep.name().to_string(),
                value: v,
                method: name.to_string(),
                report: report.expect("at least one batch"),
                prior_cov_norm: spectral_norm(&covs.prior(layers.first())?)?,
                efficacy: efficacy(&cur, edited)?,
                generalization: generalization(&cur, edited)?.0,
                specificity: specificity(&cur, edited)?.0,
            });
        }
    }
    Ok(rows)
}
