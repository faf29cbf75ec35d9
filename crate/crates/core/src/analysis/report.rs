use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    bound_fields, contribution_profile, contribution_records, error_scaling_experiment, fmt_f64,
    memory_cosine_profile, memory_cosines, residual_gap_profile, theorem_bound, write_csv, AnalysisError,
    ContributionMode, DeltaTable, Result, ScalingRow, Sweep, BOUND_COLUMNS,
};
use crate::edit::{collect_keys, q_matrix, CriticalLayers, StrategyRegistry};
use crate::eval::{RunConfig, RunContext};
use crate::linalg::Matrix;

/// Per-layer means written to `profiles.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer: usize,
    pub contribution_distributed: f64,
    pub contribution_computed: f64,
    pub memory_cosine: f64,
    pub residual_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub n_facts: usize,
    pub profiles: Vec<LayerProfile>,
    pub scaling: Vec<ScalingRow>,
}

pub const SCALING_COLUMNS: [&str; 16] = [
    "sweep",
    "value",
    "method",
    "layer",
    "last_layer",
    "term_gap",
    "term_dist",
    "norm_q",
    "q_kind",
    "bound",
    "actual_error",
    "satisfied",
    "prior_cov_norm",
    "efficacy",
    "generalization",
    "specificity",
];

/// Layer profiles, per-layer bounds and the batch-size error-scaling table
/// for the first facts of the run order. Writes `contributions.csv`,
/// `cosines.csv`, `profiles.csv`, `bounds.csv`, `scaling.csv` and
/// `analysis.json` under `dir`.
pub fn run_analysis(ctx: &RunContext, cfg: &RunConfig, dir: &Path) -> Result<AnalysisSummary> {
    cfg.validate()?;
    let layers = CriticalLayers::new(cfg.critical_layers.clone(), ctx.model.n_layers())?;
    let facts = ctx.ordered_facts(cfg.order_seed);
    let needed = cfg.analysis_facts.max(cfg.scaling_values.iter().copied().max().unwrap_or(0));
    if cfg.analysis_facts == 0 || needed > facts.len() {
        return Err(AnalysisError::InsufficientFacts { needed: needed.max(1), available: facts.len() });
    }
    let prepared = ctx.prepare(&facts[..needed], &cfg.residual)?;
    let subset = &prepared[..cfg.analysis_facts];
    let model = &ctx.model;
    let covs = ctx.covariances(&layers, cfg.cov_lambda)?;
    let edit_cfg = cfg.edit_config();
    std::fs::create_dir_all(dir).map_err(|e| AnalysisError::Io { path: dir.to_path_buf(), msg: e.to_string() })?;

    let table = DeltaTable::compute(model, subset, &layers, &cfg.residual)?;
    let mut contrib_rows = Vec::new();
    let mut means = Vec::new();
    for mode in [ContributionMode::Distributed, ContributionMode::Computed] {
        for r in contribution_records(model, subset, &table, mode)? {
            contrib_rows.push(vec![r.fact_id, r.layer.to_string(), mode.name().to_string(), fmt_f64(r.score)]);
        }
        means.push(contribution_profile(model, subset, &table, mode)?);
    }
    contrib_rows.sort_by(|a, b| (&a[0], a[1].parse::<usize>().ok(), &a[2]).cmp(&(&b[0], b[1].parse::<usize>().ok(), &b[2])));
    write_csv(&dir.join("contributions.csv"), &["fact_id", "layer", "mode", "score"], &contrib_rows)?;

    let cos_rows: Vec<Vec<String>> =
        memory_cosines(&table)?.into_iter().map(|(id, l, c)| vec![id, l.to_string(), fmt_f64(c)]).collect();
    write_csv(&dir.join("cosines.csv"), &["fact_id", "layer", "cosine"], &cos_rows)?;

    let cosine = memory_cosine_profile(&table)?;
    let gap = residual_gap_profile(&table)?;
    let profiles: Vec<LayerProfile> = (0..layers.len())
        .map(|j| LayerProfile {
            layer: layers.layers()[j],
            contribution_distributed: means[0][j].1,
            contribution_computed: means[1][j].1,
            memory_cosine: cosine[j].1,
            residual_gap: gap[j].1,
        })
        .collect();
    let profile_rows: Vec<Vec<String>> = profiles
        .iter()
        .map(|p| {
            vec![
                p.layer.to_string(),
                fmt_f64(p.contribution_distributed),
                fmt_f64(p.contribution_computed),
                fmt_f64(p.memory_cosine),
                fmt_f64(p.residual_gap),
            ]
        })
        .collect();
    write_csv(
        &dir.join("profiles.csv"),
        &["layer", "contribution_distributed", "contribution_computed", "memory_cosine", "residual_gap"],
        &profile_rows,
    )?;

    let r_last = table.residuals(layers.len() - 1)?;
    let mut bound_rows = Vec::new();
    for (j, &l) in layers.layers().iter().enumerate() {
        let k1 = collect_keys(model, subset, l)?.keys;
        let c0 = covs.preserved(l)?;
        let q = q_matrix(&k1, c0, &Matrix::zeros(c0.rows(), c0.cols()))?;
        bound_rows.push(bound_fields(&theorem_bound(&table.residuals(j)?, &r_last, l, layers.last(), &q)?));
    }
    write_csv(&dir.join("bounds.csv"), &BOUND_COLUMNS, &bound_rows)?;

    let scaling = if cfg.scaling_values.is_empty() {
        Vec::new()
    } else {
        error_scaling_experiment(
            model,
            &prepared,
            &layers,
            Sweep::BatchSize,
            &cfg.scaling_values,
            &edit_cfg,
            &covs.preserved,
            &StrategyRegistry::default(),
        )?
    };
    let scaling_rows: Vec<Vec<String>> = scaling
        .iter()
        .map(|r| {
            let mut row = vec![r.sweep.clone(), r.value.to_string(), r.method.clone()];
            row.extend(bound_fields(&r.report));
            row.extend([
                fmt_f64(r.prior_cov_norm),
                fmt_f64(r.efficacy),
                fmt_f64(r.generalization),
                fmt_f64(r.specificity),
            ]);
            row
        })
        .collect();
    write_csv(&dir.join("scaling.csv"), &SCALING_COLUMNS, &scaling_rows)?;

    let summary = AnalysisSummary { n_facts: subset.len(), profiles, scaling };
    crate::eval::write_json(&dir.join("analysis.json"), &summary)?;
    Ok(summary)
}
