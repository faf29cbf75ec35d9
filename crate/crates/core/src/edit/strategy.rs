//! Edit strategies behind a common trait, selected by name at runtime.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::residual::{hidden_at, optimize_residual, distribute_residual, ResidualOptConfig};
use super::solve::sequential_delta_with;
use super::{collect_keys, CovarianceCache, CriticalLayers, EditError, PreparedFact, Result, UpdateDelta};
use crate::linalg::{Matrix, Vector};
use crate::model::ToyModel;

/// Extension points around the closed-form solve. Baselines that reshape
/// the covariance or project the update plug in here.
pub trait SolveHooks: Send + Sync {
    /// Called with `C_p + C_0 + K_1 K_1^T` before factorization.
    fn adjust_covariance(&self, _layer: usize, a: Matrix) -> Matrix {
        a
    }

    /// Called with the solved `Δ` before it is applied.
    fn adjust_delta(&self, _layer: usize, delta: Matrix) -> Matrix {
        delta
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHooks;

impl SolveHooks for IdentityHooks {}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub residual: ResidualOptConfig,
    /// Divide the original `R^L` once instead of recomputing the remaining
    /// residual after each layer update (MEMIT only).
    pub static_distribution: bool,
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub model: ToyModel,
    /// In application order.
    pub deltas: Vec<UpdateDelta>,
    /// `K_1` used at each updated layer, for the prior-key cache.
    pub keys: Vec<(usize, Matrix)>,
    /// Residual optimization steps per fact, for each layer where `δ` was optimized.
    pub steps: Vec<(usize, Vec<usize>)>,
    /// `|R^L|_F` when the last-layer targets were fixed.
    pub initial_gap: f64,
    /// `|targets - h^L|_F` on the edited model.
    pub final_gap: f64,
}

impl EditOutcome {
    pub fn touched_layers(&self) -> Vec<usize> {
        self.deltas.iter().map(|d| d.layer).collect()
    }
}

pub trait EditStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the first critical layer is updated from a share of a
    /// residual computed at a later layer.
    fn distributes_residual(&self) -> bool {
        false
    }

    fn edit(
        &self,
        model: &ToyModel,
        batch: &[PreparedFact],
        layers: &CriticalLayers,
        cfg: &EditConfig,
        covs: &CovarianceCache,
        hooks: &dyn SolveHooks,
    ) -> Result<EditOutcome>;
}

/// Name-keyed strategy table.
pub struct StrategyRegistry {
    strategies: BTreeMap<&'static str, Box<dyn EditStrategy>>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = Self { strategies: BTreeMap::new() };
        r.register(Box::new(Memit));
        r.register(Box::new(Blue));
        r
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self { strategies: BTreeMap::new() }
    }

    /// Replaces any strategy already registered under the same name.
    pub fn register(&mut self, s: Box<dyn EditStrategy>) {
        self.strategies.insert(s.name(), s);
    }

    pub fn get(&self, name: &str) -> Result<&dyn EditStrategy> {
        self.strategies.get(name).map(|b| b.as_ref()).ok_or_else(|| EditError::UnknownMethod(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.keys().copied().collect()
    }
}

fn check_batch(batch: &[PreparedFact]) -> Result<()> {
    if batch.is_empty() {
        return Err(EditError::EmptyBatch);
    }
    let mut seen = std::collections::HashSet::new();
    for pf in batch {
        if !seen.insert(&pf.id) {
            return Err(EditError::DuplicateFact(pf.id.clone()));
        }
    }
    Ok(())
}

fn optimize_all(model: &ToyModel, batch: &[PreparedFact], layer: usize, cfg: &ResidualOptConfig) -> Result<(Vec<Vector>, Vec<usize>)> {
    let mut deltas = Vec::with_capacity(batch.len());
    let mut steps = Vec::with_capacity(batch.len());
    for pf in batch {
        let r = optimize_residual(model, pf, layer, cfg)?;
        deltas.push(r.delta);
        steps.push(r.steps_used);
    }
    Ok((deltas, steps))
}

fn hidden_all(model: &ToyModel, batch: &[PreparedFact], layer: usize) -> Result<Vec<Vector>> {
    batch.iter().map(|pf| hidden_at(model, pf, layer)).collect()
}

fn gap(targets: &[Vector], hidden: &[Vector]) -> Result<f64> {
    let mut s = 0.0;
    for (t, h) in targets.iter().zip(hidden) {
        s += t.sub(h)?.norm().powi(2);
    }
    Ok(s.sqrt())
}

fn frob(cols: &[Vector]) -> f64 {
    cols.iter().map(|c| c.norm().powi(2)).sum::<f64>().sqrt()
}

/// One direct update at `layer`: keys from `model`, residual `R = [δ_i]`.
fn direct_update(
    model: &ToyModel,
    batch: &[PreparedFact],
    layer: usize,
    deltas: &[Vector],
    covs: &CovarianceCache,
    hooks: &dyn SolveHooks,
) -> Result<(ToyModel, UpdateDelta, Matrix)> {
    let k1 = collect_keys(model, batch, layer)?.keys;
    let r = Matrix::from_columns(deltas)?;
    let ud = sequential_delta_with(layer, &r, &k1, covs.preserved(layer)?, &covs.prior(layer)?, hooks)?;
    let next = model.apply_weight_delta(layer, &ud.delta)?;
    Ok((next, ud, k1))
}

/// Residual optimized once at `L`, spread over every critical layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct Memit;

impl EditStrategy for Memit {
    fn name(&self) -> &'static str {
        "memit"
    }

    fn distributes_residual(&self) -> bool {
        true
    }

    fn edit(
        &self,
        model: &ToyModel,
        batch: &[PreparedFact],
        layers: &CriticalLayers,
        cfg: &EditConfig,
        covs: &CovarianceCache,
        hooks: &dyn SolveHooks,
    ) -> Result<EditOutcome> {
        check_batch(batch)?;
        let last = layers.last();
        let (deltas, steps) = optimize_all(model, batch, last, &cfg.residual)?;
        let h_orig = hidden_all(model, batch, last)?;
        let targets = h_orig.iter().zip(&deltas).map(|(h, d)| h.add(d)).collect::<std::result::Result<Vec<_>, _>>()?;
        let mut cur = model.clone();
        let mut out_deltas = Vec::new();
        let mut keys = Vec::new();
        for (j, &l) in layers.layers().iter().enumerate() {
            let k1 = collect_keys(&cur, batch, l)?.keys;
            let remaining = if j == 0 || cfg.static_distribution {
                Matrix::from_columns(&deltas)?
            } else {
                let h = hidden_all(&cur, batch, last)?;
                let cols = targets.iter().zip(&h).map(|(t, h)| t.sub(h)).collect::<std::result::Result<Vec<_>, _>>()?;
                Matrix::from_columns(&cols)?
            };
            let r = distribute_residual(&remaining, l, last)?;
            let ud = sequential_delta_with(l, &r, &k1, covs.preserved(l)?, &covs.prior(l)?, hooks)?;
            cur = cur.apply_weight_delta(l, &ud.delta)?;
            out_deltas.push(ud);
            keys.push((l, k1));
        }
        let final_gap = gap(&targets, &hidden_all(&cur, batch, last)?)?;
        Ok(EditOutcome {
            model: cur,
            deltas: out_deltas,
            keys,
            steps: vec![(last, steps)],
            initial_gap: frob(&deltas),
            final_gap,
        })
    }
}

/// Residuals computed directly at the first and last critical layers,
/// which are the only layers updated.
#[derive(Debug, Clone, Copy, Default)]
pub struct Blue;

impl EditStrategy for Blue {
    fn name(&self) -> &'static str {
        "blue"
    }

    fn edit(
        &self,
        model: &ToyModel,
        batch: &[PreparedFact],
        layers: &CriticalLayers,
        cfg: &EditConfig,
        covs: &CovarianceCache,
        hooks: &dyn SolveHooks,
    ) -> Result<EditOutcome> {
        check_batch(batch)?;
        let mut boundary = vec![layers.first()];
        if layers.len() > 1 {
            boundary.push(layers.last());
        }
        let mut cur = model.clone();
        let mut out = EditOutcome {
            model: model.clone(),
            deltas: Vec::new(),
            keys: Vec::new(),
            steps: Vec::new(),
            initial_gap: 0.0,
            final_gap: 0.0,
        };
        let mut targets = Vec::new();
        for &l in &boundary {
            let (deltas, steps) = optimize_all(&cur, batch, l, &cfg.residual)?;
            if l == layers.last() {
                let h = hidden_all(&cur, batch, l)?;
                targets = h.iter().zip(&deltas).map(|(h, d)| h.add(d)).collect::<std::result::Result<Vec<_>, _>>()?;
                out.initial_gap = frob(&deltas);
            }
            let (next, ud, k1) = direct_update(&cur, batch, l, &deltas, covs, hooks)?;
            cur = next;
            out.deltas.push(ud);
            out.keys.push((l, k1));
            out.steps.push((l, steps));
        }
        out.final_gap = gap(&targets, &hidden_all(&cur, batch, layers.last())?)?;
        out.model = cur;
        Ok(out)
    }
}

/// Optimizes and directly applies a residual at each critical layer in
/// ascending order, returning `(layer, mean steps)` for each.
pub fn layer_step_profile(
    model: &ToyModel,
    batch: &[PreparedFact],
    layers: &CriticalLayers,
    cfg: &ResidualOptConfig,
    covs: &CovarianceCache,
) -> Result<Vec<(usize, f64)>> {
    check_batch(batch)?;
    let mut cur = model.clone();
    let mut profile = Vec::new();
    for &l in layers.layers() {
        let (deltas, steps) = optimize_all(&cur, batch, l, cfg)?;
        profile.push((l, steps.iter().sum::<usize>() as f64 / steps.len() as f64));
        cur = direct_update(&cur, batch, l, &deltas, covs, &IdentityHooks)?.0;
    }
    Ok(profile)
}
