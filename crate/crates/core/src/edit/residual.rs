use serde::{Deserialize, Serialize};

use super::cov::context_mean;
use super::{EditError, PreparedFact, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{DeltaObjective, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualOptConfig {
    pub max_steps: usize,
    pub lr: f64,
    pub loss_threshold: f64,
    /// Cap on `|δ| / |h|`.
    pub clamp_ratio: f64,
    pub n_prefixes: usize,
    pub prefix_len: usize,
    pub seed: u64,
}

impl Default for ResidualOptConfig {
    fn default() -> Self {
        Self { max_steps: 25, lr: 0.5, loss_threshold: 0.05, clamp_ratio: 4.0, n_prefixes: 4, prefix_len: 5, seed: 0 }
    }
}

impl ResidualOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(EditError::InvalidConfig("max_steps must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.loss_threshold > 0.0 && self.clamp_ratio > 0.0) {
            return Err(EditError::InvalidConfig("lr, loss_threshold and clamp_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualOpt {
    pub delta: Vector,
    pub steps_used: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Gradient descent on the mean NLL of `o*` over the fact's contexts, with
/// `δ` added to the residual stream after block `layer` at the subject.
pub fn optimize_residual(
    model: &ToyModel,
    pf: &PreparedFact,
    layer: usize,
    cfg: &ResidualOptConfig,
) -> Result<ResidualOpt> {
    cfg.validate()?;
    let obj = DeltaObjective::new(model, layer, &pf.contexts, pf.object_new)?;
    let h_norm = obj.hidden_states()[0].norm();
    let cap = cfg.clamp_ratio * h_norm;
    let d = model.config().d_model;
    let mut delta = vec![0.0; d];
    let mut steps = 0;
    let mut initial = None;
    loop {
        let (loss, grad) = obj
            .loss_and_grad(&Vector::new(delta.clone()).map_err(|_| EditError::NonFiniteLoss { fact: pf.id.clone(), step: steps })?)
            .map_err(|_| EditError::NonFiniteLoss { fact: pf.id.clone(), step: steps })?;
        initial.get_or_insert(loss);
        if loss < cfg.loss_threshold || steps == cfg.max_steps {
            return Ok(ResidualOpt {
                delta: Vector::new(delta).map_err(|_| EditError::NonFiniteLoss { fact: pf.id.clone(), step: steps })?,
                steps_used: steps,
                initial_loss: initial.unwrap(),
                final_loss: loss,
            });
        }
        for (x, g) in delta.iter_mut().zip(grad.as_slice()) {
            *x -= cfg.lr * g;
        }
        let n = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > cap {
            let s = cap / n;
            delta.iter_mut().for_each(|x| *x *= s);
        }
        steps += 1;
    }
}

/// Residual stream `h^layer` at the subject, averaged over contexts.
pub fn hidden_at(model: &ToyModel, pf: &PreparedFact, layer: usize) -> Result<Vector> {
    model.check_layer(layer)?;
    let d = model.config().d_model;
    Ok(context_mean(model, pf, d, |p, pos| p.layers[layer].h_out[pos * d..(pos + 1) * d].to_vec()))
}

/// `(K_1, M_1)` with `m_i = W k_i + δ_i`.
pub fn target_memories(
    model: &ToyModel,
    facts: &[PreparedFact],
    layer: usize,
    deltas: &[Vector],
) -> Result<(Matrix, Matrix)> {
    if deltas.len() != facts.len() {
        return Err(EditError::CountMismatch { what: "residual vectors", expected: facts.len(), found: deltas.len() });
    }
    let k1 = super::collect_keys(model, facts, layer)?.keys;
    let w = model.memory_weight(layer)?;
    let cols = (0..facts.len())
        .map(|i| Ok(w.matvec(&k1.column(i))?.add(&deltas[i])?))
        .collect::<Result<Vec<_>>>()?;
    Ok((k1, Matrix::from_columns(&cols)?))
}

/// `R^l = R^L / (L - l + 1)`
pub fn distribute_residual(r_last: &Matrix, l: usize, last: usize) -> Result<Matrix> {
    if l > last {
        return Err(EditError::LayerAboveLast { layer: l, last });
    }
    Ok(r_last.scale(1.0 / (last - l + 1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_divisor() {
        let r = Matrix::new(1, 1, vec![10.0]).unwrap();
        assert_eq!(distribute_residual(&r, 4, 8).unwrap().get(0, 0), 2.0);
        assert_eq!(distribute_residual(&r, 8, 8).unwrap(), r);
        assert!(distribute_residual(&Matrix::zeros(2, 3), 1, 5).unwrap().is_zero());
        assert!(distribute_residual(&r, 9, 8).is_err());
    }
}
