//! Key/value collection, residual optimization, closed-form weight shifts
//! and the multi-layer edit strategies.

mod cov;
mod prepare;
mod residual;
mod solve;
mod strategy;

pub use cov::{collect_key, collect_keys, estimate_preserved_cov, estimate_preserved_covs, CovarianceCache};
pub use prepare::{prepare_batch, PreparedFact};
pub use residual::{
    distribute_residual, hidden_at, optimize_residual, target_memories, ResidualOpt, ResidualOptConfig,
};
pub use solve::{closed_form_delta, q_matrix, sequential_delta, update_prior_cov};
pub use strategy::{
    layer_step_profile, Blue, EditConfig, EditOutcome, EditStrategy, IdentityHooks, Memit, SolveHooks,
    StrategyRegistry,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::linalg::{LinalgError, Matrix};
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum EditError {
    #[error("invalid critical layers: {0}")]
    InvalidLayers(String),
    #[error("empty edit batch")]
    EmptyBatch,
    #[error("duplicate fact id {0:?} in batch")]
    DuplicateFact(String),
    #[error("{what}: expected {expected}, found {found}")]
    CountMismatch { what: &'static str, expected: usize, found: usize },
    #[error("residual layer {layer} is above the last critical layer {last}")]
    LayerAboveLast { layer: usize, last: usize },
    #[error("fact {fact}: non-finite residual loss at step {step}")]
    NonFiniteLoss { fact: String, step: usize },
    #[error("invalid residual optimizer config: {0}")]
    InvalidConfig(String),
    #[error("no preserved covariance for layer {0}")]
    MissingCovariance(usize),
    #[error("empty sample set for covariance estimation")]
    EmptySamples,
    #[error("unknown edit method {0:?}")]
    UnknownMethod(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

pub type Result<T> = std::result::Result<T, EditError>;

/// Layers designated for weight updates, sorted and distinct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticalLayers {
    layers: Vec<usize>,
}

impl CriticalLayers {
    pub fn new(layers: Vec<usize>, n_layers: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(EditError::InvalidLayers("at least one layer is required".into()));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EditError::InvalidLayers(format!("{layers:?} is not strictly increasing")));
        }
        if let Some(&l) = layers.iter().find(|&&l| l >= n_layers) {
            return Err(EditError::InvalidLayers(format!("layer {l} exceeds model depth {n_layers}")));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn first(&self) -> usize {
        self.layers[0]
    }

    /// `L`, where residuals are optimized.
    pub fn last(&self) -> usize {
        *self.layers.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyRole {
    New,
    PreservedCov,
    PriorCov,
}

/// Keys (`K_1`, one column per fact) or a covariance form of keys.
#[derive(Debug, Clone, PartialEq)]
pub struct KeySet {
    pub layer: usize,
    pub keys: Matrix,
    pub role: KeyRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ComputedAt(usize),
    DistributedFrom { layer: usize, divisor: usize },
    ComputedDirect(usize),
}

/// `R^l`, one column per fact.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub layer: usize,
    pub residuals: Matrix,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QKind {
    /// `K_1^T (C_0 + K_1 K_1^T)^{-1}`
    Q,
    /// `K_1^T (C_p + C_0 + K_1 K_1^T)^{-1}`
    QPrime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaDiagnostics {
    pub norm_r: f64,
    pub norm_q: f64,
    pub q_used: QKind,
}

/// A weight shift for `W_out` of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDelta {
    pub layer: usize,
    pub delta: Matrix,
    pub diagnostics: DeltaDiagnostics,
    /// `Q` or `Q'`, kept for bound evaluation.
    pub q: Matrix,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn critical_layers_validation() {
        let c = CriticalLayers::new(vec![1, 2, 4], 6).unwrap();
        assert_eq!((c.first(), c.last(), c.len()), (1, 4, 3));
        assert!(CriticalLayers::new(vec![], 6).is_err());
        assert!(CriticalLayers::new(vec![2, 2], 6).is_err());
        assert!(CriticalLayers::new(vec![3, 1], 6).is_err());
        assert!(CriticalLayers::new(vec![6], 6).is_err());
    }
}
