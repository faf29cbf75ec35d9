use serde::{Deserialize, Serialize};

use super::Result;
use crate::edit::{optimize_residual, CriticalLayers, PreparedFact, ResidualOptConfig};
use crate::linalg::{cosine, spectral_norm, Matrix, Vector};
use crate::model::{forward, next_token_probs, Intervention, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContributionMode {
    /// `m_orig + δ^L / (L - l + 1)`
    Distributed,
    /// `m_orig + δ^l`, with `δ^l` optimized at `l` directly.
    Computed,
}

impl ContributionMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Distributed => "distributed",
            Self::Computed => "computed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionRecord {
    pub fact_id: String,
    pub layer: usize,
    pub mode: ContributionMode,
    pub score: f64,
}

/// Residual vectors optimized directly at every critical layer of an
/// unedited model, with the FFN outputs they are measured against. All
/// profiles are read from one table so that they share the same `δ`s.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTable {
    layers: Vec<usize>,
    fact_ids: Vec<String>,
    /// `deltas[j][i]`: `δ` for fact `i` optimized at `layers[j]`.
    deltas: Vec<Vec<Vector>>,
    /// `memories[j][i]`: `m^l` at the last subject token of the bare prompt.
    memories: Vec<Vec<Vector>>,
}

impl DeltaTable {
    pub fn compute(
        model: &ToyModel,
        facts: &[PreparedFact],
        layers: &CriticalLayers,
        cfg: &ResidualOptConfig,
    ) -> Result<Self> {
        if facts.is_empty() {
            return Err(super::AnalysisError::NoFacts);
        }
        let traces = facts.iter().map(|pf| forward(model, &pf.prompt)).collect::<std::result::Result<Vec<_>, _>>()?;
        let mut deltas = Vec::with_capacity(layers.len());
        let mut memories = Vec::with_capacity(layers.len());
        for &l in layers.layers() {
            deltas.push(
                facts
                    .iter()
                    .map(|pf| Ok(optimize_residual(model, pf, l, cfg)?.delta))
                    .collect::<Result<Vec<_>>>()?,
            );
            memories.push(
                facts.iter().zip(&traces).map(|(pf, t)| t.layers[l].memory[pf.subject_last].clone()).collect(),
            );
        }
        Ok(Self {
            layers: layers.layers().to_vec(),
            fact_ids: facts.iter().map(|pf| pf.id.clone()).collect(),
            deltas,
            memories,
        })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn last(&self) -> usize {
        *self.layers.last().expect("critical layers are non-empty")
    }

    pub fn fact_ids(&self) -> &[String] {
        &self.fact_ids
    }

    /// `δ` for fact `i` optimized at the `j`-th critical layer.
    pub fn delta(&self, j: usize, i: usize) -> &Vector {
        &self.deltas[j][i]
    }

    /// `R^{l*}` for the `j`-th critical layer, one column per fact.
    pub fn residuals(&self, j: usize) -> Result<Matrix> {
        Ok(Matrix::from_columns(&self.deltas[j])?)
    }

    pub fn memory(&self, j: usize, i: usize, mode: ContributionMode) -> Result<Vector> {
        let m = &self.memories[j][i];
        let d = match mode {
            ContributionMode::Computed => self.deltas[j][i].clone(),
            ContributionMode::Distributed => {
                let divisor = (self.last() - self.layers[j] + 1) as f64;
                self.deltas[self.layers.len() - 1][i].scale(1.0 / divisor)
            }
        };
        Ok(m.add(&d)?)
    }
}

/// `P(o* | p)` with the FFN output at the last subject token of block
/// `layer` replaced by `m_new`, minus `P(o* | p)` on the plain model.
pub fn contribution_score(model: &ToyModel, pf: &PreparedFact, layer: usize, m_new: &Vector) -> Result<f64> {
    let plain = next_token_probs(model, &pf.prompt, None)?;
    let iv = Intervention::ReplaceMemory { layer, position: pf.subject_last, memory: m_new.clone() };
    let edited = next_token_probs(model, &pf.prompt, Some(&iv))?;
    Ok(edited.as_slice()[pf.object_new] - plain.as_slice()[pf.object_new])
}

/// One record per fact and layer, ordered by fact id then layer.
pub fn contribution_records(
    model: &ToyModel,
    facts: &[PreparedFact],
    table: &DeltaTable,
    mode: ContributionMode,
) -> Result<Vec<ContributionRecord>> {
    let mut out = Vec::with_capacity(facts.len() * table.layers.len());
    for (i, pf) in facts.iter().enumerate() {
        for (j, &l) in table.layers.iter().enumerate() {
            let score = contribution_score(model, pf, l, &table.memory(j, i, mode)?)?;
            out.push(ContributionRecord { fact_id: pf.id.clone(), layer: l, mode, score });
        }
    }
    out.sort_by(|a, b| a.fact_id.cmp(&b.fact_id).then(a.layer.cmp(&b.layer)));
    Ok(out)
}

fn mean_by_layer(layers: &[usize], values: impl Iterator<Item = (usize, f64)>) -> Vec<(usize, f64)> {
    let mut sums = vec![(0.0, 0usize); layers.len()];
    for (j, v) in values {
        sums[j].0 += v;
        sums[j].1 += 1;
    }
    layers.iter().zip(sums).map(|(&l, (s, n))| (l, s / n.max(1) as f64)).collect()
}

/// Mean contribution score per critical layer.
pub fn contribution_profile(
    model: &ToyModel,
    facts: &[PreparedFact],
    table: &DeltaTable,
    mode: ContributionMode,
) -> Result<Vec<(usize, f64)>> {
    let recs = contribution_records(model, facts, table, mode)?;
    let index = |l: usize| table.layers.iter().position(|&x| x == l).expect("record layer is critical");
    Ok(mean_by_layer(&table.layers, recs.iter().map(|r| (index(r.layer), r.score))))
}

/// Cosine between distributed and directly computed memories, per fact
/// and layer, in table order (layer-major).
pub fn memory_cosines(table: &DeltaTable) -> Result<Vec<(String, usize, f64)>> {
    let mut out = Vec::new();
    for (i, id) in table.fact_ids.iter().enumerate() {
        for (j, &l) in table.layers.iter().enumerate() {
            let dist = table.memory(j, i, ContributionMode::Distributed)?;
            let comp = table.memory(j, i, ContributionMode::Computed)?;
            out.push((id.clone(), l, cosine(&dist, &comp)?));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(out)
}

/// Mean of [`memory_cosines`] per critical layer.
pub fn memory_cosine_profile(table: &DeltaTable) -> Result<Vec<(usize, f64)>> {
    let cos = memory_cosines(table)?;
    let index = |l: usize| table.layers.iter().position(|&x| x == l).expect("critical layer");
    Ok(mean_by_layer(&table.layers, cos.iter().map(|c| (index(c.1), c.2))))
}

/// `|R^{l*} - R^L|_2` per critical layer.
pub fn residual_gap_profile(table: &DeltaTable) -> Result<Vec<(usize, f64)>> {
    let last = table.residuals(table.layers.len() - 1)?;
    table
        .layers
        .iter()
        .enumerate()
        .map(|(j, &l)| Ok((l, spectral_norm(&table.residuals(j)?.sub(&last)?)?)))
        .collect()
}
