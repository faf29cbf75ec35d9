use std::collections::BTreeMap;
use std::path::Path;

use super::{EditError, KeyRole, KeySet, PreparedFact, Result};
use crate::checkpoint::TensorFile;
use crate::linalg::{kernels, Matrix, Vector};
use crate::model::ToyModel;

/// Mean of `f(layer activations, position)` over a fact's contexts.
pub(crate) fn context_mean(
    model: &ToyModel,
    pf: &PreparedFact,
    width: usize,
    mut pick: impl FnMut(&crate::model::forward::Pass, usize) -> Vec<f64>,
) -> Vector {
    let mut acc = vec![0.0; width];
    for (tokens, pos) in &pf.contexts {
        let pass = model.run(tokens, None, tokens.len() - 1);
        kernels::axpy(1.0, &pick(&pass, *pos), &mut acc);
    }
    let n = pf.contexts.len() as f64;
    Vector::from_raw(acc.into_iter().map(|x| x / n).collect())
}

/// FFN key at the last subject token, averaged over the fact's contexts.
pub fn collect_key(model: &ToyModel, pf: &PreparedFact, layer: usize) -> Result<Vector> {
    model.check_layer(layer)?;
    let f = model.config().d_ffn;
    Ok(context_mean(model, pf, f, |p, pos| p.layers[layer].key[pos * f..(pos + 1) * f].to_vec()))
}

/// `K_1` for a batch: one column per fact.
pub fn collect_keys(model: &ToyModel, facts: &[PreparedFact], layer: usize) -> Result<KeySet> {
    let cols = facts.iter().map(|pf| collect_key(model, pf, layer)).collect::<Result<Vec<_>>>()?;
    Ok(KeySet { layer, keys: Matrix::from_columns(&cols)?, role: KeyRole::New })
}

/// `lambda * sum k k^T` over every position of every sample.
pub fn estimate_preserved_cov(model: &ToyModel, samples: &[Vec<usize>], layer: usize, lambda: f64) -> Result<Matrix> {
    Ok(estimate_preserved_covs(model, samples, &[layer], lambda)?.remove(&layer).expect("requested layer"))
}

/// [`estimate_preserved_cov`] for several layers from one pass per sample.
pub fn estimate_preserved_covs(
    model: &ToyModel,
    samples: &[Vec<usize>],
    layers: &[usize],
    lambda: f64,
) -> Result<BTreeMap<usize, Matrix>> {
    if samples.is_empty() {
        return Err(EditError::EmptySamples);
    }
    for &l in layers {
        model.check_layer(l)?;
    }
    let f = model.config().d_ffn;
    let mut acc: BTreeMap<usize, Vec<f64>> = layers.iter().map(|&l| (l, vec![0.0; f * f])).collect();
    for s in samples {
        model.check_tokens(s)?;
        let pass = model.run(s, None, s.len() - 1);
        for (&l, out) in acc.iter_mut() {
            kernels::matmul_transa_acc(&pass.layers[l].key, &pass.layers[l].key, s.len(), f, f, out);
        }
    }
    acc.into_iter()
        .map(|(l, data)| Ok((l, Matrix::new(f, f, data.into_iter().map(|x| x * lambda).collect())?)))
        .collect()
}

/// Per-layer `C_0` and accumulated `C_p`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovarianceCache {
    pub preserved: BTreeMap<usize, Matrix>,
    pub prior: BTreeMap<usize, Matrix>,
}

impl CovarianceCache {
    pub fn new(preserved: BTreeMap<usize, Matrix>) -> Self {
        Self { preserved, prior: BTreeMap::new() }
    }

    pub fn preserved(&self, layer: usize) -> Result<&Matrix> {
        self.preserved.get(&layer).ok_or(EditError::MissingCovariance(layer))
    }

    /// `C_p` for `layer`, zero if nothing was edited there yet.
    pub fn prior(&self, layer: usize) -> Result<Matrix> {
        let c0 = self.preserved(layer)?;
        Ok(self.prior.get(&layer).cloned().unwrap_or_else(|| Matrix::zeros(c0.rows(), c0.cols())))
    }

    pub fn record_keys(&mut self, layer: usize, k1: &Matrix) -> Result<()> {
        let next = super::update_prior_cov(&self.prior(layer)?, k1)?;
        self.prior.insert(layer, next);
        Ok(())
    }

    /// One tensor file per layer, `cov_layer<idx>.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| crate::checkpoint::CheckpointError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (&l, c0) in &self.preserved {
            let mut file = TensorFile::default();
            file.meta.insert("layer".into(), l.to_string());
            file.push(format!("preserved_cov/layer{l}"), vec![c0.rows(), c0.cols()], c0.as_slice().to_vec());
            if let Some(cp) = self.prior.get(&l) {
                file.push(format!("prior_cov/layer{l}"), vec![cp.rows(), cp.cols()], cp.as_slice().to_vec());
            }
            file.save(&dir.join(format!("cov_layer{l}.bin")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, layers: &[usize]) -> Result<Self> {
        let mut cache = Self::default();
        for &l in layers {
            let file = TensorFile::load(&dir.join(format!("cov_layer{l}.bin")))?;
            let get = |name: String| -> Result<Option<Matrix>> {
                match file.get(&name) {
                    None => Ok(None),
                    Some(t) if t.shape.len() == 2 => Ok(Some(Matrix::new(t.shape[0], t.shape[1], t.data.clone())?)),
                    Some(_) => Err(crate::checkpoint::CheckpointError::Invalid { name, msg: "expected a matrix".into() }.into()),
                }
            };
            let c0 = get(format!("preserved_cov/layer{l}"))?.ok_or(EditError::MissingCovariance(l))?;
            cache.preserved.insert(l, c0);
            if let Some(cp) = get(format!("prior_cov/layer{l}"))? {
                cache.prior.insert(l, cp);
            }
        }
        Ok(cache)
    }
}
