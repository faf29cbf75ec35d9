use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalConfig, EvalError, EvalReport, Result, TfIdf};
use crate::analysis::{bound_fields, fmt_f64, lemma_bound, theorem_bound, write_csv, BoundReport, BOUND_COLUMNS};
use crate::checkpoint::write_atomic;
use crate::corpus::{load_facts, synth_world, Fact, Tokenizer, WorldConfig};
use crate::edit::{
    collect_keys, estimate_preserved_covs, optimize_residual, prepare_batch, q_matrix, CovarianceCache,
    CriticalLayers, EditConfig, IdentityHooks, PreparedFact, ResidualOptConfig, StrategyRegistry,
};
use crate::linalg::Matrix;
use crate::model::{pretrain, ToyModel, ToyModelConfig, TrainConfig};

/// Everything needed for a sequential editing run. Loaded from TOML with
/// the same field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Pretrained checkpoint; pretrain from `model` and `train` when absent.
    pub model_path: Option<PathBuf>,
    /// Vocabulary saved with the checkpoint; rebuilt from the world when absent.
    pub vocab_path: Option<PathBuf>,
    /// Edit requests; the synthetic world's facts when absent.
    pub facts_path: Option<PathBuf>,
    pub critical_layers: Vec<usize>,
    pub method: String,
    pub batch_size: usize,
    pub n_batches: usize,
    /// Unedited facts evaluated after every batch.
    pub n_heldout: usize,
    /// Shuffle the facts with this seed before batching.
    pub order_seed: Option<u64>,
    /// Scale of the preserved-key covariance.
    pub cov_lambda: f64,
    pub static_distribution: bool,
    /// Evaluate weight-shift bounds before every batch.
    pub compute_bounds: bool,
    /// Facts used by the layer profiles of `analyze`.
    pub analysis_facts: usize,
    /// Batch sizes swept by the error-scaling table of `analyze`.
    pub scaling_values: Vec<usize>,
    pub world: WorldConfig,
    pub model: ToyModelConfig,
    pub train: TrainConfig,
    pub residual: ResidualOptConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            model_path: None,
            vocab_path: None,
            facts_path: None,
            critical_layers: vec![1, 2, 3, 4],
            method: "memit".into(),
            batch_size: 10,
            n_batches: 10,
            n_heldout: 20,
            order_seed: None,
            cov_lambda: 1.0,
            static_distribution: false,
            compute_bounds: true,
            analysis_facts: 50,
            scaling_values: vec![1, 4, 16, 64],
            world: WorldConfig::default(),
            model: ToyModelConfig { d_model: 32, d_ffn: 128, n_layers: 6, n_heads: 4, max_seq: 32, ..Default::default() },
            train: TrainConfig { epochs: 30, ..Default::default() },
            residual: ResidualOptConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io { path: path.to_path_buf(), msg: e.to_string() })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| EvalError::Config(e.to_string()))
    }

    /// Sets every seed (world, model init, training, prefixes, sampling).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.residual.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(EvalError::Config("batch_size must be at least 1".into()));
        }
        if !(self.cov_lambda > 0.0 && self.cov_lambda.is_finite()) {
            return Err(EvalError::Config("cov_lambda must be positive".into()));
        }
        CriticalLayers::new(self.critical_layers.clone(), self.model.n_layers)?;
        self.residual.validate()?;
        StrategyRegistry::default().get(&self.method)?;
        Ok(())
    }

    pub fn edit_config(&self) -> EditConfig {
        EditConfig { residual: self.residual.clone(), static_distribution: self.static_distribution }
    }
}

/// Model, vocabulary, facts and corpus statistics shared by runs.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub model: ToyModel,
    pub tok: Tokenizer,
    pub facts: Vec<Fact>,
    /// Corpus sentences; the document collection for IDF.
    pub corpus: Vec<String>,
    /// `BOS + sentence` for every background sentence; `C_0` is estimated
    /// from these. Falls back to the whole corpus when there are none.
    pub preserved_samples: Vec<Vec<usize>>,
}

impl RunContext {
    /// Builds the world from `cfg.world`, then loads or pretrains the model.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let world = synth_world(&cfg.world)?;
        let tok = match &cfg.vocab_path {
            Some(p) => Tokenizer::load(p)?,
            None => world.tokenizer(),
        };
        let facts = match &cfg.facts_path {
            Some(p) => load_facts(p)?,
            None => world.facts.clone(),
        };
        let encode = |s: &String| -> Result<Vec<usize>> { Ok(tok.tokenize_strict(s)?) };
        let model = match &cfg.model_path {
            Some(p) => ToyModel::load(p)?,
            None => {
                let corpus = world.sentences.iter().map(encode).collect::<Result<Vec<_>>>()?;
                let mc = ToyModelConfig { vocab_size: tok.len(), ..cfg.model.clone() };
                let tc = TrainConfig { bos_token: tok.bos(), ..cfg.train.clone() };
                pretrain(&mc, &corpus, &tc)?.0
            }
        };
        if model.config().vocab_size != tok.len() {
            return Err(EvalError::Config(format!(
                "model vocabulary has {} entries, tokenizer has {}",
                model.config().vocab_size,
                tok.len()
            )));
        }
        let source = if world.background.is_empty() { &world.sentences } else { &world.background };
        let preserved_samples = source
            .iter()
            .map(|s| {
                let mut t = vec![tok.bos()];
                t.extend(encode(s)?);
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, tok, facts, corpus: world.sentences, preserved_samples })
    }

    pub fn covariances(&self, layers: &CriticalLayers, lambda: f64) -> Result<CovarianceCache> {
        Ok(CovarianceCache::new(estimate_preserved_covs(&self.model, &self.preserved_samples, layers.layers(), lambda)?))
    }

    /// Facts in run order: shuffled with `order_seed` when set.
    pub fn ordered_facts(&self, order_seed: Option<u64>) -> Vec<Fact> {
        let mut facts = self.facts.clone();
        if let Some(seed) = order_seed {
            facts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        facts
    }

    pub fn prepare(&self, facts: &[Fact], residual: &ResidualOptConfig) -> Result<Vec<PreparedFact>> {
        Ok(prepare_batch(&self.model, &self.tok, facts, residual.n_prefixes, residual.prefix_len, residual.seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub model_version: u64,
    pub touched_layers: Vec<usize>,
    pub initial_gap: f64,
    pub final_gap: f64,
    /// All facts edited so far.
    pub edited: EvalReport,
    pub heldout: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub critical_layers: Vec<usize>,
    pub batch_size: usize,
    pub n_batches: usize,
    pub completed_batches: usize,
    /// Unedited model on every fact scheduled for editing.
    pub pre_edit: Option<EvalReport>,
    pub pre_edit_heldout: Option<EvalReport>,
    pub batches: Vec<BatchRecord>,
    /// `(batch, report)` for each critical layer before each batch.
    pub bounds: Vec<(usize, BoundReport)>,
    pub error: Option<String>,
}

pub struct RunOutput {
    pub summary: RunSummary,
    pub model: ToyModel,
    pub covs: CovarianceCache,
}

fn references(facts: &[Fact]) -> Vec<String> {
    facts.iter().map(Fact::reference_text).collect()
}

fn layer_bounds(
    model: &ToyModel,
    batch: &[PreparedFact],
    layers: &CriticalLayers,
    cfg: &ResidualOptConfig,
    covs: &CovarianceCache,
) -> Result<Vec<BoundReport>> {
    let residuals = |l: usize| -> Result<Matrix> {
        let cols = batch.iter().map(|pf| Ok(optimize_residual(model, pf, l, cfg)?.delta)).collect::<Result<Vec<_>>>()?;
        Ok(Matrix::from_columns(&cols)?)
    };
    let r_last = residuals(layers.last())?;
    let mut out = Vec::with_capacity(layers.len());
    for &l in layers.layers() {
        let r_star = if l == layers.last() { r_last.clone() } else { residuals(l)? };
        let cp = covs.prior(l)?;
        let q = q_matrix(&collect_keys(model, batch, l)?.keys, covs.preserved(l)?, &cp)?;
        let report = if cp.is_zero() {
            theorem_bound(&r_star, &r_last, l, layers.last(), &q)
        } else {
            lemma_bound(&r_star, &r_last, l, layers.last(), &q)
        };
        out.push(report?);
    }
    Ok(out)
}

/// Sequential batch editing on an already built context. Stops at the
/// first failing batch and records the error in the summary.
pub fn run_sequential_in_memory(ctx: &RunContext, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let layers = CriticalLayers::new(cfg.critical_layers.clone(), ctx.model.n_layers())?;
    let registry = StrategyRegistry::default();
    let strategy = registry.get(&cfg.method)?;
    let edit_cfg = cfg.edit_config();

    let facts = ctx.ordered_facts(cfg.order_seed);
    let n_edit = cfg.batch_size * cfg.n_batches;
    if n_edit > facts.len() {
        return Err(EvalError::Config(format!(
            "{} batches of {} need {n_edit} facts, only {} available",
            cfg.n_batches,
            cfg.batch_size,
            facts.len()
        )));
    }
    let heldout_facts: Vec<Fact> = facts[n_edit..].iter().take(cfg.n_heldout).cloned().collect();
    let edit_facts = &facts[..n_edit];
    let tfidf = TfIdf::new(&ctx.corpus);

    let prepared = if n_edit > 0 { ctx.prepare(edit_facts, &cfg.residual)? } else { Vec::new() };
    let heldout = if heldout_facts.is_empty() { Vec::new() } else { ctx.prepare(&heldout_facts, &cfg.residual)? };
    let refs = references(edit_facts);
    let heldout_refs = references(&heldout_facts);
    let eval_heldout = |m: &ToyModel| -> Result<Option<EvalReport>> {
        if heldout.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluate(m, &ctx.tok, &heldout, &heldout_refs, &tfidf, &cfg.eval)?))
    };

    let mut covs = ctx.covariances(&layers, cfg.cov_lambda)?;
    let mut summary = RunSummary {
        method: cfg.method.clone(),
        critical_layers: cfg.critical_layers.clone(),
        batch_size: cfg.batch_size,
        n_batches: cfg.n_batches,
        completed_batches: 0,
        pre_edit: if prepared.is_empty() {
            None
        } else {
            Some(evaluate(&ctx.model, &ctx.tok, &prepared, &refs, &tfidf, &cfg.eval)?)
        },
        pre_edit_heldout: eval_heldout(&ctx.model)?,
        batches: Vec::new(),
        bounds: Vec::new(),
        error: None,
    };

    let mut model = ctx.model.clone();
    for b in 0..cfg.n_batches {
        let batch = &prepared[b * cfg.batch_size..(b + 1) * cfg.batch_size];
        let step = |model: &ToyModel, covs: &mut CovarianceCache, summary: &mut RunSummary| -> Result<ToyModel> {
            if cfg.compute_bounds {
                for r in layer_bounds(model, batch, &layers, &cfg.residual, covs)? {
                    summary.bounds.push((b + 1, r));
                }
            }
            let out = strategy.edit(model, batch, &layers, &edit_cfg, covs, &IdentityHooks)?;
            for (l, k1) in &out.keys {
                covs.record_keys(*l, k1)?;
            }
            let done = &prepared[..(b + 1) * cfg.batch_size];
            summary.batches.push(BatchRecord {
                batch: b + 1,
                model_version: out.model.version(),
                touched_layers: out.touched_layers(),
                initial_gap: out.initial_gap,
                final_gap: out.final_gap,
                edited: evaluate(&out.model, &ctx.tok, done, &refs[..done.len()], &tfidf, &cfg.eval)?,
                heldout: eval_heldout(&out.model)?,
            });
            Ok(out.model)
        };
        match step(&model, &mut covs, &mut summary) {
            Ok(next) => {
                model = next;
                summary.completed_batches = b + 1;
            }
            Err(e) => {
                summary.error = Some(format!("batch {}: {e}", b + 1));
                return Err(EvalError::Batch { batch: b + 1, source: Box::new(e), summary: Box::new(summary) });
            }
        }
    }
    Ok(RunOutput { summary, model, covs })
}

pub const REPORT_COLUMNS: [&str; 7] =
    ["batch", "method", "efficacy", "generalization", "specificity", "fluency", "consistency"];

fn report_rows(s: &RunSummary) -> Vec<Vec<String>> {
    s.batches
        .iter()
        .map(|b| {
            vec![
                b.batch.to_string(),
                s.method.clone(),
                fmt_f64(b.edited.efficacy),
                fmt_f64(b.edited.generalization),
                fmt_f64(b.edited.specificity),
                fmt_f64(b.edited.fluency),
                fmt_f64(b.edited.consistency),
            ]
        })
        .collect()
}

fn bound_rows(s: &RunSummary) -> Vec<Vec<String>> {
    s.bounds
        .iter()
        .map(|(b, r)| {
            let mut row = vec![b.to_string(), s.method.clone()];
            row.extend(bound_fields(r));
            row
        })
        .collect()
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| EvalError::Io { path: path.to_path_buf(), msg: e.to_string() })?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

/// Writes `report.csv`, `bounds.csv` and `summary.json` under `dir`.
pub fn write_outputs(dir: &Path, summary: &RunSummary) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| EvalError::Io { path: dir.to_path_buf(), msg: e.to_string() })?;
    write_csv(&dir.join("report.csv"), &REPORT_COLUMNS, &report_rows(summary))?;
    let mut header = vec!["batch", "method"];
    header.extend(BOUND_COLUMNS);
    write_csv(&dir.join("bounds.csv"), &header, &bound_rows(summary))?;
    write_json(&dir.join("summary.json"), summary)
}

/// Builds the context, runs the protocol and writes every artifact to
/// `cfg.out_dir`: the CSVs and summary, `model.bin`, `vocab.txt`, the
/// covariance cache under `covs/` and the resolved `config.toml`. On a
/// batch failure the partial summary is still written.
pub fn run_sequential(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let ctx = RunContext::build(cfg)?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| EvalError::Io { path: dir.clone(), msg: e.to_string() })?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    match run_sequential_in_memory(&ctx, cfg) {
        Ok(out) => {
            write_outputs(dir, &out.summary)?;
            out.model.save(&dir.join("model.bin"))?;
            ctx.tok.save(&dir.join("vocab.txt"))?;
            out.covs.save(&dir.join("covs"))?;
            Ok(out.summary)
        }
        Err(e) => {
            let summary = match &e {
                EvalError::Batch { summary, .. } => (**summary).clone(),
                _ => RunSummary {
                    method: cfg.method.clone(),
                    critical_layers: cfg.critical_layers.clone(),
                    batch_size: cfg.batch_size,
                    n_batches: cfg.n_batches,
                    completed_batches: 0,
                    pre_edit: None,
                    pre_edit_heldout: None,
                    batches: Vec::new(),
                    bounds: Vec::new(),
                    error: Some(e.to_string()),
                },
            };
            write_outputs(dir, &summary)?;
            Err(e)
        }
    }
}
