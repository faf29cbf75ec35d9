//! `editlab` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use editlab::analysis::{hidden_state_dump, run_analysis};
use editlab::checkpoint::write_atomic;
use editlab::corpus::{encode_prompt, save_facts, synth_world};
use editlab::eval::{evaluate, run_sequential, RunConfig, RunContext, TfIdf};
use editlab::model::{pretrain, ToyModelConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "editlab", version, about = "Locate-then-edit experiments on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for world generation, initialization, training and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Edit method: memit or blue.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Critical layers, e.g. `1,2,3,4`.
    #[arg(long, global = true, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    n_batches: Option<usize>,
    /// Pretrained checkpoint (overrides `model_path`).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world: facts, corpus and vocabulary.
    Synth(Common),
    /// Pretrain a model on the synthetic corpus.
    Pretrain(Common),
    /// Apply a single batch edit and evaluate it.
    Edit(Common),
    /// Sequential batch editing with per-batch reports.
    Run(Common),
    /// Layer profiles, weight-shift bounds and error scaling.
    Analyze(Common),
    /// Metrics of a checkpoint on the configured facts.
    Eval(Common),
    /// Final-position hidden states of every fact prompt.
    DumpHidden {
        #[command(flatten)]
        common: Common,
        /// Layer whose output is dumped.
        #[arg(long)]
        layer: usize,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(m) = &c.method {
        cfg.method = m.clone();
    }
    if let Some(l) = &c.layers {
        cfg.critical_layers = l.clone();
    }
    if let Some(b) = c.batch_size {
        cfg.batch_size = b;
    }
    if let Some(n) = c.n_batches {
        cfg.n_batches = n;
    }
    if let Some(m) = &c.model {
        cfg.model_path = Some(m.clone());
        // A checkpoint written by `pretrain` or `run` has its vocabulary next to it.
        if cfg.vocab_path.is_none() {
            let v = m.with_file_name("vocab.txt");
            if v.exists() {
                cfg.vocab_path = Some(v);
            }
        }
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let world = synth_world(&cfg.world)?;
    let dir = &cfg.out_dir;
    create_dir(dir)?;
    save_facts(&world.facts, &dir.join("facts.jsonl"))?;
    write_atomic(&dir.join("corpus.txt"), (world.sentences.join("\n") + "\n").as_bytes())?;
    write_atomic(&dir.join("background.txt"), (world.background.join("\n") + "\n").as_bytes())?;
    world.tokenizer().save(&dir.join("vocab.txt"))?;
    println!(
        "{} facts, {} corpus sentences, {} background sentences -> {}",
        world.facts.len(),
        world.sentences.len(),
        world.background.len(),
        dir.display()
    );
    Ok(())
}

fn pretrain_cmd(cfg: &RunConfig) -> Result<()> {
    let world = synth_world(&cfg.world)?;
    let tok = world.tokenizer();
    let corpus = world.sentences.iter().map(|s| tok.tokenize_strict(s)).collect::<Result<Vec<_>, _>>()?;
    let mc = ToyModelConfig { vocab_size: tok.len(), ..cfg.model.clone() };
    let tc = TrainConfig { bos_token: tok.bos(), ..cfg.train.clone() };
    let (model, report) = pretrain(&mc, &corpus, &tc)?;
    let dir = &cfg.out_dir;
    create_dir(dir)?;
    model.save(&dir.join("model.bin"))?;
    tok.save(&dir.join("vocab.txt"))?;
    write_atomic(&dir.join("pretrain.json"), (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    println!(
        "held-out loss {:.4} -> {:.4} after {} steps -> {}",
        report.initial_heldout_loss,
        report.final_heldout_loss,
        report.steps,
        dir.join("model.bin").display()
    );
    Ok(())
}

fn run_cmd(cfg: &RunConfig) -> Result<()> {
    let summary = run_sequential(cfg)?;
    match (&summary.pre_edit, summary.batches.last()) {
        (Some(pre), Some(last)) => println!(
            "{}: efficacy {:.3} -> {:.3}, generalization {:.3} -> {:.3}, specificity {:.3} -> {:.3} after {} batches",
            summary.method,
            pre.efficacy,
            last.edited.efficacy,
            pre.generalization,
            last.edited.generalization,
            pre.specificity,
            last.edited.specificity,
            summary.completed_batches
        ),
        _ => println!("no batches applied"),
    }
    println!("outputs in {}", cfg.out_dir.display());
    Ok(())
}

fn analyze(cfg: &RunConfig) -> Result<()> {
    let ctx = RunContext::build(cfg)?;
    let s = run_analysis(&ctx, cfg, &cfg.out_dir)?;
    println!("layer  contrib_dist  contrib_comp  cosine   residual_gap");
    for p in &s.profiles {
        println!(
            "{:>5}  {:>12.4}  {:>12.4}  {:>7.4}  {:>12.4}",
            p.layer, p.contribution_distributed, p.contribution_computed, p.memory_cosine, p.residual_gap
        );
    }
    println!("outputs in {}", cfg.out_dir.display());
    Ok(())
}

fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    if cfg.model_path.is_none() {
        bail!("eval needs a checkpoint: pass --model or set model_path");
    }
    let ctx = RunContext::build(cfg)?;
    let n = (cfg.batch_size * cfg.n_batches).min(ctx.facts.len());
    if n == 0 {
        bail!("no facts selected: batch_size * n_batches is 0");
    }
    let facts = &ctx.ordered_facts(cfg.order_seed)[..n];
    let prepared = ctx.prepare(facts, &cfg.residual)?;
    let refs: Vec<String> = facts.iter().map(|f| f.reference_text()).collect();
    let report = evaluate(&ctx.model, &ctx.tok, &prepared, &refs, &TfIdf::new(&ctx.corpus), &cfg.eval)?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("eval.json");
    write_atomic(&path, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    println!(
        "efficacy {:.4} generalization {:.4} specificity {:.4} fluency {:.4} consistency {:.4} ({} facts, model version {})",
        report.efficacy,
        report.generalization,
        report.specificity,
        report.fluency,
        report.consistency,
        report.n_facts,
        report.model_version
    );
    Ok(())
}

fn dump_hidden(cfg: &RunConfig, layer: usize) -> Result<()> {
    let ctx = RunContext::build(cfg)?;
    let prompts = ctx
        .facts
        .iter()
        .map(|f| Ok((f.id.clone(), encode_prompt(&ctx.tok, &f.id, &f.prompt, &f.subject)?.tokens)))
        .collect::<Result<Vec<_>>>()?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("hidden_layer{layer}.csv"));
    let n = hidden_state_dump(&ctx.model, &prompts, layer, &path)?;
    println!("{n} rows -> {}", path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => synth(&load_config(&c)?),
        Command::Pretrain(c) => pretrain_cmd(&load_config(&c)?),
        Command::Edit(c) => {
            let cfg = RunConfig { n_batches: 1, ..load_config(&c)? };
            run_cmd(&cfg)
        }
        Command::Run(c) => run_cmd(&load_config(&c)?),
        Command::Analyze(c) => analyze(&load_config(&c)?),
        Command::Eval(c) => eval_cmd(&load_config(&c)?),
        Command::DumpHidden { common, layer } => dump_hidden(&load_config(&common)?, layer),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
