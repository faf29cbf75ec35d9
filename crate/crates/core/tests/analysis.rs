mod common;

use editlab::analysis::{contribution_records, hidden_state_dump, run_analysis, ContributionMode, DeltaTable, SCALING_COLUMNS};
use editlab::corpus::encode_prompt;
use editlab::edit::{CriticalLayers, IdentityHooks, StrategyRegistry};

#[test]
fn analysis_outputs_are_complete_and_reproducible() {
    let (cfg, ctx) = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let s = run_analysis(ctx, cfg, &a).unwrap();
    assert_eq!(s, run_analysis(ctx, cfg, &b).unwrap());
    for f in ["contributions.csv", "cosines.csv", "profiles.csv", "bounds.csv", "scaling.csv", "analysis.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    assert_eq!(s.n_facts, cfg.analysis_facts);
    assert_eq!(s.profiles.iter().map(|p| p.layer).collect::<Vec<_>>(), cfg.critical_layers);
    let last = s.profiles.last().unwrap();
    assert_eq!((last.memory_cosine, last.residual_gap), (1.0, 0.0));
    assert_eq!(last.contribution_distributed, last.contribution_computed);
    assert_eq!(s.scaling.len(), cfg.scaling_values.len() * 2);
    assert!(s.scaling.iter().all(|r| r.report.satisfied));

    let contributions = std::fs::read_to_string(a.join("contributions.csv")).unwrap();
    let mut lines = contributions.lines();
    assert_eq!(lines.next(), Some("fact_id,layer,mode,score"));
    assert_eq!(lines.count(), cfg.analysis_facts * cfg.critical_layers.len() * 2);
    let scaling = std::fs::read_to_string(a.join("scaling.csv")).unwrap();
    assert_eq!(scaling.lines().next().unwrap(), SCALING_COLUMNS.join(","));
}

#[test]
fn contribution_scores_are_probability_differences() {
    let (cfg, ctx) = common::tiny();
    let layers = CriticalLayers::new(cfg.critical_layers.clone(), ctx.model.n_layers()).unwrap();
    let facts = ctx.prepare(&ctx.facts[..5], &cfg.residual).unwrap();
    let table = DeltaTable::compute(&ctx.model, &facts, &layers, &cfg.residual).unwrap();
    for mode in [ContributionMode::Distributed, ContributionMode::Computed] {
        let recs = contribution_records(&ctx.model, &facts, &table, mode).unwrap();
        assert_eq!(recs.len(), facts.len() * layers.len());
        assert!(recs.iter().all(|r| (-1.0..=1.0).contains(&r.score)));
    }
}

#[test]
fn hidden_dumps_change_only_downstream_of_an_edit() {
    let (cfg, ctx) = common::tiny();
    let prompts: Vec<(String, Vec<usize>)> = ctx.facts[..6]
        .iter()
        .map(|f| (f.id.clone(), encode_prompt(&ctx.tok, &f.id, &f.prompt, &f.subject).unwrap().tokens))
        .collect();
    let layers = CriticalLayers::new(vec![2], ctx.model.n_layers()).unwrap();
    let batch = ctx.prepare(&ctx.facts[..2], &cfg.residual).unwrap();
    let covs = ctx.covariances(&layers, cfg.cov_lambda).unwrap();
    let edited = StrategyRegistry::default()
        .get("blue")
        .unwrap()
        .edit(&ctx.model, &batch, &layers, &cfg.edit_config(), &covs, &IdentityHooks)
        .unwrap()
        .model;

    let dir = tempfile::tempdir().unwrap();
    let dump = |m, layer: usize, name: &str| {
        let p = dir.path().join(name);
        assert_eq!(hidden_state_dump(m, &prompts, layer, &p).unwrap(), prompts.len());
        std::fs::read_to_string(p).unwrap()
    };
    assert_eq!(dump(&ctx.model, 1, "a1"), dump(&edited, 1, "b1"));
    assert_ne!(dump(&ctx.model, 3, "a3"), dump(&edited, 3, "b3"));
    let header = dump(&ctx.model, 0, "h");
    assert!(header.starts_with("id,h0,h1,"));
    assert!(hidden_state_dump(&ctx.model, &prompts, 99, &dir.path().join("x")).is_err());
}
