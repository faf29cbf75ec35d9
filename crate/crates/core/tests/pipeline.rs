mod common;

use editlab::edit::{CriticalLayers, IdentityHooks, StrategyRegistry};
use editlab::eval::{evaluate, run_sequential_in_memory, write_outputs, EvalReport, RunConfig, TfIdf};

fn check_ranges(r: &EvalReport, n: usize) {
    assert_eq!(r.n_facts, n);
    for x in [r.efficacy, r.generalization, r.specificity, r.consistency] {
        assert!((0.0..=1.0).contains(&x), "{r:?}");
    }
    assert!(r.fluency.is_finite() && r.fluency >= 0.0);
}

#[test]
fn zero_batches_reports_unedited_metrics_only() {
    let (cfg, ctx) = common::tiny();
    let cfg = RunConfig { n_batches: 0, ..cfg.clone() };
    let out = run_sequential_in_memory(ctx, &cfg).unwrap();
    assert!(out.summary.batches.is_empty() && out.summary.bounds.is_empty());
    assert_eq!(out.summary.completed_batches, 0);
    check_ranges(out.summary.pre_edit_heldout.as_ref().unwrap(), cfg.n_heldout);
    assert_eq!(out.model, ctx.model);

    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &out.summary).unwrap();
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1, "header only: {report}");
}

#[test]
fn unedited_report_does_not_depend_on_method() {
    let (cfg, ctx) = common::tiny();
    let run = |method: &str| {
        let cfg = RunConfig { method: method.into(), n_batches: 1, compute_bounds: false, ..cfg.clone() };
        run_sequential_in_memory(ctx, &cfg).unwrap().summary
    };
    let (a, b) = (run("memit"), run("blue"));
    assert_eq!(a.pre_edit, b.pre_edit);
    assert_eq!(a.pre_edit_heldout, b.pre_edit_heldout);
    assert_ne!(a.batches[0].touched_layers, b.batches[0].touched_layers);
}

#[test]
fn one_batch_of_everything_equals_a_single_edit() {
    let (cfg, ctx) = common::tiny();
    let n = ctx.facts.len();
    let cfg = RunConfig { batch_size: n, n_batches: 1, n_heldout: 0, compute_bounds: false, ..cfg.clone() };
    let out = run_sequential_in_memory(ctx, &cfg).unwrap();

    let layers = CriticalLayers::new(cfg.critical_layers.clone(), ctx.model.n_layers()).unwrap();
    let batch = ctx.prepare(&ctx.facts, &cfg.residual).unwrap();
    let covs = ctx.covariances(&layers, cfg.cov_lambda).unwrap();
    let registry = StrategyRegistry::default();
    let direct = registry.get("memit").unwrap().edit(&ctx.model, &batch, &layers, &cfg.edit_config(), &covs, &IdentityHooks).unwrap();
    assert_eq!(out.model, direct.model);

    let refs: Vec<String> = ctx.facts.iter().map(|f| f.reference_text()).collect();
    let report = evaluate(&direct.model, &ctx.tok, &batch, &refs, &TfIdf::new(&ctx.corpus), &cfg.eval).unwrap();
    assert_eq!(out.summary.batches[0].edited, report);
    assert!(out.summary.batches[0].heldout.is_none());
}

#[test]
fn every_report_is_in_range_and_versions_advance() {
    let (cfg, ctx) = common::tiny();
    for method in ["memit", "blue"] {
        let cfg = RunConfig { method: method.into(), ..cfg.clone() };
        let s = run_sequential_in_memory(ctx, &cfg).unwrap().summary;
        assert_eq!(s.completed_batches, cfg.n_batches);
        check_ranges(s.pre_edit.as_ref().unwrap(), cfg.batch_size * cfg.n_batches);
        let mut version = ctx.model.version();
        for (i, b) in s.batches.iter().enumerate() {
            check_ranges(&b.edited, (i + 1) * cfg.batch_size);
            check_ranges(b.heldout.as_ref().unwrap(), cfg.n_heldout);
            assert!(b.model_version > version);
            assert_eq!(b.edited.model_version, b.model_version);
            version = b.model_version;
        }
        assert_eq!(s.bounds.len(), cfg.n_batches * cfg.critical_layers.len());
        assert!(s.bounds.iter().all(|(_, r)| r.satisfied && r.is_consistent()));
    }
}

#[test]
fn bad_configurations_are_rejected() {
    let (cfg, ctx) = common::tiny();
    let cases = [
        RunConfig { method: "rome".into(), ..cfg.clone() },
        RunConfig { batch_size: 0, ..cfg.clone() },
        RunConfig { batch_size: 100, ..cfg.clone() },
        RunConfig { critical_layers: vec![2, 1], ..cfg.clone() },
        RunConfig { cov_lambda: 0.0, ..cfg.clone() },
    ];
    for c in cases {
        assert!(run_sequential_in_memory(ctx, &c).is_err(), "{c:?}");
    }
}

#[test]
fn config_round_trips_through_toml() {
    let (cfg, _) = common::tiny();
    let text = cfg.to_toml().unwrap();
    assert_eq!(&RunConfig::from_toml(&text).unwrap(), cfg);
    let partial = RunConfig::from_toml("method = \"blue\"\n[world]\nseed = 9\n").unwrap();
    assert_eq!((partial.method.as_str(), partial.world.seed, partial.batch_size), ("blue", 9, 10));
    assert!(RunConfig::from_toml("batch = 3\n").is_err());
}
