mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use editlab::edit::{
    layer_step_profile, CovarianceCache, CriticalLayers, EditConfig, EditError, EditOutcome, EditStrategy,
    IdentityHooks, PreparedFact, SolveHooks, StrategyRegistry,
};
use editlab::linalg::Matrix;
use editlab::model::ToyModel;

struct Setup {
    batch: Vec<PreparedFact>,
    covs: CovarianceCache,
    cfg: EditConfig,
}

fn setup(layers: &CriticalLayers, n: usize) -> Setup {
    let (cfg, ctx) = common::tiny();
    Setup {
        batch: ctx.prepare(&ctx.facts[..n], &cfg.residual).unwrap(),
        covs: ctx.covariances(layers, cfg.cov_lambda).unwrap(),
        cfg: cfg.edit_config(),
    }
}

fn edit(method: &str, layers: &CriticalLayers, s: &Setup, hooks: &dyn SolveHooks) -> editlab::edit::Result<EditOutcome> {
    let model = &common::tiny().1.model;
    StrategyRegistry::default().get(method).unwrap().edit(model, &s.batch, layers, &s.cfg, &s.covs, hooks)
}

fn layers(l: &[usize]) -> CriticalLayers {
    CriticalLayers::new(l.to_vec(), common::tiny().1.model.n_layers()).unwrap()
}

#[test]
fn registry_selects_by_name() {
    let r = StrategyRegistry::default();
    assert_eq!(r.names(), ["blue", "memit"]);
    assert!(r.get("memit").unwrap().distributes_residual());
    assert!(!r.get("blue").unwrap().distributes_residual());
    assert!(matches!(r.get("rome"), Err(EditError::UnknownMethod(m)) if m == "rome"));
}

#[test]
fn custom_strategies_register_by_name() {
    struct Noop;
    impl EditStrategy for Noop {
        fn name(&self) -> &'static str {
            "noop"
        }
        fn edit(
            &self,
            model: &ToyModel,
            _: &[PreparedFact],
            _: &CriticalLayers,
            _: &EditConfig,
            _: &CovarianceCache,
            _: &dyn SolveHooks,
        ) -> editlab::edit::Result<EditOutcome> {
            Ok(EditOutcome { model: model.clone(), deltas: vec![], keys: vec![], steps: vec![], initial_gap: 0.0, final_gap: 0.0 })
        }
    }
    let mut r = StrategyRegistry::empty();
    r.register(Box::new(Noop));
    assert_eq!(r.names(), ["noop"]);
    assert!(r.get("memit").is_err());
}

#[test]
fn touched_layers_per_strategy() {
    let l = layers(&[1, 2, 3]);
    let s = setup(&l, 4);
    let memit = edit("memit", &l, &s, &IdentityHooks).unwrap();
    assert_eq!(memit.touched_layers(), [1, 2, 3]);
    assert!(memit.deltas.iter().all(|d| !d.delta.is_zero()));
    let blue = edit("blue", &l, &s, &IdentityHooks).unwrap();
    assert_eq!(blue.touched_layers(), [1, 3]);
    // the untouched middle layer keeps its weights
    let model = &common::tiny().1.model;
    assert_eq!(blue.model.memory_weight(2).unwrap(), model.memory_weight(2).unwrap());
    assert_ne!(blue.model.memory_weight(1).unwrap(), model.memory_weight(1).unwrap());
}

#[test]
fn single_layer_strategies_coincide() {
    let l = layers(&[2]);
    let s = setup(&l, 4);
    let memit = edit("memit", &l, &s, &IdentityHooks).unwrap();
    let blue = edit("blue", &l, &s, &IdentityHooks).unwrap();
    assert_eq!(memit.touched_layers(), [2]);
    assert_eq!(blue.touched_layers(), [2]);
    let diff = memit.deltas[0].delta.sub(&blue.deltas[0].delta).unwrap().frobenius_norm();
    assert!(diff <= 1e-12 * memit.deltas[0].delta.frobenius_norm(), "{diff}");
}

#[test]
fn edits_shrink_the_last_layer_residual() {
    let l = layers(&[1, 2, 3]);
    let s = setup(&l, 4);
    for method in ["memit", "blue"] {
        let out = edit(method, &l, &s, &IdentityHooks).unwrap();
        assert!(out.final_gap < out.initial_gap, "{method}: {} -> {}", out.initial_gap, out.final_gap);
    }
    let static_cfg = Setup { cfg: EditConfig { static_distribution: true, ..s.cfg.clone() }, ..s };
    let out = edit("memit", &l, &static_cfg, &IdentityHooks).unwrap();
    assert_eq!(out.touched_layers(), [1, 2, 3]);
    assert!(out.final_gap < out.initial_gap);
}

#[test]
fn emitted_solves_satisfy_their_normal_equations() {
    let l = layers(&[1, 2, 3]);
    let s = setup(&l, 4);
    for method in ["memit", "blue"] {
        let out = edit(method, &l, &s, &IdentityHooks).unwrap();
        for (d, (layer, k1)) in out.deltas.iter().zip(&out.keys) {
            assert_eq!(d.layer, *layer);
            let a = s.covs.prior(*layer).unwrap().add(s.covs.preserved(*layer).unwrap()).unwrap().add(&k1.gram()).unwrap();
            let kt = k1.transpose();
            let resid = d.q.matmul(&a).unwrap().sub(&kt).unwrap().frobenius_norm() / kt.frobenius_norm().max(1.0);
            assert!(resid <= 1e-8, "{method} layer {layer}: {resid}");
        }
    }
}

#[test]
fn hooks_see_every_solve() {
    struct Freeze(AtomicUsize, AtomicUsize);
    impl SolveHooks for Freeze {
        fn adjust_covariance(&self, _: usize, a: Matrix) -> Matrix {
            self.0.fetch_add(1, Ordering::SeqCst);
            a
        }
        fn adjust_delta(&self, _: usize, delta: Matrix) -> Matrix {
            self.1.fetch_add(1, Ordering::SeqCst);
            Matrix::zeros(delta.rows(), delta.cols())
        }
    }
    let l = layers(&[1, 2, 3]);
    let s = setup(&l, 2);
    let hooks = Freeze(AtomicUsize::new(0), AtomicUsize::new(0));
    let out = edit("memit", &l, &s, &hooks).unwrap();
    assert_eq!((hooks.0.load(Ordering::SeqCst), hooks.1.load(Ordering::SeqCst)), (3, 3));
    let model = &common::tiny().1.model;
    for layer in 0..model.n_layers() {
        assert_eq!(out.model.memory_weight(layer).unwrap(), model.memory_weight(layer).unwrap());
    }
}

#[test]
fn empty_and_duplicate_batches_are_rejected() {
    let l = layers(&[1, 2, 3]);
    let mut s = setup(&l, 2);
    let empty = Setup { batch: vec![], covs: s.covs.clone(), cfg: s.cfg.clone() };
    for method in ["memit", "blue"] {
        assert!(matches!(edit(method, &l, &empty, &IdentityHooks), Err(EditError::EmptyBatch)));
    }
    s.batch[1].id = s.batch[0].id.clone();
    for method in ["memit", "blue"] {
        assert!(matches!(edit(method, &l, &s, &IdentityHooks), Err(EditError::DuplicateFact(_))));
    }
}

#[test]
fn step_profile_is_zero_when_threshold_is_never_binding() {
    let (cfg, ctx) = common::tiny();
    let l = layers(&[1, 2, 3]);
    let s = setup(&l, 3);
    let rc = editlab::edit::ResidualOptConfig { loss_threshold: f64::INFINITY, ..cfg.residual.clone() };
    let prof = layer_step_profile(&ctx.model, &s.batch, &l, &rc, &s.covs).unwrap();
    assert_eq!(prof, [(1, 0.0), (2, 0.0), (3, 0.0)]);
}
