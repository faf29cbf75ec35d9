mod common;

use editlab::edit::PreparedFact;
use editlab::eval::{efficacy, evaluate, generalization, specificity, EvalError, TfIdf};
use editlab::linalg::{Matrix, Vector};
use editlab::model::{grad_delta, next_token_probs, ToyModel};

/// The tiny model with its output head replaced.
fn with_head(head: Matrix) -> ToyModel {
    let m = &common::tiny().1.model;
    let mut w = m.weights().clone();
    w.head = Some(head);
    ToyModel::from_weights(m.config().clone(), w, m.version()).unwrap()
}

/// Head whose logits ignore the hidden state: `token` gets `logit`, all others 0.
fn constant_head(token: Option<usize>, logit: f64) -> ToyModel {
    let m = &common::tiny().1.model;
    let (v, d) = (m.config().vocab_size, m.config().d_model);
    let mut w = m.weights().clone();
    // zero gain, unit bias on the first coordinate: the final norm emits e_0
    w.lnf_gain = Vector::zeros(d);
    w.lnf_bias = Vector::new((0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    w.head = Some(Matrix::from_fn(v, d, |r, c| if Some(r) == token && c == 0 { logit } else { 0.0 }).unwrap());
    ToyModel::from_weights(m.config().clone(), w, m.version()).unwrap()
}

fn facts_sharing_new_object() -> Vec<PreparedFact> {
    let (cfg, ctx) = common::tiny();
    let all = ctx.prepare(&ctx.facts, &cfg.residual).unwrap();
    let target = all[0].object_new;
    all.into_iter().filter(|f| f.object_new == target).collect()
}

#[test]
fn model_rigged_to_the_new_object() {
    let facts = facts_sharing_new_object();
    let model = constant_head(Some(facts[0].object_new), 20.0);
    assert_eq!(efficacy(&model, &facts).unwrap(), 1.0);
    let (g, n) = generalization(&model, &facts).unwrap();
    assert_eq!((g, n), (1.0, facts.len()));
    let (s, prompts) = specificity(&model, &facts).unwrap();
    assert_eq!(s, 0.0);
    assert_eq!(prompts, facts.iter().map(|f| f.neighborhood.len()).sum::<usize>());
}

#[test]
fn ties_count_as_failures() {
    let facts = facts_sharing_new_object();
    let model = constant_head(None, 0.0);
    assert_eq!(efficacy(&model, &facts).unwrap(), 0.0);
    assert_eq!(generalization(&model, &facts).unwrap().0, 0.0);
    assert_eq!(specificity(&model, &facts).unwrap().0, 0.0);
}

#[test]
fn empty_inputs_are_errors() {
    let model = &common::tiny().1.model;
    assert!(matches!(efficacy(model, &[]), Err(EvalError::NoFacts)));
    let (cfg, ctx) = common::tiny();
    let facts = ctx.prepare(&ctx.facts[..2], &cfg.residual).unwrap();
    let tfidf = TfIdf::new(&ctx.corpus);
    assert!(evaluate(model, &ctx.tok, &facts, &["one".into()], &tfidf, &cfg.eval).is_err());
}

#[test]
fn gradient_vanishes_when_the_target_is_saturated() {
    let (cfg, ctx) = common::tiny();
    let m = &ctx.model;
    let pf = &ctx.prepare(&ctx.facts[..1], &cfg.residual).unwrap()[0];
    let (v, d) = (m.config().vocab_size, m.config().d_model);
    let target = pf.object_new;
    let probe = |row: &[f64]| {
        let model = with_head(Matrix::from_fn(v, d, |r, c| if r == target { row[c] } else { 0.0 }).unwrap());
        let p = next_token_probs(&model, &pf.prompt, None).unwrap();
        let other = (target + 1) % v;
        (model, (p.as_slice()[target] / p.as_slice()[other]).ln())
    };
    // the target logit is linear in its head row; scale a unit row to the wanted margin
    let unit: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } / (d as f64).sqrt()).collect();
    let (_, z) = probe(&unit);
    assert!(z.abs() > 1e-3, "degenerate probe direction: {z}");
    let margin = ((v - 1) as f64 * (1e12 - 1.0)).ln();
    let row: Vec<f64> = unit.iter().map(|x| x * margin / z).collect();
    let (model, _) = probe(&row);
    let p = next_token_probs(&model, &pf.prompt, None).unwrap().as_slice()[target];
    assert!((1.0 - p - 1e-12).abs() < 1e-14, "1 - p = {}", 1.0 - p);
    for layer in 0..model.n_layers() {
        let g = grad_delta(&model, &pf.prompt, layer, pf.subject_last, target).unwrap();
        assert_eq!(g.len(), d);
        assert!(g.norm() < 1e-6, "layer {layer}: {}", g.norm());
    }
}
