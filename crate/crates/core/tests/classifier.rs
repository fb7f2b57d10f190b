mod common;

use approx::assert_abs_diff_eq;
use common::*;
use proptest::prelude::*;
use smanet_core::classifier::*;
use smanet_core::diffcore::{gradient_check, GradCheckOptions, Graph, Tensor};
use smanet_core::encoder::{Encoded, EncodedInstance};
use smanet_core::matching::enhance_pair;
use smanet_core::model::{Model, ModelConfig, ModelVars};

fn tiny_config() -> ModelConfig {
    ModelConfig { embed_dim: 4, hidden: 3, attn_hidden: 3, heads: 2, perspectives: 2, ..Default::default() }
}

fn instances(n: usize, cfg: &ModelConfig, seed: u64) -> Vec<EncodedInstance> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let t = 2 + i % 3;
            EncodedInstance {
                h: random(t, 2 * cfg.hidden, &mut r),
                a: stochastic(cfg.heads, t, &mut r),
                m: random(cfg.heads, 2 * cfg.hidden, &mut r),
            }
        })
        .collect()
}

fn pair_score_oracle(s: &[f64], q: &[f64], w9: &Tensor, w10: &Tensor) -> f64 {
    let x: Vec<f64> = s.iter().chain(q).copied().collect();
    (0..w10.rows())
        .map(|j| {
            let h: f64 = w10.row(j).iter().zip(&x).map(|(a, b)| a * b).sum();
            w9.get(0, j) * h.max(0.0)
        })
        .sum()
}

#[test]
fn pair_score_matches_oracle() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 1).unwrap();
    let mut r = rng(2);
    let (s, q) = (random(1, 6, &mut r), random(1, 6, &mut r));
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, &model.params, &cfg);
    let (sv, qv) = (g.constant(s.clone()), g.constant(q.clone()));
    let out = pair_score(&mut g, sv, qv, &vars.scorer.cls);
    let expected =
        pair_score_oracle(s.row(0), q.row(0), &model.params.get("cls.w9").unwrap(), &model.params.get("cls.w10").unwrap());
    assert_abs_diff_eq!(g.value(out).item(), expected, epsilon = 1e-12);
}

fn scored_class(model: &Model, query: &EncodedInstance, supports: &[EncodedInstance]) -> (Graph, ClassScoreVars, Vec<Tensor>, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, &model.params, &model.config);
    let q = query.to_graph(&mut g);
    let ss: Vec<Encoded> = supports.iter().map(|s| s.to_graph(&mut g)).collect();
    let out = score_class(&mut g, &q, &ss, &vars.scorer).unwrap();
    let mut s_hats = Vec::new();
    let mut q_hats = Vec::new();
    for s in &ss {
        let (a, b) = enhance_pair(&mut g, s, &q, &vars.scorer.persp, &vars.scorer.agg, &vars.scorer.settings);
        s_hats.push(g.value(a).clone());
        q_hats.push(g.value(b).clone());
    }
    (g, out, s_hats, q_hats)
}

#[test]
fn single_support_prototype_is_the_enhanced_support() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 3).unwrap();
    let inst = instances(2, &cfg, 4);
    let (g, out, s_hats, q_hats) = scored_class(&model, &inst[0], &inst[1..]);
    assert_eq!(g.value(out.weights).data(), &[1.0]);
    assert!(g.value(out.prototype).max_abs_diff(&s_hats[0]) < 1e-15);
    assert!(g.value(out.query).max_abs_diff(&q_hats[0]) < 1e-15);
}

#[test]
fn two_support_composition_matches_oracle() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 5).unwrap();
    let inst = instances(3, &cfg, 6);
    let (g, out, s_hats, q_hats) = scored_class(&model, &inst[0], &inst[1..]);
    let w9 = model.params.get("cls.w9").unwrap();
    let w10 = model.params.get("cls.w10").unwrap();
    let qc: Vec<f64> = (0..6).map(|k| (q_hats[0].get(0, k) + q_hats[1].get(0, k)) / 2.0).collect();
    let alphas: Vec<f64> = s_hats.iter().map(|s| pair_score_oracle(s.row(0), &qc, &w9, &w10)).collect();
    let m = alphas[0].max(alphas[1]);
    let z: f64 = alphas.iter().map(|a| (a - m).exp()).sum();
    let wts: Vec<f64> = alphas.iter().map(|a| (a - m).exp() / z).collect();
    let proto: Vec<f64> = (0..6).map(|k| wts[0] * s_hats[0].get(0, k) + wts[1] * s_hats[1].get(0, k)).collect();
    for (k, v) in proto.iter().enumerate() {
        assert_abs_diff_eq!(g.value(out.prototype).get(0, k), *v, epsilon = 1e-12);
    }
    assert_abs_diff_eq!(g.value(out.score).item(), pair_score_oracle(&proto, &qc, &w9, &w10), epsilon = 1e-12);
    // The prototype is a convex combination of the enhanced supports.
    for (k, v) in proto.iter().enumerate() {
        let lo = s_hats[0].get(0, k).min(s_hats[1].get(0, k));
        let hi = s_hats[0].get(0, k).max(s_hats[1].get(0, k));
        assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
    }
}

#[test]
fn zero_w9_gives_uniform_prediction() {
    let cfg = tiny_config();
    let mut model = Model::new(cfg.clone(), 7).unwrap();
    model.params.set("cls.w9", &Tensor::zeros(1, cfg.hidden));
    let inst = instances(5, &cfg, 8);
    let classes = vec![inst[1..3].to_vec(), inst[3..5].to_vec()];
    let out = model.score(&inst[0], &classes).unwrap();
    assert_eq!(out.scores, vec![0.0, 0.0]);
    assert_eq!(out.probabilities, vec![0.5, 0.5]);
    assert_eq!(out.predicted(), 0);
    assert_abs_diff_eq!(classification_loss(&out, 1).unwrap(), 2f64.ln(), epsilon = 1e-15);
}

#[test]
fn softmax_matches_three_class_oracle() {
    let s = ClassScore::from_scores(vec![1.0, 2.0, 0.5]);
    let z = 1f64.exp() + 2f64.exp() + 0.5f64.exp();
    assert_abs_diff_eq!(s.probabilities[0], 1f64.exp() / z, epsilon = 1e-15);
    assert_abs_diff_eq!(s.probabilities[1], 2f64.exp() / z, epsilon = 1e-15);
    assert_abs_diff_eq!(s.probabilities[2], 0.5f64.exp() / z, epsilon = 1e-15);
    assert_eq!(s.predicted(), 1);
}

#[test]
fn loss_of_point_seven_probability() {
    let s = ClassScore::from_scores(vec![0.7f64.ln(), 0.3f64.ln()]);
    assert_abs_diff_eq!(classification_loss(&s, 0).unwrap(), 0.3567, epsilon = 1e-4);
    assert!(classification_loss(&s, 2).is_err());
}

#[test]
fn graph_loss_matches_value_loss() {
    let scores = vec![0.3, -1.2, 2.5];
    let mut g = Graph::new();
    let v = g.constant(Tensor::row_vector(scores.clone()));
    let l = classification_loss_var(&mut g, v, 1).unwrap();
    let expected = classification_loss(&ClassScore::from_scores(scores), 1).unwrap();
    assert_abs_diff_eq!(g.value(l).item(), expected, epsilon = 1e-12);
    assert!(classification_loss_var(&mut g, v, 3).is_err());
}

#[test]
fn large_scores_stay_finite() {
    let s = ClassScore::from_scores(vec![1000.0, -1000.0]);
    assert_eq!(s.probabilities, vec![1.0, 0.0]);
    let mut g = Graph::new();
    let v = g.constant(Tensor::row_vector(vec![1000.0, -1000.0]));
    let l = classification_loss_var(&mut g, v, 1).unwrap();
    assert_abs_diff_eq!(g.value(l).item(), 2000.0, epsilon = 1e-9);
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    assert_eq!(argmax(&[2.0, 2.0]), 0);
}

#[test]
fn classify_needs_two_classes_and_supports() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 9).unwrap();
    let inst = instances(3, &cfg, 10);
    assert!(model.score(&inst[0], &[inst[1..].to_vec()]).is_err());
    assert!(model.score(&inst[0], &[inst[1..2].to_vec(), vec![]]).is_err());
}

#[test]
fn full_pipeline_passes_gradient_check() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 11).unwrap();
    let mut r = rng(12);
    let xs: Vec<Tensor> = (0..5).map(|i| random(2 + i % 3, cfg.embed_dim, &mut r)).collect();
    let report = gradient_check(
        &model.params,
        |g, v| {
            let vars = ModelVars::resolve(g, &model.params, v, &cfg);
            let enc: Vec<Encoded> = xs
                .iter()
                .map(|x| {
                    let xv = g.constant(x.clone());
                    smanet_core::encoder::encode(g, xv, &vars.encoder)
                })
                .collect();
            let classes = vec![enc[1..3].to_vec(), enc[3..5].to_vec()];
            let scores = classify_episode(g, &enc[0], &classes, &vars.scorer).unwrap();
            classification_loss_var(g, scores, 1).unwrap()
        },
        &GradCheckOptions { min_coords: 128, ..Default::default() },
    )
    .unwrap();
    assert!(report.passed());
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(scores in prop::collection::vec(-20.0f64..20.0, 2..6), shift in -50.0f64..50.0) {
        let a = ClassScore::from_scores(scores.clone());
        let b = ClassScore::from_scores(scores.iter().map(|s| s + shift).collect());
        for (x, y) in a.probabilities.iter().zip(&b.probabilities) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(a.predicted(), b.predicted());
    }
}
