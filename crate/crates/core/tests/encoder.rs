mod common;

use approx::assert_abs_diff_eq;
use common::*;
use proptest::prelude::*;
use smanet_core::diffcore::{gradient_check, GradCheckOptions, Graph, ParamStore, Tensor, Var};
use smanet_core::encoder::{attend_heads, encode, run_bilstm, EncoderVars};
use smanet_core::lstm::LstmVars;

struct Dims {
    dw: usize,
    dh: usize,
    da: usize,
    r: usize,
}

fn encoder_store(d: &Dims, seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut p = ParamStore::new();
    for dir in ["fwd", "bwd"] {
        p.insert(&format!("{dir}.wx"), random(d.dw, 4 * d.dh, &mut r));
        p.insert(&format!("{dir}.wh"), random(d.dh, 4 * d.dh, &mut r));
        p.insert(&format!("{dir}.b"), random(1, 4 * d.dh, &mut r));
    }
    p.insert("ws1", random(d.da, 2 * d.dh, &mut r));
    p.insert("ws2", random(d.r, d.da, &mut r));
    p
}

fn encoder_vars(v: &[Var], dh: usize) -> EncoderVars {
    EncoderVars {
        fwd: LstmVars { wx: v[0], wh: v[1], b: v[2], hidden: dh },
        bwd: LstmVars { wx: v[3], wh: v[4], b: v[5], hidden: dh },
        ws1: v[6],
        ws2: v[7],
    }
}

fn bilstm_values(p: &ParamStore, x: &Tensor, dh: usize) -> (Tensor, Tensor, Tensor) {
    let mut g = Graph::new();
    let v = p.bind(&mut g);
    let enc = encoder_vars(&v, dh);
    let xv = g.constant(x.clone());
    let h = run_bilstm(&mut g, xv, &enc);
    let (a, m) = attend_heads(&mut g, h, &enc);
    (g.value(h).clone(), g.value(a).clone(), g.value(m).clone())
}

fn h_oracle(p: &ParamStore, x: &Tensor) -> Vec<Vec<f64>> {
    let t = |n: &str| p.get(n).unwrap();
    let f = lstm_oracle(x, &t("fwd.wx"), &t("fwd.wh"), &t("fwd.b"), false);
    let b = lstm_oracle(x, &t("bwd.wx"), &t("bwd.wh"), &t("bwd.b"), true);
    f.into_iter().zip(b).map(|(mut a, b)| {
        a.extend(b);
        a
    }).collect()
}

#[test]
fn bilstm_matches_scalar_oracle() {
    let d = Dims { dw: 4, dh: 3, da: 5, r: 2 };
    let p = encoder_store(&d, 1);
    let x = random(3, d.dw, &mut rng(2));
    let (h, _, _) = bilstm_values(&p, &x, d.dh);
    assert_eq!(h.shape(), [3, 2 * d.dh]);
    for (t, row) in h_oracle(&p, &x).iter().enumerate() {
        for (a, b) in h.row(t).iter().zip(row) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}

#[test]
fn bilstm_single_token_uses_zero_initial_state() {
    let d = Dims { dw: 3, dh: 2, da: 2, r: 1 };
    let p = encoder_store(&d, 3);
    let x = random(1, d.dw, &mut rng(4));
    let (h, _, _) = bilstm_values(&p, &x, d.dh);
    let oracle = h_oracle(&p, &x);
    for (a, b) in h.row(0).iter().zip(&oracle[0]) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn zero_lstm_parameters_give_zero_states() {
    let d = Dims { dw: 3, dh: 4, da: 2, r: 2 };
    let mut p = encoder_store(&d, 5);
    for name in ["fwd.wx", "fwd.wh", "fwd.b", "bwd.wx", "bwd.wh", "bwd.b"] {
        let z = Tensor::zeros(p.get(name).unwrap().rows(), p.get(name).unwrap().cols());
        p.set(name, &z);
    }
    let x = random(5, d.dw, &mut rng(6));
    let (h, a, _) = bilstm_values(&p, &x, d.dh);
    assert!(h.data().iter().all(|&v| v == 0.0));
    // H = 0 makes every head uniform over words.
    assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
}

#[test]
fn zero_ws2_gives_uniform_attention_and_mean_heads() {
    let d = Dims { dw: 3, dh: 2, da: 4, r: 3 };
    let mut p = encoder_store(&d, 7);
    p.set("ws2", &Tensor::zeros(d.r, d.da));
    let x = random(4, d.dw, &mut rng(8));
    let (h, a, m) = bilstm_values(&p, &x, d.dh);
    assert!(a.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    for i in 0..d.r {
        for c in 0..2 * d.dh {
            let mean: f64 = (0..4).map(|t| h.get(t, c)).sum::<f64>() / 4.0;
            assert_abs_diff_eq!(m.get(i, c), mean, epsilon = 1e-12);
        }
    }
}

#[test]
fn single_word_attention_is_all_ones() {
    let d = Dims { dw: 3, dh: 2, da: 4, r: 3 };
    let p = encoder_store(&d, 9);
    let x = random(1, d.dw, &mut rng(10));
    let (h, a, m) = bilstm_values(&p, &x, d.dh);
    assert_eq!(a.shape(), [3, 1]);
    assert!(a.data().iter().all(|&v| v == 1.0));
    for i in 0..3 {
        assert_eq!(m.row(i), h.row(0));
    }
}

#[test]
fn attention_matches_dense_oracle() {
    let d = Dims { dw: 3, dh: 2, da: 4, r: 2 };
    let p = encoder_store(&d, 11);
    let x = random(3, d.dw, &mut rng(12));
    let (h, a, m) = bilstm_values(&p, &x, d.dh);
    let ws1 = p.get("ws1").unwrap();
    let ws2 = p.get("ws2").unwrap();
    // logits[i][t] = Σ_j ws2[i][j] · tanh(Σ_k ws1[j][k] · H[t][k])
    for i in 0..d.r {
        let logits: Vec<f64> = (0..3)
            .map(|t| {
                (0..d.da)
                    .map(|j| ws2.get(i, j) * (0..2 * d.dh).map(|k| ws1.get(j, k) * h.get(t, k)).sum::<f64>().tanh())
                    .sum()
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for t in 0..3 {
            assert_abs_diff_eq!(a.get(i, t), logits[t].exp() / z, epsilon = 1e-12);
        }
        for c in 0..2 * d.dh {
            let expected: f64 = (0..3).map(|t| a.get(i, t) * h.get(t, c)).sum();
            assert_abs_diff_eq!(m.get(i, c), expected, epsilon = 1e-12);
        }
    }
}

#[test]
fn token_permutation_with_zero_lstm_weights_permutes_attention_columns() {
    let d = Dims { dw: 3, dh: 2, da: 3, r: 2 };
    let mut p = encoder_store(&d, 13);
    for name in ["fwd.wx", "fwd.wh", "fwd.b", "bwd.wx", "bwd.wh", "bwd.b"] {
        let t = p.get(name).unwrap();
        p.set(name, &Tensor::zeros(t.rows(), t.cols()));
    }
    let x = random(4, d.dw, &mut rng(14));
    let perm = [2usize, 0, 3, 1];
    let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
    let (_, a, _) = bilstm_values(&p, &x, d.dh);
    let (_, ap, _) = bilstm_values(&p, &xp, d.dh);
    for i in 0..d.r {
        for (col, &src) in perm.iter().enumerate() {
            assert_abs_diff_eq!(ap.get(i, col), a.get(i, src), epsilon = 1e-12);
        }
    }
}

#[test]
fn encoder_passes_gradient_check() {
    let d = Dims { dw: 3, dh: 3, da: 4, r: 2 };
    let p = encoder_store(&d, 15);
    let x = random(4, d.dw, &mut rng(16));
    let report = gradient_check(
        &p,
        |g, v| {
            let enc = encoder_vars(v, d.dh);
            let xv = g.constant(x.clone());
            let e = encode(g, xv, &enc);
            let a = project(g, e.a, 1);
            let m = project(g, e.m, 2);
            g.add(a, m)
        },
        &GradCheckOptions { min_coords: 200, ..Default::default() },
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{}", report.max_rel_error());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_is_row_stochastic_and_m_equals_ah(seed in 0u64..10_000, t in 1usize..7) {
        let d = Dims { dw: 3, dh: 2, da: 3, r: 3 };
        let p = encoder_store(&d, seed);
        let x = random(t, d.dw, &mut rng(seed + 1));
        let (h, a, m) = bilstm_values(&p, &x, d.dh);
        for i in 0..d.r {
            let s: f64 = a.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(a.row(i).iter().all(|&v| v >= 0.0));
        }
        prop_assert!(a.matmul(&h).max_abs_diff(&m) < 1e-12);
    }
}
