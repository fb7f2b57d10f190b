//! Finite-difference checks of every tape primitive in isolation, plus the
//! closed-form examples for `forward_backward`.

use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smanet_core::diffcore::{
    compare_gradients, forward_backward, gradient_check, DiffError, GradCheckOptions, Graph, ParamStore, Tensor, Var,
};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Reduces any tensor to a scalar through a fixed random projection so every
/// output element carries a distinct gradient.
fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(v).shape();
    let w = g.constant(random(shape[0], shape[1], &mut rng));
    let m = g.mul(v, w);
    g.sum(m)
}

fn store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for (name, r, c) in shapes {
        p.insert(name, random(*r, *c, &mut rng));
    }
    p
}

fn check(p: &ParamStore, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let opts = GradCheckOptions { rel_tol: 1e-5, ..Default::default() };
    let report = gradient_check(p, f, &opts).expect("gradient check");
    assert!(report.max_rel_error() < 1e-5, "max rel error {}", report.max_rel_error());
}

#[test]
fn quadratic_gradient_is_identity() {
    let p = store(&[("p", 3, 4)], 1);
    let (loss, grad) = forward_backward(&p, |g, v| {
        let sq = g.mul(v[0], v[0]);
        let s = g.sum(sq);
        g.scale(s, 0.5)
    })
    .unwrap();
    let expected: f64 = p.flat().iter().map(|x| 0.5 * x * x).sum();
    assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
    for (a, b) in grad.iter().zip(p.flat()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
    let report = gradient_check(
        &p,
        |g, v| {
            let sq = g.mul(v[0], v[0]);
            let s = g.sum(sq);
            g.scale(s, 0.5)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-6);
}

#[test]
fn constant_loss_has_zero_gradient() {
    let p = store(&[("p", 2, 2)], 2);
    let (loss, grad) = forward_backward(&p, |g, _| g.constant(Tensor::scalar(3.5))).unwrap();
    assert_eq!(loss, 3.5);
    assert!(grad.iter().all(|&x| x == 0.0));
}

#[test]
fn softmax_cross_entropy_matches_closed_form() {
    let mut p = ParamStore::new();
    p.insert("logits", Tensor::row_vector(vec![0.3, -1.2]));
    let (loss, grad) = forward_backward(&p, |g, v| {
        let s = g.softmax_rows(v[0]);
        let l = g.log(s);
        let pick = g.pick(l, 0, 1);
        g.scale(pick, -1.0)
    })
    .unwrap();
    let z = 0.3f64.exp() + (-1.2f64).exp();
    let probs = [0.3f64.exp() / z, (-1.2f64).exp() / z];
    assert_abs_diff_eq!(loss, -probs[1].ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(grad[0], probs[0], epsilon = 1e-12);
    assert_abs_diff_eq!(grad[1], probs[1] - 1.0, epsilon = 1e-12);
}

#[test]
fn corrupted_gradient_fails_the_check() {
    let p = store(&[("p", 2, 3)], 3);
    let f = |g: &mut Graph, v: &[Var]| {
        let t = g.tanh(v[0]);
        project(g, t, 9)
    };
    let (_, mut grad) = forward_backward(&p, f).unwrap();
    grad[4] *= 1.5;
    let err = compare_gradients(&p, f, &grad, &GradCheckOptions::default()).unwrap_err();
    match err {
        DiffError::GradientMismatch { name, index, .. } => {
            assert_eq!(name, "p");
            assert_eq!(index, 4);
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn nonfinite_aborts_forward_backward() {
    let mut p = ParamStore::new();
    p.insert("p", Tensor::row_vector(vec![-1.0]));
    let err = forward_backward(&p, |g, v| {
        let l = g.log(v[0]);
        g.sum(l)
    })
    .unwrap_err();
    assert!(matches!(err, DiffError::NonFinite { op: "log" }));
}

#[test]
fn matmul_add_sub_mul_scale() {
    let p = store(&[("a", 3, 4), ("b", 4, 2), ("c", 3, 2), ("row", 1, 2)], 4);
    check(&p, |g, v| {
        let m = g.matmul(v[0], v[1]);
        let s = g.add(m, v[2]);
        let d = g.sub(s, v[2]);
        let e = g.mul(d, v[2]);
        let f = g.scale(e, -1.7);
        let r = g.add_row(f, v[3]);
        project(g, r, 11)
    });
}

#[test]
fn pointwise_nonlinearities() {
    let p = store(&[("x", 3, 3)], 5);
    check(&p, |g, v| {
        let a = g.tanh(v[0]);
        let b = g.sigmoid(v[0]);
        let c = g.exp(v[0]);
        let sq = g.mul(v[0], v[0]);
        let one = g.constant(Tensor::filled(3, 3, 0.5));
        let pos = g.add(sq, one);
        let d = g.log(pos);
        let e = g.relu(v[0]);
        let all = g.concat_cols(&[a, b, c, d, e]);
        project(g, all, 12)
    });
}

#[test]
fn softmax_transpose_reshape() {
    let p = store(&[("x", 3, 5)], 6);
    check(&p, |g, v| {
        let s = g.softmax_rows(v[0]);
        let t = g.transpose(s);
        let r = g.reshape(t, 1, 15);
        project(g, r, 13)
    });
}

#[test]
fn structural_ops() {
    let p = store(&[("x", 4, 3), ("y", 2, 3)], 7);
    check(&p, |g, v| {
        let rows = g.concat_rows(&[v[0], v[1]]);
        let sl = g.slice_rows(rows, 1, 4);
        let sc = g.slice_cols(sl, 1, 2);
        let gathered = g.gather_rows(v[0], &[3, 0, 0, 2]);
        let rs = g.row_sums(gathered);
        let mr = g.mean_rows(sc);
        let a = project(g, rs, 14);
        let b = project(g, mr, 15);
        let c = g.pick(v[1], 1, 2);
        g.add_scalars(&[a, b, c])
    });
}

#[test]
fn group_max_routes_to_winner() {
    let p = store(&[("x", 6, 4)], 8);
    check(&p, |g, v| {
        let m = g.group_max(v[0], 3);
        project(g, m, 16)
    });
}

#[test]
fn guarded_division() {
    let p = store(&[("x", 3, 4), ("s", 3, 1)], 9);
    check(&p, |g, v| {
        let d = g.div_rows_guarded(v[0], v[1]);
        project(g, d, 17)
    });
}

#[test]
fn cosine_and_multi_perspective() {
    let p = store(&[("x", 3, 5), ("y", 3, 5), ("w", 4, 5)], 10);
    check(&p, |g, v| {
        let c = g.cosine_rows(v[0], v[1]);
        let m = g.multi_perspective(v[0], v[1], v[2]);
        let a = project(g, c, 18);
        let b = project(g, m, 19);
        g.add(a, b)
    });
}

#[test]
fn kl_divergence_and_clamp() {
    let p = store(&[("a", 1, 5), ("b", 1, 5)], 11);
    check(&p, |g, v| {
        let pa = g.softmax_rows(v[0]);
        let pb = g.softmax_rows(v[1]);
        let kl = g.kl_div(pa, pb);
        let capped = g.clamp_max(kl, 1e9);
        let flat = g.clamp_max(kl, -1.0);
        let s = g.add(capped, flat);
        g.scale(s, 2.0)
    });
}

#[test]
fn clamped_branch_has_zero_gradient() {
    let p = store(&[("a", 1, 3)], 12);
    let (_, grad) = forward_backward(&p, |g, v| {
        let s = g.sum(v[0]);
        g.clamp_max(s, -100.0)
    })
    .unwrap();
    assert!(grad.iter().all(|&x| x == 0.0));
}

#[test]
fn all_coordinates_checked_when_few() {
    let p = store(&[("a", 2, 3)], 13);
    let report = gradient_check(&p, |g, v| project(g, v[0], 1), &GradCheckOptions::default()).unwrap();
    assert_eq!(report.coords.len(), 6);
}

#[test]
fn at_least_min_coords_checked_and_every_tensor_covered() {
    let p = store(&[("a", 10, 10), ("b", 1, 3)], 14);
    let report = gradient_check(
        &p,
        |g, v| {
            let a = project(g, v[0], 1);
            let b = project(g, v[1], 2);
            g.add(a, b)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.coords.len() >= 64);
    assert!(report.coords.iter().any(|c| c.name == "b"));
}
