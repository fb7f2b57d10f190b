#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smanet_core::diffcore::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Row-stochastic `rows × cols` matrix with strictly positive entries.
pub fn stochastic(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(0.05..1.0)).collect());
    for r in 0..rows {
        let s: f64 = t.row(r).iter().sum();
        t.row_mut(r).iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// Scalar reduction through a fixed random projection.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let shape = g.value(v).shape();
    let w = g.constant(random(shape[0], shape[1], &mut r));
    let m = g.mul(v, w);
    g.sum(m)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar-loop LSTM: returns hidden states indexed by input row.
pub fn lstm_oracle(xs: &Tensor, wx: &Tensor, wh: &Tensor, b: &Tensor, reverse: bool) -> Vec<Vec<f64>> {
    let n = xs.rows();
    let h = wh.rows();
    let mut hs = vec![vec![0.0; h]; n];
    let mut hp = vec![0.0; h];
    let mut cp = vec![0.0; h];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let mut z = vec![0.0; 4 * h];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut acc = b.get(0, j);
            for k in 0..xs.cols() {
                acc += xs.get(t, k) * wx.get(k, j);
            }
            for k in 0..h {
                acc += hp[k] * wh.get(k, j);
            }
            *zj = acc;
        }
        let mut hn = vec![0.0; h];
        let mut cn = vec![0.0; h];
        for u in 0..h {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[h + u]);
            let g = z[2 * h + u].tanh();
            let o = sigmoid(z[3 * h + u]);
            cn[u] = f * cp[u] + i * g;
            hn[u] = o * cn[u].tanh();
        }
        hs[t] = hn.clone();
        hp = hn;
        cp = cn;
    }
    hs
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    dot / (na * nb)
}

/// Per-perspective weighted cosine, computed directly.
pub fn mp_oracle(v1: &[f64], v2: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.rows())
        .map(|k| {
            let a: Vec<f64> = v1.iter().zip(w.row(k)).map(|(x, wk)| x * wk).collect();
            let b: Vec<f64> = v2.iter().zip(w.row(k)).map(|(x, wk)| x * wk).collect();
            cosine(&a, &b)
        })
        .collect()
}
