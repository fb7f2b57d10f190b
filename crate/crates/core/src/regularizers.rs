//! Attention regularizers: head diversity, word coverage and cross-instance
//! head-distribution alignment.
//!
//! Each penalty has a graph form used in training and a value form over plain
//! attention matrices.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Additive smoothing applied before comparing word distributions.
pub const SMOOTHING_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Upper bound on each pairwise divergence; `f64::INFINITY` disables it.
    pub kl_cap: f64,
}

impl Default for RegularizerWeights {
    fn default() -> Self {
        Self { alpha: 1e-4, beta: 1e-5, gamma: 0.01, kl_cap: 10.0 }
    }
}

impl RegularizerWeights {
    pub fn none() -> Self {
        Self { alpha: 0.0, beta: 0.0, gamma: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Train("regularizer weights must be non-negative".into()));
        }
        if self.kl_cap.is_nan() || self.kl_cap <= 0.0 {
            return Err(Error::Train("kl_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Word-level attention mass averaged over heads.
#[derive(Clone, Debug, PartialEq)]
pub struct WordAttentionDistribution(pub Vec<f64>);

/// `‖A Aᵀ − I‖²_F`.
pub fn self_attn_penalty_var(g: &mut Graph, a: Var) -> Var {
    let r = g.value(a).rows();
    let at = g.transpose(a);
    let gram = g.matmul(a, at);
    let eye = g.constant(Tensor::identity(r));
    let diff = g.sub(gram, eye);
    let sq = g.mul(diff, diff);
    g.sum(sq)
}

/// `(Σ_i A_i) / r` as a `1 × T` row.
pub fn word_distribution_var(g: &mut Graph, a: Var) -> Var {
    g.mean_rows(a)
}

/// `D_KL(p ‖ U_T)` for the head-averaged word distribution `p`.
pub fn uniform_penalty_var(g: &mut Graph, a: Var) -> Var {
    let t = g.value(a).cols();
    let p = word_distribution_var(g, a);
    let u = g.constant(Tensor::filled(1, t, 1.0 / t as f64));
    g.kl_div(p, u)
}

fn smoothed(g: &mut Graph, p: Var, width: usize) -> Var {
    let t = g.value(p).cols();
    let padded = if t < width {
        let zeros = g.constant(Tensor::zeros(1, width - t));
        g.concat_cols(&[p, zeros])
    } else {
        p
    };
    let eps = g.constant(Tensor::filled(1, width, SMOOTHING_EPS));
    let lifted = g.add(padded, eps);
    let total = g.row_sums(lifted);
    g.div_rows_guarded(lifted, total)
}

/// Signed, capped divergence between the word distributions of a query and a
/// support instance: `+d` for the same label, `−d` otherwise.
pub fn discr_penalty_var(g: &mut Graph, a_q: Var, a_s: Var, same_label: bool, kl_cap: f64) -> Var {
    let width = g.value(a_q).cols().max(g.value(a_s).cols());
    let pq = word_distribution_var(g, a_q);
    let ps = word_distribution_var(g, a_s);
    let pq = smoothed(g, pq, width);
    let ps = smoothed(g, ps, width);
    let kl = g.kl_div(pq, ps);
    let d = g.clamp_max(kl, kl_cap);
    if same_label {
        d
    } else {
        g.scale(d, -1.0)
    }
}

/// Mean of [`discr_penalty_var`] over every (query, support) pair.
///
/// `queries` carries each query's attention with its predicted class and
/// `supports` each support's attention with its true class.
pub fn episode_discr_loss_var(
    g: &mut Graph,
    queries: &[(Var, usize)],
    supports: &[(Var, usize)],
    kl_cap: f64,
) -> Result<Var> {
    if queries.is_empty() || supports.is_empty() {
        return Err(Error::Episode("discriminative loss needs at least one query and one support".into()));
    }
    let mut terms = Vec::with_capacity(queries.len() * supports.len());
    for &(aq, pred) in queries {
        for &(as_, label) in supports {
            terms.push(discr_penalty_var(g, aq, as_, pred == label, kl_cap));
        }
    }
    Ok(g.mean_scalars(&terms))
}

fn eval1(a: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(a.clone());
    let out = f(&mut g, v);
    g.value(out).item()
}

pub fn self_attn_penalty(a: &Tensor) -> f64 {
    eval1(a, self_attn_penalty_var)
}

pub fn word_distribution(a: &Tensor) -> WordAttentionDistribution {
    let mut g = Graph::new();
    let v = g.constant(a.clone());
    let p = word_distribution_var(&mut g, v);
    WordAttentionDistribution(g.value(p).data().to_vec())
}

pub fn uniform_penalty(a: &Tensor) -> f64 {
    eval1(a, uniform_penalty_var)
}

pub fn discr_penalty(a_q: &Tensor, a_s: &Tensor, same_label: bool, kl_cap: f64) -> f64 {
    let mut g = Graph::new();
    let q = g.constant(a_q.clone());
    let s = g.constant(a_s.clone());
    let d = discr_penalty_var(&mut g, q, s, same_label, kl_cap);
    g.value(d).item()
}

/// Value form of [`episode_discr_loss_var`].
pub fn episode_discr_loss(queries: &[(&Tensor, usize)], supports: &[(&Tensor, usize)], kl_cap: f64) -> Result<f64> {
    let mut g = Graph::new();
    let q: Vec<(Var, usize)> = queries.iter().map(|(a, l)| (g.constant((*a).clone()), *l)).collect();
    let s: Vec<(Var, usize)> = supports.iter().map(|(a, l)| (g.constant((*a).clone()), *l)).collect();
    let loss = episode_discr_loss_var(&mut g, &q, &s, kl_cap)?;
    Ok(g.value(loss).item())
}
