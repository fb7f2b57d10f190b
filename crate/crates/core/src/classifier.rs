//! Attentive instance aggregation, class matching and the episode
//! classification loss.

use crate::diffcore::{Graph, Tensor, Var};
use crate::encoder::Encoded;
use crate::error::{Error, Result};
use crate::matching::{enhance_pair, AggregatorVars, MatchSettings, PerspectiveVars};

/// `W₉` and `W₁₀`, shared by instance aggregation and class matching.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    /// `1 × d_h`
    pub w9: Var,
    /// `d_h × 4d_h`
    pub w10: Var,
    pub(crate) w9_t: Var,
    pub(crate) w10_t: Var,
}

impl ClassifierVars {
    pub fn new(g: &mut Graph, w9: Var, w10: Var) -> Self {
        let w9_t = g.transpose(w9);
        let w10_t = g.transpose(w10);
        Self { w9, w10, w9_t, w10_t }
    }
}

/// Everything the scorer needs besides the encoded instances.
#[derive(Clone, Copy, Debug)]
pub struct ScorerVars {
    pub persp: PerspectiveVars,
    pub agg: AggregatorVars,
    pub cls: ClassifierVars,
    pub settings: MatchSettings,
}

/// `W₉ᵀ ReLU(W₁₀ [s ⊕ q])` for `1 × 2d_h` rows `s` and `q`.
pub fn pair_score(g: &mut Graph, s: Var, q: Var, cls: &ClassifierVars) -> Var {
    let x = g.concat_cols(&[s, q]);
    let hidden = g.matmul(x, cls.w10_t);
    let act = g.relu(hidden);
    g.matmul(act, cls.w9_t)
}

pub struct ClassScoreVars {
    pub score: Var,
    /// Attention-weighted support prototype.
    pub prototype: Var,
    /// Query representation pooled over the class's supports.
    pub query: Var,
    /// Softmax weights over the supports (`1 × K`).
    pub weights: Var,
}

/// Scores one class from its `K` supports.
pub fn score_class(g: &mut Graph, query: &Encoded, supports: &[Encoded], vars: &ScorerVars) -> Result<ClassScoreVars> {
    if supports.is_empty() {
        return Err(Error::Shape("score_class needs at least one support".into()));
    }
    let mut s_hats = Vec::with_capacity(supports.len());
    let mut q_hats = Vec::with_capacity(supports.len());
    for s in supports {
        let (sh, qh) = enhance_pair(g, s, query, &vars.persp, &vars.agg, &vars.settings);
        s_hats.push(sh);
        q_hats.push(qh);
    }
    let q_stack = g.concat_rows(&q_hats);
    let q_c = g.mean_rows(q_stack);
    let alphas: Vec<Var> = s_hats.iter().map(|&sh| pair_score(g, sh, q_c, &vars.cls)).collect();
    let alpha_row = g.concat_cols(&alphas);
    let weights = g.softmax_rows(alpha_row);
    let s_stack = g.concat_rows(&s_hats);
    let prototype = g.matmul(weights, s_stack);
    let score = pair_score(g, prototype, q_c, &vars.cls);
    Ok(ClassScoreVars { score, prototype, query: q_c, weights })
}

/// `1 × C` row of class scores.
pub fn classify_episode(g: &mut Graph, query: &Encoded, classes: &[Vec<Encoded>], vars: &ScorerVars) -> Result<Var> {
    if classes.len() < 2 {
        return Err(Error::Shape(format!("classification needs at least 2 classes, got {}", classes.len())));
    }
    let scores = classes
        .iter()
        .map(|supports| score_class(g, query, supports, vars).map(|c| c.score))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.concat_cols(&scores))
}

/// `−log softmax(scores)[target]`, computed with the max-shift.
pub fn classification_loss_var(g: &mut Graph, scores: Var, target: usize) -> Result<Var> {
    let c = g.value(scores).cols();
    if target >= c {
        return Err(Error::Shape(format!("label index {target} out of range for {c} classes")));
    }
    let m = g.value(scores).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shift = g.constant(Tensor::filled(1, c, m));
    let shifted = g.sub(scores, shift);
    let e = g.exp(shifted);
    let z = g.sum(e);
    let log_z = g.log(z);
    let picked = g.pick(shifted, 0, target);
    Ok(g.sub(log_z, picked))
}

/// Class scores with their softmax probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ClassScore {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        Self { probabilities: exps.iter().map(|e| e / z).collect(), scores }
    }

    /// Arg-max class, lowest index on exact ties.
    pub fn predicted(&self) -> usize {
        argmax(&self.scores)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `−ln p[target]`.
pub fn classification_loss(scores: &ClassScore, target: usize) -> Result<f64> {
    let p = scores
        .probabilities
        .get(target)
        .ok_or_else(|| Error::Shape(format!("label index {target} out of range for {} classes", scores.probabilities.len())))?;
    Ok(-p.ln())
}
