//! Multi-perspective semantic matching between two encoded instances and the
//! Bi-LSTM that aggregates the match sequence into one vector.
//!
//! Matchers operate on "units": the `r` head rows of `M` at head level, or the
//! `T` rows of `H` for the word-level ablation. Every unit row splits into a
//! forward half `[0, d_h)` and a backward half `[d_h, 2d_h)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::encoder::{Encoded, EncodedInstance};
use crate::lstm::{lstm_scan, LstmVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    HeadWise,
    MaxPool,
    Attentive,
    MaxAttentive,
}

impl Matcher {
    /// Concatenation order of the match vector.
    pub const ORDER: [Matcher; 4] = [Matcher::HeadWise, Matcher::MaxAttentive, Matcher::Attentive, Matcher::MaxPool];

    pub fn as_str(self) -> &'static str {
        match self {
            Matcher::HeadWise => "head_wise",
            Matcher::MaxPool => "max_pool",
            Matcher::Attentive => "attentive",
            Matcher::MaxAttentive => "max_attentive",
        }
    }

    /// Indices of the (forward, backward) perspective matrices, 0-based into W¹…W⁸.
    pub fn weight_indices(self) -> (usize, usize) {
        match self {
            Matcher::HeadWise => (0, 1),
            Matcher::MaxPool => (2, 3),
            Matcher::Attentive => (4, 5),
            Matcher::MaxAttentive => (6, 7),
        }
    }
}

impl FromStr for Matcher {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "head_wise" => Ok(Matcher::HeadWise),
            "max_pool" => Ok(Matcher::MaxPool),
            "attentive" => Ok(Matcher::Attentive),
            "max_attentive" => Ok(Matcher::MaxAttentive),
            other => Err(format!("unknown matcher `{other}`")),
        }
    }
}

/// Enabled subset of the four matchers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatcherSet {
    pub head_wise: bool,
    pub max_pool: bool,
    pub attentive: bool,
    pub max_attentive: bool,
}

impl MatcherSet {
    pub fn all() -> Self {
        Self { head_wise: true, max_pool: true, attentive: true, max_attentive: true }
    }

    pub fn only(m: Matcher) -> Self {
        let mut s = Self { head_wise: false, max_pool: false, attentive: false, max_attentive: false };
        s.set(m, true);
        s
    }

    pub fn contains(&self, m: Matcher) -> bool {
        match m {
            Matcher::HeadWise => self.head_wise,
            Matcher::MaxPool => self.max_pool,
            Matcher::Attentive => self.attentive,
            Matcher::MaxAttentive => self.max_attentive,
        }
    }

    pub fn set(&mut self, m: Matcher, on: bool) {
        match m {
            Matcher::HeadWise => self.head_wise = on,
            Matcher::MaxPool => self.max_pool = on,
            Matcher::Attentive => self.attentive = on,
            Matcher::MaxAttentive => self.max_attentive = on,
        }
    }

    /// Enabled matchers in concatenation order.
    pub fn enabled(&self) -> Vec<Matcher> {
        Matcher::ORDER.into_iter().filter(|m| self.contains(*m)).collect()
    }

    pub fn count(&self) -> usize {
        self.enabled().len()
    }
}

impl fmt::Display for MatcherSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.enabled().iter().map(|m| m.as_str()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for MatcherSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.trim() == "all" {
            return Ok(Self::all());
        }
        let mut set = Self { head_wise: false, max_pool: false, attentive: false, max_attentive: false };
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            set.set(part.parse()?, true);
        }
        if set.count() == 0 {
            return Err("at least one matcher must be enabled".into());
        }
        Ok(set)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchLevel {
    Head,
    Word,
}

impl FromStr for MatchLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "head" => Ok(MatchLevel::Head),
            "word" => Ok(MatchLevel::Word),
            other => Err(format!("unknown match level `{other}` (expected head or word)")),
        }
    }
}

impl fmt::Display for MatchLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchLevel::Head => "head",
            MatchLevel::Word => "word",
        })
    }
}

/// W¹…W⁸, each `l × d_h`.
#[derive(Clone, Copy, Debug)]
pub struct PerspectiveVars {
    pub w: [Var; 8],
}

#[derive(Clone, Copy, Debug)]
pub struct AggregatorVars {
    pub fwd: LstmVars,
    pub bwd: LstmVars,
}

/// Per-direction match sequences on the graph: `n × (#matchers·l)` each.
#[derive(Clone, Copy, Debug)]
pub struct MatchSequence {
    pub forward: Var,
    pub backward: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MatchSettings {
    pub level: MatchLevel,
    pub matchers: MatcherSet,
    pub hidden: usize,
}

/// `m_k = cos(W_k ∘ v1, W_k ∘ v2)` for each row pair of `v1`, `v2`.
pub fn multi_perspective(g: &mut Graph, v1: Var, v2: Var, w: Var) -> Var {
    g.multi_perspective(v1, v2, w)
}

/// Row `i` matched against target row `partner[i]`.
pub fn paired_match(g: &mut Graph, source: Var, target: Var, partner: &[usize], w: Var) -> Var {
    let t = g.gather_rows(target, partner);
    g.multi_perspective(source, t, w)
}

/// Row `i` = elementwise max over all target rows `j` of `f_m(source_i, target_j)`.
pub fn max_pool_match(g: &mut Graph, source: Var, target: Var, w: Var) -> Var {
    let ns = g.value(source).rows();
    let nt = g.value(target).rows();
    let s_idx: Vec<usize> = (0..ns).flat_map(|i| std::iter::repeat_n(i, nt)).collect();
    let t_idx: Vec<usize> = (0..ns).flat_map(|_| 0..nt).collect();
    let s = g.gather_rows(source, &s_idx);
    let t = g.gather_rows(target, &t_idx);
    let all = g.multi_perspective(s, t, w);
    g.group_max(all, nt)
}

/// Cosine-weighted mean of target rows for every source row (guarded denominator).
pub fn representatives(g: &mut Graph, source: Var, target: Var) -> Var {
    let ns = g.value(source).rows();
    let nt = g.value(target).rows();
    let s_idx: Vec<usize> = (0..ns).flat_map(|i| std::iter::repeat_n(i, nt)).collect();
    let t_idx: Vec<usize> = (0..ns).flat_map(|_| 0..nt).collect();
    let s = g.gather_rows(source, &s_idx);
    let t = g.gather_rows(target, &t_idx);
    let beta = g.cosine_rows(s, t);
    let beta = g.reshape(beta, ns, nt);
    let weighted = g.matmul(beta, target);
    let total = g.row_sums(beta);
    g.div_rows_guarded(weighted, total)
}

/// Source row `i` matched against its own representative.
pub fn attentive_match(g: &mut Graph, source: Var, reps: Var, w: Var) -> Var {
    g.multi_perspective(source, reps, w)
}

/// Source row `i` matched against every representative, max-pooled.
pub fn max_attentive_match(g: &mut Graph, source: Var, reps: Var, w: Var) -> Var {
    max_pool_match(g, source, reps, w)
}

fn units(enc: &Encoded, level: MatchLevel) -> Var {
    match level {
        MatchLevel::Head => enc.m,
        MatchLevel::Word => enc.h,
    }
}

/// Target row compared by the head-wise (or word-wise) matcher for each
/// source row, per direction.
fn partners(level: MatchLevel, ns: usize, nt: usize) -> (Vec<usize>, Vec<usize>) {
    match level {
        MatchLevel::Head => ((0..ns).collect(), (0..ns).collect()),
        MatchLevel::Word => (vec![nt - 1; ns], vec![0; ns]),
    }
}

/// Assembles the enabled matchers for `source → target` in the order
/// head-wise ⊕ max-attentive ⊕ attentive ⊕ max-pooling.
pub fn match_all(
    g: &mut Graph,
    source: &Encoded,
    target: &Encoded,
    persp: &PerspectiveVars,
    settings: &MatchSettings,
) -> MatchSequence {
    let su = units(source, settings.level);
    let tu = units(target, settings.level);
    let ns = g.value(su).rows();
    let nt = g.value(tu).rows();
    if settings.level == MatchLevel::Head {
        assert_eq!(ns, nt, "head counts differ between instances");
    }
    let d = settings.hidden;
    let (fwd_partner, bwd_partner) = partners(settings.level, ns, nt);
    let mut out = [Vec::new(), Vec::new()];
    for (dir, start) in [(0usize, 0usize), (1, d)] {
        let s = g.slice_cols(su, start, d);
        let t = g.slice_cols(tu, start, d);
        let needs_reps = settings.matchers.attentive || settings.matchers.max_attentive;
        let reps = needs_reps.then(|| representatives(g, s, t));
        for m in settings.matchers.enabled() {
            let (wf, wb) = m.weight_indices();
            let w = persp.w[if dir == 0 { wf } else { wb }];
            let block = match m {
                Matcher::HeadWise => {
                    let partner = if dir == 0 { &fwd_partner } else { &bwd_partner };
                    paired_match(g, s, t, partner, w)
                }
                Matcher::MaxPool => max_pool_match(g, s, t, w),
                Matcher::Attentive => attentive_match(g, s, reps.expect("computed above"), w),
                Matcher::MaxAttentive => max_attentive_match(g, s, reps.expect("computed above"), w),
            };
            out[dir].push(block);
        }
    }
    let [f, b] = out;
    MatchSequence { forward: g.concat_cols(&f), backward: g.concat_cols(&b) }
}

/// Final forward state over rows `1..n` ⊕ final backward state over rows `n..1`.
pub fn aggregate(g: &mut Graph, seq: &MatchSequence, agg: &AggregatorVars) -> Var {
    let f = lstm_scan(g, seq.forward, &agg.fwd, false);
    let b = lstm_scan(g, seq.backward, &agg.bwd, true);
    let last = *f.last().expect("non-empty sequence");
    g.concat_cols(&[last, b[0]])
}

/// `(Ŝ, Q̂)`: each side matched against the other and aggregated with shared weights.
pub fn enhance_pair(
    g: &mut Graph,
    support: &Encoded,
    query: &Encoded,
    persp: &PerspectiveVars,
    agg: &AggregatorVars,
    settings: &MatchSettings,
) -> (Var, Var) {
    let s_seq = match_all(g, support, query, persp, settings);
    let q_seq = match_all(g, query, support, persp, settings);
    let s_hat = aggregate(g, &s_seq, agg);
    let q_hat = aggregate(g, &q_seq, agg);
    (s_hat, q_hat)
}

/// Forward and backward match blocks as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalMatch {
    pub forward: Tensor,
    pub backward: Tensor,
}

fn directional(
    source: &Tensor,
    target: &Tensor,
    w_fwd: &Tensor,
    w_bwd: &Tensor,
    f: impl Fn(&mut Graph, Var, Var, Var) -> Var,
) -> DirectionalMatch {
    let d = source.cols() / 2;
    let mut g = Graph::new();
    let su = g.constant(source.clone());
    let tu = g.constant(target.clone());
    let mut halves = Vec::with_capacity(2);
    for (start, w) in [(0, w_fwd), (d, w_bwd)] {
        let s = g.slice_cols(su, start, d);
        let t = g.slice_cols(tu, start, d);
        let w = g.constant(w.clone());
        let out = f(&mut g, s, t, w);
        halves.push(g.value(out).clone());
    }
    let backward = halves.pop().expect("two halves");
    let forward = halves.pop().expect("two halves");
    DirectionalMatch { forward, backward }
}

/// Head `i` of `s` against head `i` of `q`, with W¹ (forward) and W² (backward).
pub fn head_wise(s: &EncodedInstance, q: &EncodedInstance, w1: &Tensor, w2: &Tensor) -> DirectionalMatch {
    let n = s.m.rows();
    assert_eq!(n, q.m.rows(), "head counts differ");
    let idx: Vec<usize> = (0..n).collect();
    directional(&s.m, &q.m, w1, w2, |g, a, b, w| paired_match(g, a, b, &idx, w))
}

/// Head `i` of `s` against every head of `q`, max-pooled, with W³/W⁴.
pub fn max_pool(s: &EncodedInstance, q: &EncodedInstance, w3: &Tensor, w4: &Tensor) -> DirectionalMatch {
    directional(&s.m, &q.m, w3, w4, max_pool_match)
}

/// Head `i` of `s` against its cosine-weighted representative of `q`, with W⁵/W⁶.
pub fn attentive(s: &EncodedInstance, q: &EncodedInstance, w5: &Tensor, w6: &Tensor) -> DirectionalMatch {
    directional(&s.m, &q.m, w5, w6, |g, a, b, w| {
        let reps = representatives(g, a, b);
        attentive_match(g, a, reps, w)
    })
}

/// Head `i` of `s` against every representative, max-pooled, with W⁷/W⁸.
pub fn max_attentive(s: &EncodedInstance, q: &EncodedInstance, w7: &Tensor, w8: &Tensor) -> DirectionalMatch {
    directional(&s.m, &q.m, w7, w8, |g, a, b, w| {
        let reps = representatives(g, a, b);
        max_attentive_match(g, a, reps, w)
    })
}

/// Word `i` of `s` against the last forward state and the first backward state of `q`.
pub fn word_wise(s: &EncodedInstance, q: &EncodedInstance, w1: &Tensor, w2: &Tensor) -> DirectionalMatch {
    let ns = s.h.rows();
    let nq = q.h.rows();
    let mut out = directional(&s.h, &q.h, w1, w1, |g, a, b, w| paired_match(g, a, b, &vec![nq - 1; ns], w));
    out.backward = directional(&s.h, &q.h, w2, w2, |g, a, b, w| paired_match(g, a, b, &vec![0; ns], w)).backward;
    out
}
