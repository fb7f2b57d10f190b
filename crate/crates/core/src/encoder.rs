//! Semantic Encoder: Bi-LSTM contextualization and multi-head self-attention.

use crate::diffcore::{Graph, Tensor, Var};
use crate::lstm::{lstm_scan, LstmVars};

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub fwd: LstmVars,
    pub bwd: LstmVars,
    /// `d_a × 2d_h`
    pub ws1: Var,
    /// `r × d_a`
    pub ws2: Var,
}

/// An encoded utterance on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `T × 2d_h` contextual states.
    pub h: Var,
    /// `r × T` attention, each row a distribution over words.
    pub a: Var,
    /// `r × 2d_h` head representations, `A·H`.
    pub m: Var,
}

/// Plain-value copy of an [`Encoded`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedInstance {
    pub h: Tensor,
    pub a: Tensor,
    pub m: Tensor,
}

impl Encoded {
    pub fn values(&self, g: &Graph) -> EncodedInstance {
        EncodedInstance { h: g.value(self.h).clone(), a: g.value(self.a).clone(), m: g.value(self.m).clone() }
    }

    pub fn len(&self, g: &Graph) -> usize {
        g.value(self.h).rows()
    }
}

impl EncodedInstance {
    /// Re-enters the values as constants (no gradient).
    pub fn to_graph(&self, g: &mut Graph) -> Encoded {
        Encoded { h: g.constant(self.h.clone()), a: g.constant(self.a.clone()), m: g.constant(self.m.clone()) }
    }

    pub fn hidden(&self) -> usize {
        self.h.cols() / 2
    }

    /// Columns `[0, d_h)` of `M`.
    pub fn forward_heads(&self) -> Tensor {
        cols(&self.m, 0, self.hidden())
    }

    /// Columns `[d_h, 2d_h)` of `M`.
    pub fn backward_heads(&self) -> Tensor {
        cols(&self.m, self.hidden(), self.hidden())
    }
}

fn cols(t: &Tensor, start: usize, width: usize) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), width);
    for r in 0..t.rows() {
        out.row_mut(r).copy_from_slice(&t.row(r)[start..start + width]);
    }
    out
}

/// `H = [h_1 … h_T]`, row `t` = forward state at `t` ⊕ backward state at `t`.
pub fn run_bilstm(g: &mut Graph, x: Var, enc: &EncoderVars) -> Var {
    let fwd = lstm_scan(g, x, &enc.fwd, false);
    let bwd = lstm_scan(g, x, &enc.bwd, true);
    let rows: Vec<Var> = fwd.iter().zip(&bwd).map(|(f, b)| g.concat_cols(&[*f, *b])).collect();
    g.concat_rows(&rows)
}

/// `A = softmax(W_s2 tanh(W_s1 Hᵀ))` over words, and `M = A·H`.
pub fn attend_heads(g: &mut Graph, h: Var, enc: &EncoderVars) -> (Var, Var) {
    let ht = g.transpose(h);
    let hidden = g.matmul(enc.ws1, ht);
    let act = g.tanh(hidden);
    let logits = g.matmul(enc.ws2, act);
    let a = g.softmax_rows(logits);
    let m = g.matmul(a, h);
    (a, m)
}

/// Encodes a `T × d_w` embedding matrix.
pub fn encode(g: &mut Graph, x: Var, enc: &EncoderVars) -> Encoded {
    let h = run_bilstm(g, x, enc);
    let (a, m) = attend_heads(g, h, enc);
    Encoded { h, a, m }
}
