//! Single-layer LSTM scanned over the rows of a matrix.
//!
//! Gate layout along the `4h` axis is input, forget, cell candidate, output.

use crate::diffcore::{Graph, Var};

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `d_in × 4h`
    pub wx: Var,
    /// `h × 4h`
    pub wh: Var,
    /// `1 × 4h`
    pub b: Var,
    pub hidden: usize,
}

/// Runs the cell over the rows of `xs` (`n × d_in`) from zero initial state.
///
/// Returns the hidden state at every position, indexed by input row, whether
/// the scan ran forward or in reverse.
pub fn lstm_scan(g: &mut Graph, xs: Var, lstm: &LstmVars, reverse: bool) -> Vec<Var> {
    let n = g.value(xs).rows();
    let h = lstm.hidden;
    let xw = g.matmul(xs, lstm.wx);
    let pre = g.add_row(xw, lstm.b);
    let mut out: Vec<Option<Var>> = vec![None; n];
    let mut state: Option<(Var, Var)> = None;
    let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..n).rev()) } else { Box::new(0..n) };
    for t in order {
        let mut z = g.row(pre, t);
        if let Some((h_prev, _)) = state {
            let hw = g.matmul(h_prev, lstm.wh);
            z = g.add(z, hw);
        }
        let zi = g.slice_cols(z, 0, h);
        let zf = g.slice_cols(z, h, h);
        let zg = g.slice_cols(z, 2 * h, h);
        let zo = g.slice_cols(z, 3 * h, h);
        let i = g.sigmoid(zi);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let mut c = g.mul(i, cand);
        if let Some((_, c_prev)) = state {
            let f = g.sigmoid(zf);
            let keep = g.mul(f, c_prev);
            c = g.add(c, keep);
        }
        let tc = g.tanh(c);
        let h_new = g.mul(o, tc);
        out[t] = Some(h_new);
        state = Some((h_new, c));
    }
    out.into_iter().map(|v| v.expect("every position visited")).collect()
}
