//! Differentiable computation: tensors, a reverse-mode tape, parameter storage
//! and finite-difference gradient verification.

mod graph;
mod params;
mod tensor;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use graph::{Gradients, Graph, Var, COSINE_EPS, DIV_EPS};
pub use params::{ParamEntry, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error(
        "gradient mismatch at {name}[{index}]: analytic {analytic:.6e}, numeric {numeric:.6e} (relative error {rel_error:.3e})"
    )]
    GradientMismatch { name: String, index: usize, analytic: f64, numeric: f64, rel_error: f64 },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed parameter file: {0}")]
    Format(String),
}

impl DiffError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DiffError::Io { path: path.display().to_string(), source }
    }
}

/// Evaluates `loss_fn` on a fresh tape with `params` bound as leaves and
/// returns the loss with its flat gradient.
pub fn forward_backward<F>(params: &ParamStore, loss_fn: F) -> Result<(f64, Vec<f64>), DiffError>
where
    F: FnOnce(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let loss = loss_fn(&mut g, &vars);
    if let Some(op) = g.first_nonfinite() {
        return Err(DiffError::NonFinite { op });
    }
    let value = g.value(loss).item();
    let grad = params.flat_gradient(&g, loss);
    Ok((value, grad))
}

/// Loss value only.
pub fn forward_value<F>(params: &ParamStore, loss_fn: F) -> f64
where
    F: FnOnce(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let loss = loss_fn(&mut g, &vars);
    g.value(loss).item()
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub rel_tol: f64,
    /// Minimum number of coordinates checked (all of them if fewer exist).
    pub min_coords: usize,
    /// Coordinates drawn from every parameter tensor before topping up.
    pub per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-5, rel_tol: 1e-3, min_coords: 64, per_param: 2, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passed(&self) -> bool {
        self.coords.iter().all(|c| c.rel_error <= self.rel_tol)
    }

    /// Largest relative error per parameter tensor, in first-seen order.
    pub fn per_param(&self) -> Vec<(String, f64, usize)> {
        let mut out: Vec<(String, f64, usize)> = Vec::new();
        for c in &self.coords {
            match out.iter_mut().find(|(n, ..)| *n == c.name) {
                Some(entry) => {
                    entry.1 = entry.1.max(c.rel_error);
                    entry.2 += 1;
                }
                None => out.push((c.name.clone(), c.rel_error, 1)),
            }
        }
        out
    }

    fn into_result(self) -> Result<Self, DiffError> {
        if self.passed() {
            return Ok(self);
        }
        let w = self.worst().expect("a failing report has coordinates").clone();
        Err(DiffError::GradientMismatch {
            name: w.name,
            index: w.index,
            analytic: w.analytic,
            numeric: w.numeric,
            rel_error: w.rel_error,
        })
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn sample_coords(params: &ParamStore, opts: &GradCheckOptions) -> Vec<usize> {
    let total = params.num_values();
    if total <= opts.min_coords {
        return (0..total).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picked = BTreeSet::new();
    for e in params.entries() {
        let k = opts.per_param.min(e.len());
        for i in sample(&mut rng, e.len(), k) {
            picked.insert(e.offset + i);
        }
    }
    while picked.len() < opts.min_coords {
        picked.insert(sample(&mut rng, total, 1).index(0));
    }
    picked.into_iter().collect()
}

/// Compares a supplied analytic gradient against central differences of
/// `loss_fn` on a sampled subset of coordinates.
pub fn compare_gradients<F>(
    params: &ParamStore,
    loss_fn: F,
    analytic: &[f64],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    assert_eq!(analytic.len(), params.num_values(), "analytic gradient length mismatch");
    let mut probe = params.clone();
    let mut coords = Vec::new();
    for idx in sample_coords(params, opts) {
        let orig = params.flat()[idx];
        probe.flat_mut()[idx] = orig + opts.epsilon;
        let plus = forward_value(&probe, &loss_fn);
        probe.flat_mut()[idx] = orig - opts.epsilon;
        let minus = forward_value(&probe, &loss_fn);
        probe.flat_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * opts.epsilon);
        let (name, index) = params.locate(idx);
        coords.push(CoordCheck {
            name: name.to_string(),
            index,
            analytic: analytic[idx],
            numeric,
            rel_error: relative_error(analytic[idx], numeric),
        });
    }
    GradCheckReport { coords, rel_tol: opts.rel_tol }.into_result()
}

/// Finite-difference verification of the tape gradient of `loss_fn`.
pub fn gradient_check<F>(params: &ParamStore, loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let (_, analytic) = forward_backward(params, &loss_fn)?;
    compare_gradients(params, loss_fn, &analytic, opts)
}
