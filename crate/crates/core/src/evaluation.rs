//! Episodic and non-episodic accuracy, harmonic accuracy and metrics reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplits, LabeledUtterance};
use crate::embeddings::WordVectors;
use crate::encoder::EncodedInstance;
use crate::episodes::{episode_rng, sample_episode, EpisodeSpec, NonEpisodicTask};
use crate::error::{Error, Result};
use crate::model::Model;

/// Anything that can classify queries against per-class support sets.
///
/// Utterances are indices into a corpus the scorer already knows about.
pub trait Scorer: Sync {
    /// Predicted class index for each query.
    fn predict(&self, queries: &[usize], support: &[Vec<usize>]) -> Result<Vec<usize>>;
}

/// Scores with a trained network.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub vectors: &'a WordVectors,
    pub corpus: &'a [LabeledUtterance],
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, vectors: &'a WordVectors, corpus: &'a [LabeledUtterance]) -> Self {
        Self { model, vectors, corpus }
    }

    fn encode(&self, u: usize) -> Result<EncodedInstance> {
        self.model.encode_instance(self.vectors, self.corpus[u].tokens())
    }
}

impl Scorer for ModelScorer<'_> {
    fn predict(&self, queries: &[usize], support: &[Vec<usize>]) -> Result<Vec<usize>> {
        let encoded: Vec<Vec<EncodedInstance>> = support
            .iter()
            .map(|s| s.par_iter().map(|&u| self.encode(u)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        queries
            .par_iter()
            .map(|&q| {
                let eq = self.encode(q)?;
                Ok(self.model.score(&eq, &encoded)?.predicted())
            })
            .collect()
    }
}

/// Runs `f` on a dedicated pool of `threads` workers (at least one).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Eval(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodicResult {
    /// Mean over seeds, in percent.
    pub accuracy: f64,
    pub per_seed: Vec<f64>,
    pub correct: usize,
    pub total: usize,
}

/// Accuracy over `n_episodes` episodes per seed; episode `i` of seed `s` is
/// drawn from [`episode_rng`]`(s, i)`.
pub fn evaluate_episodic<S: Scorer + ?Sized>(
    scorer: &S,
    splits: &DatasetSplits,
    spec: &EpisodeSpec,
    n_episodes: usize,
    seeds: &[u64],
    threads: usize,
) -> Result<EpisodicResult> {
    if n_episodes == 0 {
        return Err(Error::Eval("episodic evaluation needs at least one episode".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Eval("episodic evaluation needs at least one seed".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    let (mut correct, mut total) = (0, 0);
    for &seed in seeds {
        let counts = with_threads(threads, || {
            (0..n_episodes)
                .into_par_iter()
                .map(|i| {
                    let ep = sample_episode(splits, spec, &mut episode_rng(seed, i as u64))?;
                    let qs: Vec<usize> = ep.queries.iter().map(|q| q.0).collect();
                    let pred = scorer.predict(&qs, &ep.support)?;
                    let hits = pred.iter().zip(&ep.queries).filter(|(p, q)| **p == q.1).count();
                    Ok((hits, ep.queries.len()))
                })
                .collect::<Result<Vec<_>>>()
        })??;
        let c: usize = counts.iter().map(|x| x.0).sum();
        let t: usize = counts.iter().map(|x| x.1).sum();
        per_seed.push(100.0 * c as f64 / t as f64);
        correct += c;
        total += t;
    }
    let accuracy = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    Ok(EpisodicResult { accuracy, per_seed, correct, total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub labels: Vec<String>,
    /// `matrix[true][predicted]`
    pub matrix: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        Self { labels, matrix: vec![vec![0; n]; n] }
    }

    pub fn total(&self) -> usize {
        self.matrix.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.labels.len()).map(|i| self.matrix[i][i]).sum()
    }

    /// Percent correct; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            100.0 * self.trace() as f64 / t as f64
        }
    }
}

/// Classifies every test utterance once over the task's whole label space.
pub fn evaluate_nonepisodic<S: Scorer + ?Sized>(scorer: &S, task: &NonEpisodicTask, threads: usize) -> Result<Confusion> {
    if task.support.len() != task.labels.len() || task.support.iter().any(Vec::is_empty) {
        return Err(Error::Eval("every label in the space needs supports".into()));
    }
    if let Some(&(u, c)) = task.test.iter().find(|(_, c)| *c >= task.labels.len()) {
        return Err(Error::Eval(format!("test utterance {u} has label index {c} outside the space")));
    }
    let mut confusion = Confusion::new(task.labels.clone());
    if task.labels.len() == 1 {
        for &(_, c) in &task.test {
            confusion.matrix[c][0] += 1;
        }
        return Ok(confusion);
    }
    let queries: Vec<usize> = task.test.iter().map(|t| t.0).collect();
    let pred = with_threads(threads, || scorer.predict(&queries, &task.support))??;
    for (p, &(_, c)) in pred.iter().zip(&task.test) {
        confusion.matrix[c][*p] += 1;
    }
    Ok(confusion)
}

/// `2·s_j·s_n / (s_j + s_n)`.
pub fn harmonic_accuracy(s_j: f64, s_n: f64) -> Result<f64> {
    if s_j < 0.0 || s_n < 0.0 || !s_j.is_finite() || !s_n.is_finite() {
        return Err(Error::Eval(format!("accuracies must be finite and non-negative, got {s_j} and {s_n}")));
    }
    if s_j == 0.0 && s_n == 0.0 {
        return Err(Error::Eval("harmonic accuracy is undefined when both accuracies are 0".into()));
    }
    Ok(2.0 * s_j * s_n / (s_j + s_n))
}

/// Two-decimal rounding used for every reported accuracy.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Episodic,
    Nonepisodic,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSet {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint: Option<Confusion>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub novel: Option<Confusion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub shots: usize,
    pub s_j: Option<f64>,
    pub s_n: Option<f64>,
    pub h_acc: Option<f64>,
    pub n_episodes: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub confusion: Option<ConfusionSet>,
}

impl MetricsReport {
    /// Builds a report from unrounded accuracies; `h_acc` is computed before
    /// rounding when both are present.
    pub fn new(mode: EvalMode, shots: usize, s_j: Option<f64>, s_n: Option<f64>) -> Result<Self> {
        let h_acc = match (s_j, s_n) {
            (Some(j), Some(n)) => Some(round2(harmonic_accuracy(j, n)?)),
            _ => None,
        };
        Ok(Self {
            mode,
            shots,
            s_j: s_j.map(round2),
            s_n: s_n.map(round2),
            h_acc,
            n_episodes: None,
            seeds: None,
            confusion: None,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Eval(format!("metrics json: {e}")))
    }

    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let mode = match self.mode {
            EvalMode::Episodic => "episodic",
            EvalMode::Nonepisodic => "non-episodic",
        };
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:>5} {:>8} {:>8} {:>8}", "mode", "K", "S-J", "S-N", "h-acc");
        let _ = writeln!(
            out,
            "{:<14} {:>5} {:>8} {:>8} {:>8}",
            mode,
            self.shots,
            cell(self.s_j),
            cell(self.s_n),
            cell(self.h_acc)
        );
        if let (Some(n), Some(seeds)) = (self.n_episodes, &self.seeds) {
            let _ = writeln!(out, "episodes per seed: {n}; seeds: {seeds:?}");
        }
        out
    }
}
