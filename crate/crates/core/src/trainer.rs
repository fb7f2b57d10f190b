//! Episodic meta-training of the full objective
//! `L_class + α·L_self + β·L_uniform + γ·L_discr`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, classification_loss_var, classify_episode};
use crate::corpus::{DatasetSplits, LabeledUtterance};
use crate::diffcore::{compare_gradients, forward_backward, gradient_check, DiffError, GradCheckOptions, GradCheckReport, Graph, ParamStore, Var};
use crate::embeddings::{synthesize_vectors, Vocabulary, WordVectors};
use crate::encoder::Encoded;
use crate::episodes::{episode_rng, sample_training_episode, Episode, EpisodeSpec, LabelPool, DEFAULT_QUERIES};
use crate::error::{Error, Result};
use crate::matching::{MatchLevel, MatcherSet};
use crate::model::{Model, ModelConfig, ModelVars, INIT_SCHEME};
use crate::regularizers::{episode_discr_loss_var, self_attn_penalty_var, uniform_penalty_var, RegularizerWeights};
use crate::synthetic::keyword_corpus;

/// Loss above which training is considered diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub n_episodes: usize,
    /// `C`
    pub classes: usize,
    /// `K`
    pub shots: usize,
    /// `N_Q`
    pub queries: usize,
    pub reg: RegularizerWeights,
    pub model: ModelConfig,
    pub seed: u64,
    /// Directory receiving checkpoints; nothing is written when unset.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    /// Floating-point width; only 64 is supported.
    pub precision: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            n_episodes: 1000,
            classes: 2,
            shots: 1,
            queries: DEFAULT_QUERIES,
            reg: RegularizerWeights::default(),
            model: ModelConfig::default(),
            seed: 0,
            checkpoint_dir: None,
            checkpoint_every: 100,
            precision: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Train(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.n_episodes == 0 {
            return Err(Error::Train("n_episodes must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Train("checkpoint_every must be at least 1".into()));
        }
        if self.precision != 64 {
            return Err(Error::Train(format!("precision {} is not supported; use 64", self.precision)));
        }
        self.reg.validate()?;
        self.model.validate()?;
        self.episode_spec().validate()
    }

    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec { classes: self.classes, shots: self.shots, queries: self.queries, label_pool: LabelPool::Seen, seed: self.seed }
    }
}

/// Loss components of one episode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub class: f64,
    pub self_attn: f64,
    pub uniform: f64,
    pub discr: f64,
    /// Query accuracy in percent.
    pub accuracy: f64,
}

struct LossGraph {
    total: Var,
    class: Var,
    self_attn: Var,
    uniform: Var,
    discr: Var,
    predictions: Vec<usize>,
}

/// Builds the episode loss on `g`. The discriminative term compares against
/// `predictions` when given, otherwise against the arg-max of the current
/// scores; either way the predictions carry no gradient.
#[allow(clippy::too_many_arguments)]
fn build_loss(
    g: &mut Graph,
    vars: &ModelVars,
    model: &Model,
    vectors: &WordVectors,
    corpus: &[LabeledUtterance],
    episode: &Episode,
    reg: &RegularizerWeights,
    predictions: Option<&[usize]>,
) -> Result<LossGraph> {
    if episode.queries.is_empty() {
        return Err(Error::Episode("episode has no queries".into()));
    }
    let encode = |g: &mut Graph, u: usize| model.encode_tokens(g, vars, vectors, corpus[u].tokens());
    let support: Vec<Vec<Encoded>> =
        episode.support.iter().map(|s| s.iter().map(|&u| encode(g, u)).collect::<Result<Vec<_>>>()).collect::<Result<_>>()?;
    let queries: Vec<(Encoded, usize)> =
        episode.queries.iter().map(|&(u, c)| encode(g, u).map(|e| (e, c))).collect::<Result<_>>()?;

    let mut losses = Vec::with_capacity(queries.len());
    let mut preds = Vec::with_capacity(queries.len());
    for (q, target) in &queries {
        let scores = classify_episode(g, q, &support, &vars.scorer)?;
        preds.push(argmax(g.value(scores).data()));
        losses.push(classification_loss_var(g, scores, *target)?);
    }
    let class = g.mean_scalars(&losses);

    let all: Vec<Var> = support.iter().flatten().chain(queries.iter().map(|(q, _)| q)).map(|e| e.a).collect();
    let self_terms: Vec<Var> = all.iter().map(|&a| self_attn_penalty_var(g, a)).collect();
    let self_attn = g.mean_scalars(&self_terms);
    let uniform_terms: Vec<Var> = all.iter().map(|&a| uniform_penalty_var(g, a)).collect();
    let uniform = g.mean_scalars(&uniform_terms);

    let used = predictions.map_or_else(|| preds.clone(), <[usize]>::to_vec);
    if used.len() != queries.len() {
        return Err(Error::Shape(format!("{} predictions for {} queries", used.len(), queries.len())));
    }
    let q_attn: Vec<(Var, usize)> = queries.iter().zip(&used).map(|((q, _), &p)| (q.a, p)).collect();
    let s_attn: Vec<(Var, usize)> =
        support.iter().enumerate().flat_map(|(c, s)| s.iter().map(move |e| (e.a, c))).collect();
    let discr = episode_discr_loss_var(g, &q_attn, &s_attn, reg.kl_cap)?;

    let weighted = [g.scale(self_attn, reg.alpha), g.scale(uniform, reg.beta), g.scale(discr, reg.gamma)];
    let total = g.add_scalars(&[class, weighted[0], weighted[1], weighted[2]]);
    Ok(LossGraph { total, class, self_attn, uniform, discr, predictions: preds })
}

fn breakdown(g: &Graph, lg: &LossGraph, episode: &Episode) -> Result<LossBreakdown> {
    if let Some(op) = g.first_nonfinite() {
        return Err(DiffError::NonFinite { op }.into());
    }
    let v = |x: Var| g.value(x).item();
    let parts = [
        ("L_class", v(lg.class)),
        ("L_self_attn", v(lg.self_attn)),
        ("L_uniform", v(lg.uniform)),
        ("L_discr", v(lg.discr)),
        ("total", v(lg.total)),
    ];
    if let Some((component, _)) = parts.iter().find(|(_, x)| !x.is_finite()) {
        return Err(Error::NonFiniteLoss { component });
    }
    let hits = lg.predictions.iter().zip(&episode.queries).filter(|(p, q)| **p == q.1).count();
    Ok(LossBreakdown {
        total: parts[4].1,
        class: parts[0].1,
        self_attn: parts[1].1,
        uniform: parts[2].1,
        discr: parts[3].1,
        accuracy: 100.0 * hits as f64 / episode.queries.len() as f64,
    })
}

/// Forward-only episode loss.
pub fn total_loss(
    model: &Model,
    vectors: &WordVectors,
    corpus: &[LabeledUtterance],
    episode: &Episode,
    reg: &RegularizerWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, &model.params, &model.config);
    let lg = build_loss(&mut g, &vars, model, vectors, corpus, episode, reg, None)?;
    breakdown(&g, &lg, episode)
}

/// Episode loss with its flat gradient.
pub fn loss_and_gradient(
    model: &Model,
    vectors: &WordVectors,
    corpus: &[LabeledUtterance],
    episode: &Episode,
    reg: &RegularizerWeights,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, &model.params, &model.config);
    let lg = build_loss(&mut g, &vars, model, vectors, corpus, episode, reg, None)?;
    let b = breakdown(&g, &lg, episode)?;
    let grad = model.params.flat_gradient(&g, lg.total);
    Ok((b, grad))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpisodeRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "episode,total,class,self_attn,uniform,discr,accuracy";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let l = &r.loss;
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.episode, l.total, l.class, l.self_attn, l.uniform, l.discr, l.accuracy
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Mean query accuracy over the last `n` episodes.
    pub fn tail_accuracy(&self, n: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(n)..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|r| r.loss.accuracy).sum::<f64>() / tail.len() as f64
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

/// Parameters file name written at the end of training.
pub const FINAL_CHECKPOINT: &str = "model.params";

fn sidecar_path(params: &Path) -> PathBuf {
    params.with_extension("json")
}

/// Writes `params` with an init/episode header and a JSON sidecar of `config`.
pub fn save_checkpoint(path: &Path, model: &Model, config: &TrainConfig, episode: usize) -> Result<()> {
    let comments = [INIT_SCHEME.to_string(), format!("episode={episode} seed={}", config.seed)];
    model.params.save(path, &comments)?;
    let json = serde_json::to_string_pretty(config).expect("config serializes");
    let side = sidecar_path(path);
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

/// Loads a parameter file together with its sidecar configuration.
pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainConfig)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let config: TrainConfig =
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: side.display().to_string(), line: 0, msg: e.to_string() })?;
    let (params, _) = ParamStore::load(path)?;
    let model = Model::from_params(config.model.clone(), params)?;
    Ok((model, config))
}

pub fn train(config: &TrainConfig, splits: &DatasetSplits, vectors: &WordVectors) -> Result<TrainOutcome> {
    train_with_progress(config, splits, vectors, |_| {})
}

/// One Adam step per sampled training episode; `progress` sees every record.
pub fn train_with_progress(
    config: &TrainConfig,
    splits: &DatasetSplits,
    vectors: &WordVectors,
    mut progress: impl FnMut(&EpisodeRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if vectors.dim() != config.model.embed_dim {
        return Err(Error::Shape(format!(
            "embedding dimension {} does not match model d_w {}",
            vectors.dim(),
            config.model.embed_dim
        )));
    }
    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut model = Model::new(config.model.clone(), config.seed)?;
    let mut adam = Adam::new(config.learning_rate, model.params.num_values());
    let spec = config.episode_spec();
    let corpus = splits.corpus();
    let mut log = TrainLog::default();
    for i in 0..config.n_episodes {
        let episode = sample_training_episode(corpus, splits.train_pool(), &spec, &mut episode_rng(config.seed, i as u64))?;
        let (loss, grad) = loss_and_gradient(&model, vectors, corpus, &episode, &config.reg)?;
        if loss.total.is_nan() || loss.total > DIVERGENCE_LIMIT {
            return Err(Error::Train(format!("diverged at episode {}: total loss {}", i + 1, loss.total)));
        }
        adam.step(model.params.flat_mut(), &grad);
        let record = EpisodeRecord { episode: i + 1, loss };
        progress(&record);
        log.records.push(record);
        if let Some(dir) = &config.checkpoint_dir {
            let n = i + 1;
            if n % config.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("checkpoint-{n:06}.params")), &model, config, n)?;
            }
            if n == config.n_episodes {
                save_checkpoint(&dir.join(FINAL_CHECKPOINT), &model, config, n)?;
            }
        }
    }
    Ok(TrainOutcome { model, log })
}

/// Settings for [`check_model_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub options: GradCheckOptions,
    pub reg: RegularizerWeights,
    /// Parameter whose analytic gradient is deliberately perturbed, for
    /// negative controls.
    pub corrupt: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            options: GradCheckOptions::default(),
            reg: RegularizerWeights { alpha: 1.0, beta: 1.0, gamma: 1.0, kl_cap: 10.0 },
            corrupt: None,
        }
    }
}

/// Tiny configuration used by the model gradient check.
pub fn grad_check_model_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 6,
        hidden: 8,
        attn_hidden: 5,
        heads: 2,
        perspectives: 3,
        match_level: MatchLevel::Head,
        matchers: MatcherSet::all(),
    }
}

/// Two-class, two-shot episode with one query per class over utterances of
/// at most six tokens.
pub fn grad_check_episode(seed: u64) -> (Vec<LabeledUtterance>, Episode) {
    let corpus: Vec<LabeledUtterance> = keyword_corpus(2, 3, seed)
        .into_iter()
        .map(|u| {
            let t: Vec<String> = u.tokens().iter().take(6).cloned().collect();
            LabeledUtterance::from_tokens(t, u.label()).expect("non-empty")
        })
        .collect();
    let of = |label: &str| -> Vec<usize> { (0..corpus.len()).filter(|&i| corpus[i].label() == label).collect() };
    let mut classes: Vec<String> = corpus.iter().map(|u| u.label().to_string()).collect();
    classes.sort();
    classes.dedup();
    let members: Vec<Vec<usize>> = classes.iter().map(|c| of(c)).collect();
    let support = members.iter().map(|m| m[..2].to_vec()).collect();
    let queries = members.iter().enumerate().map(|(c, m)| (m[2], c)).collect();
    (corpus, Episode { classes, support, queries })
}

/// Outcome of [`check_model_gradients`].
#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    /// Loss components at the checked point.
    pub loss: LossBreakdown,
}

/// Finite-difference check of the full training loss on a tiny random
/// model and episode.
pub fn check_model_gradients(cfg: &GradCheckConfig) -> Result<ModelGradCheck> {
    let (corpus, episode) = grad_check_episode(cfg.seed);
    let model_cfg = grad_check_model_config();
    let vocab = Vocabulary::from_corpus(&corpus);
    let table = synthesize_vectors(&vocab, model_cfg.embed_dim, cfg.seed);
    let vectors = WordVectors::new(vocab, table);
    let model = Model::new(model_cfg.clone(), cfg.seed)?;
    let base = total_loss(&model, &vectors, &corpus, &episode, &cfg.reg)?;
    let predictions = {
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &model.params, &model.config);
        build_loss(&mut g, &vars, &model, &vectors, &corpus, &episode, &cfg.reg, None)?.predictions
    };
    let loss_fn = |g: &mut Graph, v: &[Var]| {
        let vars = ModelVars::resolve(g, &model.params, v, &model_cfg);
        build_loss(g, &vars, &model, &vectors, &corpus, &episode, &cfg.reg, Some(&predictions))
            .expect("episode is well formed")
            .total
    };
    let report = match &cfg.corrupt {
        None => gradient_check(&model.params, loss_fn, &cfg.options)?,
        Some(name) => {
            let (_, mut analytic) = forward_backward(&model.params, loss_fn)?;
            let entry = model
                .params
                .entries()
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| Error::Train(format!("unknown parameter `{name}`")))?;
            for g in &mut analytic[entry.offset..entry.offset + entry.rows * entry.cols] {
                *g = 2.0 * *g + 1e-3;
            }
            compare_gradients(&model.params, loss_fn, &analytic, &cfg.options)?
        }
    };
    Ok(ModelGradCheck { report, loss: base })
}
