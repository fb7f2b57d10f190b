//! Model configuration, parameter layout and initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{classify_episode, ClassScore, ClassifierVars, ScorerVars};
use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::embeddings::WordVectors;
use crate::encoder::{encode, Encoded, EncodedInstance, EncoderVars};
use crate::error::{Error, Result};
use crate::lstm::LstmVars;
use crate::matching::{AggregatorVars, MatchLevel, MatchSettings, MatcherSet, PerspectiveVars};

/// Tag written into checkpoints describing how parameters were initialized.
pub const INIT_SCHEME: &str = "init=uniform(+-1/sqrt(fan_in)) lstm=uniform(+-1/sqrt(d_h)) forget_bias=1 other_bias=0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `d_w`
    pub embed_dim: usize,
    /// `d_h`
    pub hidden: usize,
    /// `d_a`
    pub attn_hidden: usize,
    /// `r`
    pub heads: usize,
    /// `l`
    pub perspectives: usize,
    pub match_level: MatchLevel,
    pub matchers: MatcherSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            hidden: 64,
            attn_hidden: 20,
            heads: 4,
            perspectives: 5,
            match_level: MatchLevel::Head,
            matchers: MatcherSet::all(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("attn_hidden", self.attn_hidden),
            ("heads", self.heads),
            ("perspectives", self.perspectives),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Shape(format!("{name} must be positive")));
            }
        }
        if self.matchers.count() == 0 {
            return Err(Error::Shape("at least one matcher must be enabled".into()));
        }
        Ok(())
    }

    /// Width of one direction of the match sequence.
    pub fn match_width(&self) -> usize {
        self.matchers.count() * self.perspectives
    }

    pub fn settings(&self) -> MatchSettings {
        MatchSettings { level: self.match_level, matchers: self.matchers, hidden: self.hidden }
    }
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

fn insert_lstm(p: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (hidden as f64).sqrt();
    p.insert(&format!("{prefix}.wx"), uniform(input, 4 * hidden, bound, rng));
    p.insert(&format!("{prefix}.wh"), uniform(hidden, 4 * hidden, bound, rng));
    let mut b = Tensor::zeros(1, 4 * hidden);
    for v in &mut b.data_mut()[hidden..2 * hidden] {
        *v = 1.0;
    }
    p.insert(&format!("{prefix}.b"), b);
}

/// Parameters in a fixed layout, all drawn from one seeded stream.
pub fn init_params(config: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let (dw, dh, da, r, l) = (config.embed_dim, config.hidden, config.attn_hidden, config.heads, config.perspectives);
    insert_lstm(&mut p, "enc.fwd", dw, dh, &mut rng);
    insert_lstm(&mut p, "enc.bwd", dw, dh, &mut rng);
    p.insert("enc.ws1", uniform(da, 2 * dh, 1.0 / ((2 * dh) as f64).sqrt(), &mut rng));
    p.insert("enc.ws2", uniform(r, da, 1.0 / (da as f64).sqrt(), &mut rng));
    for k in 1..=8 {
        p.insert(&format!("match.w{k}"), uniform(l, dh, 1.0 / (dh as f64).sqrt(), &mut rng));
    }
    let width = config.match_width();
    insert_lstm(&mut p, "agg.fwd", width, dh, &mut rng);
    insert_lstm(&mut p, "agg.bwd", width, dh, &mut rng);
    p.insert("cls.w9", uniform(1, dh, 1.0 / (dh as f64).sqrt(), &mut rng));
    p.insert("cls.w10", uniform(dh, 4 * dh, 1.0 / ((4 * dh) as f64).sqrt(), &mut rng));
    p
}

/// Graph handles for every parameter tensor.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub scorer: ScorerVars,
}

impl ModelVars {
    /// Binds `params` onto `g` (slot order) and resolves the named tensors.
    pub fn bind(g: &mut Graph, params: &ParamStore, config: &ModelConfig) -> Self {
        let vars = params.bind(g);
        Self::resolve(g, params, &vars, config)
    }

    /// Resolves named tensors among already-bound `vars`.
    pub fn resolve(g: &mut Graph, params: &ParamStore, vars: &[Var], config: &ModelConfig) -> Self {
        let get = |name: &str| vars[params.slot(name).unwrap_or_else(|| panic!("missing parameter {name}"))];
        let lstm = |prefix: &str| LstmVars {
            wx: get(&format!("{prefix}.wx")),
            wh: get(&format!("{prefix}.wh")),
            b: get(&format!("{prefix}.b")),
            hidden: config.hidden,
        };
        let encoder = EncoderVars { fwd: lstm("enc.fwd"), bwd: lstm("enc.bwd"), ws1: get("enc.ws1"), ws2: get("enc.ws2") };
        let w: [Var; 8] = std::array::from_fn(|k| get(&format!("match.w{}", k + 1)));
        let persp = PerspectiveVars { w };
        let agg = AggregatorVars { fwd: lstm("agg.fwd"), bwd: lstm("agg.bwd") };
        let cls = ClassifierVars::new(g, get("cls.w9"), get("cls.w10"));
        Self { encoder, scorer: ScorerVars { persp, agg, cls, settings: config.settings() } }
    }
}

/// Trainable state of the network together with its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters after checking their layout against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = init_params(&config, 0);
        if expected.entries() != params.entries() {
            return Err(Error::Shape("parameter layout does not match the model configuration".into()));
        }
        Ok(Self { config, params })
    }

    /// Encodes `tokens` onto `g`; embeddings enter as constants.
    pub fn encode_tokens<S: AsRef<str>>(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        vectors: &WordVectors,
        tokens: &[S],
    ) -> Result<Encoded> {
        let x = vectors.embed(tokens)?;
        if x.cols() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "embedding dimension {} does not match model d_w {}",
                x.cols(),
                self.config.embed_dim
            )));
        }
        let xv = g.constant(x);
        Ok(encode(g, xv, &vars.encoder))
    }

    /// Forward-only encoding.
    pub fn encode_instance<S: AsRef<str>>(&self, vectors: &WordVectors, tokens: &[S]) -> Result<EncodedInstance> {
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &self.params, &self.config);
        let enc = self.encode_tokens(&mut g, &vars, vectors, tokens)?;
        Ok(enc.values(&g))
    }

    /// Forward-only class scores for an encoded query against per-class
    /// encoded supports.
    pub fn score(&self, query: &EncodedInstance, classes: &[Vec<EncodedInstance>]) -> Result<ClassScore> {
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &self.params, &self.config);
        let q = query.to_graph(&mut g);
        let supports: Vec<Vec<Encoded>> =
            classes.iter().map(|c| c.iter().map(|s| s.to_graph(&mut g)).collect()).collect();
        let scores = classify_episode(&mut g, &q, &supports, &vars.scorer)?;
        if let Some(op) = g.first_nonfinite() {
            return Err(crate::diffcore::DiffError::NonFinite { op }.into());
        }
        Ok(ClassScore::from_scores(g.value(scores).data().to_vec()))
    }
}
