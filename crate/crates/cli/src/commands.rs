use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use smanet_core::corpus::{build_splits, parse_dataset, CorpusFormat, DatasetSplits, LabeledUtterance, SplitSpec};
use smanet_core::diffcore::Graph;
use smanet_core::embeddings::{load_vectors, synthesize_vectors, Vocabulary, WordVectors};
use smanet_core::episodes::{nonepisodic_tasks, EpisodeSpec, LabelPool, Space};
use smanet_core::evaluation::{
    evaluate_episodic, evaluate_nonepisodic, harmonic_accuracy, round2, with_threads, ConfusionSet, EvalMode, MetricsReport,
    ModelScorer,
};
use smanet_core::matching::{match_all, Matcher, MatcherSet};
use smanet_core::model::{Model, ModelConfig, ModelVars};
use smanet_core::regularizers::RegularizerWeights;
use smanet_core::trainer::{self, check_model_gradients, load_checkpoint, GradCheckConfig, TrainConfig, FINAL_CHECKPOINT};

use crate::config::RunConfig;

/// Creates the output directory and echoes the effective configuration into it.
fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(&dir.join("config.txt"), cfg.render())?;
    Ok(dir)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn existing(path: &str, what: &str) -> Result<PathBuf> {
    let p = PathBuf::from(path);
    ensure!(p.exists(), "{what} `{path}` does not exist");
    Ok(p)
}

fn load_corpus(cfg: &RunConfig) -> Result<Vec<LabeledUtterance>> {
    let path = existing(cfg.required("data.path")?, "data file")?;
    let format: CorpusFormat = cfg.get("data.format")?;
    Ok(parse_dataset(&path, format)?)
}

fn load_splits(cfg: &RunConfig, corpus: &[LabeledUtterance]) -> Result<DatasetSplits> {
    let k: usize = cfg.get("episode.K")?;
    if let Some(m) = cfg.opt("data.manifest") {
        let path = existing(m, "split manifest")?;
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let splits = DatasetSplits::from_manifest(corpus, &text)?;
        ensure!(splits.shots() == k, "manifest holds K={} but episode.K={k}", splits.shots());
        return Ok(splits);
    }
    let novel: Vec<String> = cfg.list("data.novel_labels")?;
    ensure!(!novel.is_empty(), "config key `data.novel_labels` is required");
    let spec = SplitSpec {
        joint_fraction: cfg.get("data.joint_fraction")?,
        ..SplitSpec::new(novel, k, cfg.get("split.seed")?)
    };
    Ok(build_splits(corpus, &spec)?)
}

fn load_word_vectors(cfg: &RunConfig, corpus: &[LabeledUtterance]) -> Result<WordVectors> {
    let vocab = Vocabulary::from_corpus(corpus);
    let spec = cfg.required("embeddings")?;
    let table = match spec.strip_prefix("synthetic:") {
        Some(dim) => {
            let d: usize = dim.parse().map_err(|e| anyhow!("embeddings `{spec}`: {e}"))?;
            ensure!(d >= 1, "synthetic embedding dimension must be at least 1");
            synthesize_vectors(&vocab, d, cfg.get("embeddings.seed")?)
        }
        None => load_vectors(&existing(spec, "embeddings file")?, &vocab)?,
    };
    Ok(WordVectors::new(vocab, table))
}

struct Data {
    splits: DatasetSplits,
    vectors: WordVectors,
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    let corpus = load_corpus(cfg)?;
    let splits = load_splits(cfg, &corpus)?;
    let vectors = load_word_vectors(cfg, &corpus)?;
    Ok(Data { splits, vectors })
}

fn model_config(cfg: &RunConfig, embed_dim: usize) -> Result<ModelConfig> {
    Ok(ModelConfig {
        embed_dim,
        hidden: cfg.get("model.d_h")?,
        attn_hidden: cfg.get("model.d_a")?,
        heads: cfg.get("model.r")?,
        perspectives: cfg.get("model.perspectives")?,
        match_level: cfg.get("model.match_level")?,
        matchers: cfg.get("model.matchers")?,
    })
}

fn reg_weights(cfg: &RunConfig) -> Result<RegularizerWeights> {
    Ok(RegularizerWeights {
        alpha: cfg.get("reg.alpha")?,
        beta: cfg.get("reg.beta")?,
        gamma: cfg.get("reg.gamma")?,
        kl_cap: cfg.get("reg.kl_cap")?,
    })
}

fn train_config(cfg: &RunConfig, embed_dim: usize, checkpoint_dir: Option<PathBuf>) -> Result<TrainConfig> {
    let tc = TrainConfig {
        learning_rate: cfg.get("train.lr")?,
        n_episodes: cfg.get("episode.count")?,
        classes: cfg.get("episode.C")?,
        shots: cfg.get("episode.K")?,
        queries: cfg.get("episode.NQ")?,
        reg: reg_weights(cfg)?,
        model: model_config(cfg, embed_dim)?,
        seed: cfg.get("train.seed")?,
        checkpoint_dir,
        checkpoint_every: cfg.get("train.checkpoint_every")?,
        precision: cfg.get("precision")?,
    };
    tc.validate()?;
    Ok(tc)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.opt("model.checkpoint").map_or_else(|| cfg.output_dir().join(FINAL_CHECKPOINT), PathBuf::from)
}

fn load_model(cfg: &RunConfig, vectors: &WordVectors) -> Result<Model> {
    let path = checkpoint_path(cfg);
    ensure!(path.exists(), "checkpoint `{}` does not exist; run `train` first", path.display());
    let (model, _) = load_checkpoint(&path)?;
    ensure!(
        model.config.embed_dim == vectors.dim(),
        "checkpoint expects {}-dimensional embeddings but `{}` gives {}",
        model.config.embed_dim,
        cfg.raw("embeddings"),
        vectors.dim()
    );
    Ok(model)
}

fn spaces(cfg: &RunConfig) -> Result<Vec<Space>> {
    match cfg.raw("eval.space") {
        "both" => Ok(vec![Space::Joint, Space::Novel]),
        other => Ok(vec![other.parse().map_err(|e: String| anyhow!("eval.space: {e}"))?]),
    }
}

fn precision_check(cfg: &RunConfig) -> Result<()> {
    let p: u32 = cfg.get("precision")?;
    ensure!(p == 64, "precision {p} is not supported; use 64");
    Ok(())
}

pub fn prepare_splits(cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let splits = load_splits(cfg, &corpus)?;
    let dir = output_dir(cfg)?;
    let path = dir.join("splits.manifest");
    write_file(&path, splits.manifest())?;
    println!(
        "seen {} novel {} | train {} joint-test {} novel-test {} | K={} | manifest {}",
        splits.seen_labels().len(),
        splits.novel_labels().len(),
        splits.train_pool().len(),
        splits.joint_test().len(),
        splits.novel_test().len(),
        splits.shots(),
        path.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    // Validate the schedule before touching any data.
    train_config(cfg, 1, None)?;
    let data = load_data(cfg)?;
    let dir = output_dir(cfg)?;
    let tc = train_config(cfg, data.vectors.dim(), Some(dir.clone()))?;
    let every = tc.checkpoint_every;
    let outcome = trainer::train_with_progress(&tc, &data.splits, &data.vectors, |r| {
        if r.episode % every == 0 {
            eprintln!("episode {:>6}  loss {:.4}  accuracy {:.1}", r.episode, r.loss.total, r.loss.accuracy);
        }
    })?;
    write_file(&dir.join("train_log.csv"), outcome.log.to_csv())?;
    println!(
        "trained {} episodes; last-50 query accuracy {:.2}; checkpoint {}",
        tc.n_episodes,
        outcome.log.tail_accuracy(50),
        dir.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn emit_report(dir: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    write_file(&dir.join(format!("{stem}.json")), report.to_json())?;
    let table = report.to_table();
    write_file(&dir.join(format!("{stem}.txt")), &table)?;
    print!("{table}");
    Ok(())
}

pub fn eval_episodic(cfg: &RunConfig) -> Result<()> {
    precision_check(cfg)?;
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data.vectors)?;
    let dir = output_dir(cfg)?;
    let n: usize = cfg.get("eval.episodes")?;
    let seeds: Vec<u64> = cfg.list("eval.seeds")?;
    let threads: usize = cfg.get("threads")?;
    let scorer = ModelScorer::new(&model, &data.vectors, data.splits.corpus());
    let (mut s_j, mut s_n) = (None, None);
    for space in spaces(cfg)? {
        let pool = match space {
            Space::Joint => LabelPool::Joint,
            Space::Novel => LabelPool::Novel,
        };
        let spec = EpisodeSpec {
            classes: cfg.get("eval.C")?,
            shots: data.splits.shots(),
            queries: cfg.get("episode.NQ")?,
            label_pool: pool,
            seed: 0,
        };
        let acc = evaluate_episodic(&scorer, &data.splits, &spec, n, &seeds, threads)?.accuracy;
        match space {
            Space::Joint => s_j = Some(acc),
            Space::Novel => s_n = Some(acc),
        }
    }
    let mut report = MetricsReport::new(EvalMode::Episodic, data.splits.shots(), s_j, s_n)?;
    report.n_episodes = Some(n);
    report.seeds = Some(seeds);
    emit_report(&dir, &format!("metrics_episodic_{}", cfg.raw("eval.space")), &report)
}

pub fn eval_nonepisodic(cfg: &RunConfig) -> Result<()> {
    precision_check(cfg)?;
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data.vectors)?;
    let dir = output_dir(cfg)?;
    let threads: usize = cfg.get("threads")?;
    let scorer = ModelScorer::new(&model, &data.vectors, data.splits.corpus());
    let mut confusion = ConfusionSet::default();
    for space in spaces(cfg)? {
        let task = nonepisodic_tasks(&data.splits, space)?;
        let c = evaluate_nonepisodic(&scorer, &task, threads)?;
        match space {
            Space::Joint => confusion.joint = Some(c),
            Space::Novel => confusion.novel = Some(c),
        }
    }
    let s_j = confusion.joint.as_ref().map(|c| c.accuracy());
    let s_n = confusion.novel.as_ref().map(|c| c.accuracy());
    let mut report = MetricsReport::new(EvalMode::Nonepisodic, data.splits.shots(), s_j, s_n)?;
    report.confusion = Some(confusion);
    emit_report(&dir, &format!("metrics_nonepisodic_{}", cfg.raw("eval.space")), &report)
}

pub fn grad_check(cfg: &RunConfig) -> Result<()> {
    precision_check(cfg)?;
    let dir = output_dir(cfg)?;
    let check = check_model_gradients(&GradCheckConfig { seed: cfg.get("gradcheck.seed")?, ..Default::default() })?;
    let r = &check.report;
    let mut text = String::new();
    let _ = writeln!(text, "{:<12} {:>6} {:>12}", "parameter", "coords", "max_rel_err");
    for (name, err, n) in r.per_param() {
        let _ = writeln!(text, "{name:<12} {n:>6} {err:>12.3e}");
    }
    let l = &check.loss;
    let _ = writeln!(
        text,
        "loss {:.6} = class {:.6} + self_attn {:.6} + uniform {:.6} + discr {:.6}",
        l.total, l.class, l.self_attn, l.uniform, l.discr
    );
    let _ = writeln!(
        text,
        "{}: {} coordinates, max relative error {:.3e} (tolerance {:.0e})",
        if r.passed() { "PASS" } else { "FAIL" },
        r.coords.len(),
        r.max_rel_error(),
        r.rel_tol
    );
    write_file(&dir.join("grad_check.txt"), &text)?;
    print!("{text}");
    ensure!(r.passed(), "gradient check failed");
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
struct VariantResult {
    variant: String,
    s_j: f64,
    s_n: f64,
    h_acc: f64,
    per_seed_h_acc: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct AblationReport {
    shots: usize,
    seeds: Vec<u64>,
    matchers: Vec<VariantResult>,
    regularizers: Vec<VariantResult>,
}

fn ablation_table(title: &str, rows: &[VariantResult]) -> String {
    let mut s = format!("{title}\n{:<20} {:>8} {:>8} {:>8}\n", "variant", "S-J", "S-N", "h-acc");
    for r in rows {
        let _ = writeln!(s, "{:<20} {:>8.2} {:>8.2} {:>8.2}", r.variant, r.s_j, r.s_n, r.h_acc);
    }
    s
}

/// Trains and scores one (variant, seed) pair: joint accuracy, novel accuracy, h-acc.
fn ablation_run(data: &Data, tc: &TrainConfig) -> Result<(f64, f64, f64)> {
    let outcome = trainer::train(tc, &data.splits, &data.vectors)?;
    let scorer = ModelScorer::new(&outcome.model, &data.vectors, data.splits.corpus());
    let joint = evaluate_nonepisodic(&scorer, &nonepisodic_tasks(&data.splits, Space::Joint)?, 1)?.accuracy();
    let novel = evaluate_nonepisodic(&scorer, &nonepisodic_tasks(&data.splits, Space::Novel)?, 1)?.accuracy();
    let h = if joint + novel > 0.0 { harmonic_accuracy(joint, novel)? } else { 0.0 };
    Ok((joint, novel, h))
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let dir = output_dir(cfg)?;
    let seeds: Vec<u64> = cfg.list("ablate.seeds")?;
    ensure!(!seeds.is_empty(), "config key `ablate.seeds` must list at least one seed");
    let threads: usize = cfg.get("threads")?;
    let mut base = train_config(cfg, data.vectors.dim(), None)?;
    base.model.matchers = MatcherSet::all();

    let mut variants: Vec<(&str, String, TrainConfig)> = vec![("full", "full".into(), base.clone())];
    for m in Matcher::ORDER {
        let mut tc = base.clone();
        tc.model.matchers = MatcherSet::only(m);
        variants.push(("matchers", m.as_str().into(), tc));
    }
    type Zero = fn(&mut RegularizerWeights);
    let regs: [(&str, Zero); 3] = [
        ("w/o L_self_attn", |r| r.alpha = 0.0),
        ("w/o L_uniform", |r| r.beta = 0.0),
        ("w/o L_discr", |r| r.gamma = 0.0),
    ];
    for (name, zero) in regs {
        let mut tc = base.clone();
        zero(&mut tc.reg);
        variants.push(("regularizers", name.into(), tc));
    }

    let jobs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let results = with_threads(threads, || {
        jobs.par_iter()
            .map(|&(v, seed)| {
                let tc = TrainConfig { seed, ..variants[v].2.clone() };
                ablation_run(&data, &tc).with_context(|| format!("variant {} seed {seed}", variants[v].1))
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let summarize = |v: usize| -> VariantResult {
        let runs: Vec<(f64, f64, f64)> = jobs.iter().zip(&results).filter(|(j, _)| j.0 == v).map(|(_, r)| *r).collect();
        let mean = |f: fn(&(f64, f64, f64)) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
        VariantResult {
            variant: variants[v].1.clone(),
            s_j: round2(mean(|r| r.0)),
            s_n: round2(mean(|r| r.1)),
            h_acc: round2(mean(|r| r.2)),
            per_seed_h_acc: runs.iter().map(|r| round2(r.2)).collect(),
        }
    };
    let full = summarize(0);
    let group = |g: &str| -> Vec<VariantResult> {
        let mut rows: Vec<VariantResult> = (0..variants.len()).filter(|&v| variants[v].0 == g).map(summarize).collect();
        rows.push(full.clone());
        rows
    };
    let report = AblationReport {
        shots: base.shots,
        seeds,
        matchers: group("matchers"),
        regularizers: group("regularizers"),
    };
    let text = format!(
        "{}\n{}",
        ablation_table("matching strategies", &report.matchers),
        ablation_table("regularizers", &report.regularizers)
    );
    write_file(&dir.join("ablation.txt"), &text)?;
    write_file(&dir.join("ablation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    print!("{text}");
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn default_report_utterances(splits: &DatasetSplits) -> Vec<usize> {
    splits.joint_labels().iter().filter_map(|l| splits.support_shots().get(l).and_then(|s| s.first().copied())).collect()
}

pub fn report(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data.vectors)?;
    let dir = output_dir(cfg)?.join("report");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let corpus = data.splits.corpus();
    let mut chosen: Vec<usize> = cfg.list("report.utterances")?;
    if chosen.is_empty() {
        chosen = default_report_utterances(&data.splits);
    }
    if let Some(&bad) = chosen.iter().find(|&&u| u >= corpus.len()) {
        bail!("report.utterances: index {bad} is outside the corpus of {} records", corpus.len());
    }

    let mut index = String::from("index,label,text\n");
    let mut encoded = Vec::with_capacity(chosen.len());
    for &u in &chosen {
        let utt = &corpus[u];
        let enc = model.encode_instance(&data.vectors, utt.tokens())?;
        let mut csv = String::from("head");
        for t in utt.tokens() {
            csv.push(',');
            csv.push_str(&csv_field(t));
        }
        csv.push('\n');
        for h in 0..enc.a.rows() {
            let row: Vec<String> = enc.a.row(h).iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(csv, "{},{}", h + 1, row.join(","));
        }
        write_file(&dir.join(format!("attention_{u}.csv")), csv)?;
        let _ = writeln!(index, "{u},{},{}", csv_field(utt.label()), csv_field(&utt.tokens().join(" ")));
        encoded.push(enc);
    }
    write_file(&dir.join("utterances.csv"), index)?;

    let settings = model.config.settings();
    let mut header = vec!["row".to_string()];
    for dir_name in ["fwd", "bwd"] {
        for m in settings.matchers.enabled() {
            for k in 1..=model.config.perspectives {
                header.push(format!("{}_{dir_name}{k}", m.as_str()));
            }
        }
    }
    for i in 0..chosen.len() {
        for j in i + 1..chosen.len() {
            let mut g = Graph::new();
            let vars = ModelVars::bind(&mut g, &model.params, &model.config);
            let s = encoded[i].to_graph(&mut g);
            let t = encoded[j].to_graph(&mut g);
            let seq = match_all(&mut g, &s, &t, &vars.scorer.persp, &settings);
            let (f, b) = (g.value(seq.forward), g.value(seq.backward));
            let mut csv = header.join(",") + "\n";
            for r in 0..f.rows() {
                let vals: Vec<String> = f.row(r).iter().chain(b.row(r)).map(|v| format!("{v:.6}")).collect();
                let _ = writeln!(csv, "{},{}", r + 1, vals.join(","));
            }
            write_file(&dir.join(format!("match_{}_{}.csv", chosen[i], chosen[j])), csv)?;
        }
    }
    println!("wrote attention and match CSVs for {} utterances to {}", chosen.len(), dir.display());
    Ok(())
}
