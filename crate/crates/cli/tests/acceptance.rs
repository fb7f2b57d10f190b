//! Acceptance suite: one PASS/FAIL line per criterion. Criteria 1 to 7 gate
//! the exit status; criterion 8 runs only when real data is supplied through
//! `SMANET_SNIPS_DATA`, `SMANET_SNIPS_NOVEL` and `SMANET_VECTORS`.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use serde_json::Value;
use smanet_core::corpus::{build_splits, DatasetSplits, SplitSpec};
use smanet_core::diffcore::Tensor;
use smanet_core::embeddings::{synthesize_vectors, Vocabulary, WordVectors};
use smanet_core::episodes::{nonepisodic_tasks, Space};
use smanet_core::evaluation::{evaluate_nonepisodic, harmonic_accuracy, ModelScorer};
use smanet_core::model::ModelConfig;
use smanet_core::regularizers::{discr_penalty, self_attn_penalty, uniform_penalty};
use smanet_core::synthetic::{class_label, keyword_corpus, to_tsv};
use smanet_core::trainer::{check_model_gradients, train, GradCheckConfig, TrainConfig};
use tempfile::TempDir;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

const SYNTHETIC_LR: f64 = 5e-3;

fn synthetic_model() -> ModelConfig {
    ModelConfig { embed_dim: 16, hidden: 16, heads: 4, perspectives: 3, ..Default::default() }
}

fn synthetic_data(shots: usize, seed: u64) -> (DatasetSplits, WordVectors) {
    let corpus = keyword_corpus(8, 40, seed);
    let splits = build_splits(&corpus, &SplitSpec::new([class_label(6), class_label(7)], shots, seed)).expect("split");
    let vocab = Vocabulary::from_corpus(&corpus);
    let table = synthesize_vectors(&vocab, 16, seed);
    (splits, WordVectors::new(vocab, table))
}

fn cli(args: &[&str]) -> anyhow::Result<()> {
    smanet_cli::run(std::iter::once("smanet").chain(args.iter().copied()))
}

/// Writes the synthetic corpus and a matching config file; returns the config path.
fn synthetic_config(dir: &Path, extra: &str) -> String {
    let data = dir.join("data.tsv");
    fs::write(&data, to_tsv(&keyword_corpus(8, 40, 0))).unwrap();
    let cfg = dir.join("run.cfg");
    let text = format!(
        "data.path = {}\ndata.novel_labels = intent6,intent7\nembeddings = synthetic:16\nmodel.d_h = 16\n\
         model.perspectives = 3\ntrain.lr = {SYNTHETIC_LR}\n{extra}",
        data.display()
    );
    fs::write(&cfg, text).unwrap();
    cfg.display().to_string()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let check = match check_model_gradients(&GradCheckConfig::default()) {
        Ok(c) => c,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let elapsed = start.elapsed();
    let r = &check.report;
    let l = &check.loss;
    let components = [l.class, l.self_attn, l.uniform, l.discr];
    let covered = components.iter().all(|c| c.abs() > 0.0);
    let dir = TempDir::new().unwrap();
    let via_cli = cli(&["grad-check", "--out", dir.path().to_str().unwrap()]).is_ok();
    outcome(
        r.passed() && r.coords.len() >= 64 && r.max_rel_error() < 1e-3 && covered && via_cli && elapsed < Duration::from_secs(60),
        format!(
            "{} coordinates, max rel error {:.2e}, components {}, cli {}, {:.1}s",
            r.coords.len(),
            r.max_rel_error(),
            components.map(|c| format!("{c:.3e}")).join(" "),
            if via_cli { "ok" } else { "failed" },
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let ortho = self_attn_penalty(&Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]));
    let dup = self_attn_penalty(&Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]]));
    let point = uniform_penalty(&Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0, 0.0]]));
    let a = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![0.25, 0.25, 0.4, 0.1]]);
    let same = discr_penalty(&a, &a, true, 10.0);
    let ok = ortho.abs() <= 1e-9 && (dup - 2.0).abs() <= 1e-9 && (point - 5f64.ln()).abs() <= 1e-6 && same.abs() <= 1e-6;
    outcome(ok, format!("orthonormal {ortho:.2e}, duplicated {dup}, point-mass {point:.6} (ln 5), identical {same:.2e}"))
}

fn criterion_3() -> Outcome {
    let (a, b) = match (harmonic_accuracy(81.85, 95.84), harmonic_accuracy(66.1, 44.11)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return outcome(false, "harmonic_accuracy returned an error"),
    };
    outcome((a - 88.29).abs() <= 0.01 && (b - 52.91).abs() <= 0.01, format!("{a:.4} and {b:.4}"))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let (splits, vectors) = synthetic_data(1, 0);
    let cfg = TrainConfig { learning_rate: SYNTHETIC_LR, n_episodes: 300, model: synthetic_model(), ..Default::default() };
    let result = train(&cfg, &splits, &vectors);
    let elapsed = start.elapsed();
    match result {
        Ok(o) => {
            let acc = o.log.tail_accuracy(50);
            outcome(
                acc >= 95.0 && elapsed < Duration::from_secs(300),
                format!("final-50 query accuracy {acc:.2}%, {:.1}s", elapsed.as_secs_f64()),
            )
        }
        Err(e) => outcome(false, format!("error: {e}")),
    }
}

fn criterion_5() -> Outcome {
    let mut joint = Vec::new();
    let mut novel = Vec::new();
    for seed in 0..3 {
        let (splits, vectors) = synthetic_data(5, seed);
        let cfg = TrainConfig {
            learning_rate: SYNTHETIC_LR,
            n_episodes: 500,
            shots: 5,
            model: synthetic_model(),
            seed,
            ..Default::default()
        };
        let run = || -> smanet_core::Result<(f64, f64)> {
            let o = train(&cfg, &splits, &vectors)?;
            let scorer = ModelScorer::new(&o.model, &vectors, splits.corpus());
            let j = evaluate_nonepisodic(&scorer, &nonepisodic_tasks(&splits, Space::Joint)?, 1)?.accuracy();
            let n = evaluate_nonepisodic(&scorer, &nonepisodic_tasks(&splits, Space::Novel)?, 1)?.accuracy();
            Ok((j, n))
        };
        match run() {
            Ok((j, n)) => {
                joint.push(j);
                novel.push(n);
            }
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        }
    }
    let mj = joint.iter().sum::<f64>() / 3.0;
    let mn = novel.iter().sum::<f64>() / 3.0;
    outcome(mj >= 70.0 && mn >= 70.0, format!("joint {mj:.2}%, novel {mn:.2}% (per seed joint {joint:.2?}, novel {novel:.2?})"))
}

fn variant_h(rows: &Value, name: &str) -> Option<f64> {
    rows.as_array()?.iter().find(|r| r["variant"] == name)?["h_acc"].as_f64()
}

fn criterion_6() -> Outcome {
    let dir = TempDir::new().unwrap();
    let cfg = synthetic_config(dir.path(), "episode.count = 300\nablate.seeds = 0,1,2\n");
    let out = dir.path().join("out");
    if let Err(e) = cli(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()]) {
        return outcome(false, format!("ablate failed: {e:#}"));
    }
    let report: Value = match fs::read_to_string(out.join("ablation.json")).map(|s| serde_json::from_str(&s)) {
        Ok(Ok(v)) => v,
        _ => return outcome(false, "ablation.json missing or malformed"),
    };
    let singles = ["head_wise", "max_attentive", "attentive", "max_pool"];
    let regs = ["w/o L_self_attn", "w/o L_uniform", "w/o L_discr"];
    let shaped = singles.iter().chain(["full"].iter()).all(|v| variant_h(&report["matchers"], v).is_some())
        && regs.iter().chain(["full"].iter()).all(|v| variant_h(&report["regularizers"], v).is_some())
        && out.join("ablation.txt").exists();
    if !shaped {
        return outcome(false, "ablation grids are missing variants");
    }
    let full = variant_h(&report["matchers"], "full").unwrap();
    let (best_name, best) = singles
        .iter()
        .map(|v| (*v, variant_h(&report["matchers"], v).unwrap()))
        .fold(("", f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
    outcome(full >= best - 2.0, format!("full h-acc {full:.2}, best single {best_name} {best:.2}"))
}

fn criterion_7() -> Outcome {
    let dir = TempDir::new().unwrap();
    let cfg = synthetic_config(dir.path(), "episode.count = 60\ntrain.seed = 3\n");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let out = out.to_str().unwrap();
        for cmd in ["train", "eval-nonepisodic"] {
            if let Err(e) = cli(&[cmd, "--config", &cfg, "--out", out]) {
                return outcome(false, format!("{cmd} failed: {e:#}"));
            }
        }
        match fs::read(Path::new(out).join("metrics_nonepisodic_both.json")) {
            Ok(bytes) => outputs.push(bytes),
            Err(e) => return outcome(false, format!("metrics missing: {e}")),
        }
    }
    outcome(outputs[0] == outputs[1], format!("{} bytes each, identical: {}", outputs[0].len(), outputs[0] == outputs[1]))
}

/// Real-data reproduction: `None` when the inputs are not supplied.
fn criterion_8() -> Option<Outcome> {
    let data = std::env::var("SMANET_SNIPS_DATA").ok()?;
    let novel = std::env::var("SMANET_SNIPS_NOVEL").ok()?;
    let vectors = std::env::var("SMANET_VECTORS").ok()?;
    let dir = TempDir::new().unwrap();
    let mut h = Vec::new();
    for seed in 0..5u64 {
        let out = dir.path().join(format!("seed{seed}"));
        let out = out.to_str().unwrap();
        let sets = [
            format!("data.path={data}"),
            format!("data.novel_labels={novel}"),
            format!("embeddings={vectors}"),
            format!("split.seed={seed}"),
            format!("train.seed={seed}"),
        ];
        let mut args = vec![];
        for s in &sets {
            args.extend(["--set", s.as_str()]);
        }
        args.extend(["--out", out]);
        for cmd in ["train", "eval-nonepisodic"] {
            let mut a = vec![cmd];
            a.extend(args.iter().copied());
            if let Err(e) = cli(&a) {
                return Some(outcome(false, format!("seed {seed} {cmd}: {e:#}")));
            }
        }
        let json = fs::read_to_string(Path::new(out).join("metrics_nonepisodic_both.json")).ok()?;
        let v: Value = serde_json::from_str(&json).ok()?;
        h.push(v["h_acc"].as_f64()?);
    }
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    Some(outcome((mean - 88.29).abs() <= 3.0, format!("mean 1-shot h-acc {mean:.2} over 5 seeds (target 88.29 ± 3)")))
}

fn main() -> ExitCode {
    // libtest flags such as `--nocapture` may be forwarded; none apply here.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }
    type Criterion = (&'static str, fn() -> Outcome);
    let gating: [Criterion; 7] = [
        ("gradient correctness", criterion_1),
        ("analytic regularizers", criterion_2),
        ("metric arithmetic", criterion_3),
        ("synthetic learnability", criterion_4),
        ("generalized-setting sanity", criterion_5),
        ("ablation harness", criterion_6),
        ("determinism", criterion_7),
    ];
    let mut all = true;
    for (i, (name, run)) in gating.iter().enumerate() {
        let o = run();
        all &= o.passed;
        println!("criterion {} {name}: {} ({})", i + 1, if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    match criterion_8() {
        Some(o) => println!(
            "criterion 8 real-data reproduction (non-gating): {} ({})",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        ),
        None => println!(
            "criterion 8 real-data reproduction (non-gating): SKIP (set SMANET_SNIPS_DATA, SMANET_SNIPS_NOVEL and SMANET_VECTORS)"
        ),
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
