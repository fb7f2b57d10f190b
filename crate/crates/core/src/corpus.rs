//! Labeled utterance files and seen/novel/joint splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabeledUtterance {
    tokens: Vec<String>,
    label: String,
}

impl LabeledUtterance {
    /// Lowercases `text` and splits it on whitespace.
    pub fn from_text(text: &str, label: &str) -> Option<Self> {
        let tokens: Vec<String> = text.to_lowercase().split_whitespace().map(str::to_string).collect();
        Self::from_tokens(tokens, label)
    }

    pub fn from_tokens(tokens: Vec<String>, label: &str) -> Option<Self> {
        if tokens.is_empty() || tokens.iter().any(String::is_empty) || label.is_empty() {
            return None;
        }
        Some(Self { tokens, label: label.to_string() })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    Tsv,
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tsv" => Ok(Self::Tsv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(format!("unknown corpus format `{other}` (expected tsv or jsonl)")),
        }
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    text: String,
    label: String,
}

/// Reads one record per line. Blank lines are skipped.
pub fn parse_records<R: BufRead>(reader: R, format: CorpusFormat, source: &str) -> Result<Vec<LabeledUtterance>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Io { path: source.to_string(), source: e })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: source.to_string(), line: lineno, msg };
        let (text, label) = match format {
            CorpusFormat::Tsv => {
                let (text, label) =
                    line.rsplit_once('\t').ok_or_else(|| err("expected `text<TAB>label`".into()))?;
                (text.to_string(), label.trim().to_string())
            }
            CorpusFormat::Jsonl => {
                let rec: JsonRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
                (rec.text, rec.label)
            }
        };
        if label.is_empty() {
            return Err(err("empty label".into()));
        }
        let utt = LabeledUtterance::from_text(&text, &label).ok_or_else(|| err("empty text after tokenization".into()))?;
        out.push(utt);
    }
    Ok(out)
}

pub fn parse_dataset(path: &Path, format: CorpusFormat) -> Result<Vec<LabeledUtterance>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(BufReader::new(f), format, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub novel_labels: BTreeSet<String>,
    pub joint_fraction: f64,
    pub shots: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new<I, S>(novel_labels: I, shots: usize, seed: u64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { novel_labels: novel_labels.into_iter().map(Into::into).collect(), joint_fraction: 0.2, shots, seed }
    }
}

/// Which split a corpus record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Train,
    /// Seen-class carve-out; together with [`Pool::Novel`] it forms the joint test set.
    Joint,
    Novel,
    Support,
}

impl Pool {
    pub fn as_str(self) -> &'static str {
        match self {
            Pool::Train => "train",
            Pool::Joint => "joint",
            Pool::Novel => "novel",
            Pool::Support => "support",
        }
    }
}

impl FromStr for Pool {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Pool::Train),
            "joint" => Ok(Pool::Joint),
            "novel" => Ok(Pool::Novel),
            "support" => Ok(Pool::Support),
            other => Err(format!("unknown pool `{other}`")),
        }
    }
}

/// Disjoint partition of a corpus into training, test and support records.
///
/// Pools hold indices into [`DatasetSplits::corpus`] in ascending order.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    corpus: Vec<LabeledUtterance>,
    spec: SplitSpec,
    seen_labels: Vec<String>,
    novel_labels: Vec<String>,
    train_pool: Vec<usize>,
    seen_heldout: Vec<usize>,
    novel_test: Vec<usize>,
    support_shots: BTreeMap<String, Vec<usize>>,
}

fn labels_in(corpus: &[LabeledUtterance]) -> BTreeMap<&str, Vec<usize>> {
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in corpus.iter().enumerate() {
        by_label.entry(u.label()).or_default().push(i);
    }
    by_label
}

pub fn build_splits(corpus: &[LabeledUtterance], spec: &SplitSpec) -> Result<DatasetSplits> {
    if spec.novel_labels.is_empty() {
        return Err(Error::Split("no novel labels given".into()));
    }
    if !(spec.joint_fraction > 0.0 && spec.joint_fraction < 1.0) {
        return Err(Error::Split(format!("joint_fraction {} outside (0, 1)", spec.joint_fraction)));
    }
    if spec.shots == 0 {
        return Err(Error::Split("K must be at least 1".into()));
    }
    let by_label = labels_in(corpus);
    for n in &spec.novel_labels {
        if !by_label.contains_key(n.as_str()) {
            return Err(Error::Split(format!("unknown novel label `{n}`")));
        }
    }
    let k = spec.shots;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen_labels = Vec::new();
    let mut novel_labels = Vec::new();
    let mut train_pool = Vec::new();
    let mut seen_heldout = Vec::new();
    let mut novel_test = Vec::new();
    let mut support_shots = BTreeMap::new();

    for (label, indices) in &by_label {
        let mut idx = indices.clone();
        idx.shuffle(&mut rng);
        let count = idx.len();
        if spec.novel_labels.contains(*label) {
            if count < k + 1 {
                return Err(Error::Split(format!("novel class `{label}` has {count} samples, needs at least {}", k + 1)));
            }
            support_shots.insert(label.to_string(), sorted(&idx[..k]));
            novel_test.extend_from_slice(&idx[k..]);
            novel_labels.push(label.to_string());
        } else {
            let carve = (spec.joint_fraction * count as f64).floor() as usize;
            if carve == 0 {
                return Err(Error::Split(format!(
                    "seen class `{label}` has {count} samples, too few for joint_fraction {}",
                    spec.joint_fraction
                )));
            }
            if count - carve < k + 1 {
                return Err(Error::Split(format!(
                    "seen class `{label}` keeps {} samples after the joint carve-out, needs at least {}",
                    count - carve,
                    k + 1
                )));
            }
            seen_heldout.extend_from_slice(&idx[..carve]);
            support_shots.insert(label.to_string(), sorted(&idx[carve..carve + k]));
            train_pool.extend_from_slice(&idx[carve + k..]);
            seen_labels.push(label.to_string());
        }
    }
    train_pool.sort_unstable();
    seen_heldout.sort_unstable();
    novel_test.sort_unstable();
    Ok(DatasetSplits {
        corpus: corpus.to_vec(),
        spec: spec.clone(),
        seen_labels,
        novel_labels,
        train_pool,
        seen_heldout,
        novel_test,
        support_shots,
    })
}

fn sorted(idx: &[usize]) -> Vec<usize> {
    let mut v = idx.to_vec();
    v.sort_unstable();
    v
}

impl DatasetSplits {
    pub fn corpus(&self) -> &[LabeledUtterance] {
        &self.corpus
    }

    pub fn utterance(&self, index: usize) -> &LabeledUtterance {
        &self.corpus[index]
    }

    pub fn spec(&self) -> &SplitSpec {
        &self.spec
    }

    pub fn shots(&self) -> usize {
        self.spec.shots
    }

    /// Seen labels, sorted.
    pub fn seen_labels(&self) -> &[String] {
        &self.seen_labels
    }

    /// Novel labels, sorted.
    pub fn novel_labels(&self) -> &[String] {
        &self.novel_labels
    }

    /// Seen ∪ novel labels, sorted.
    pub fn joint_labels(&self) -> Vec<String> {
        let mut all: Vec<String> = self.seen_labels.iter().chain(&self.novel_labels).cloned().collect();
        all.sort();
        all
    }

    pub fn is_novel(&self, label: &str) -> bool {
        self.novel_labels.binary_search_by(|l| l.as_str().cmp(label)).is_ok()
    }

    pub fn train_pool(&self) -> &[usize] {
        &self.train_pool
    }

    /// The held-out seen portion of the joint test set.
    pub fn seen_heldout(&self) -> &[usize] {
        &self.seen_heldout
    }

    pub fn novel_test(&self) -> &[usize] {
        &self.novel_test
    }

    /// Held-out seen utterances together with the novel test utterances, in
    /// corpus order.
    pub fn joint_test(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.seen_heldout.iter().chain(&self.novel_test).copied().collect();
        v.sort_unstable();
        v
    }

    pub fn support_shots(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.support_shots
    }

    pub fn pool_of(&self, index: usize) -> Option<Pool> {
        let has = |v: &[usize]| v.binary_search(&index).is_ok();
        if has(&self.train_pool) {
            Some(Pool::Train)
        } else if has(&self.seen_heldout) {
            Some(Pool::Joint)
        } else if has(&self.novel_test) {
            Some(Pool::Novel)
        } else if self.support_shots.values().any(|v| has(v)) {
            Some(Pool::Support)
        } else {
            None
        }
    }

    /// Text manifest: a `# seed=… joint_fraction=… K=…` header, then one
    /// `pool<TAB>index` line per corpus record.
    pub fn manifest(&self) -> String {
        let mut s = format!(
            "# seed={} joint_fraction={} K={}\n",
            self.spec.seed, self.spec.joint_fraction, self.spec.shots
        );
        for i in 0..self.corpus.len() {
            let pool = self.pool_of(i).expect("every record is assigned a pool");
            let _ = writeln!(s, "{}\t{}", pool.as_str(), i);
        }
        s
    }

    /// Rebuilds splits from a manifest written by [`Self::manifest`] for the same corpus.
    pub fn from_manifest(corpus: &[LabeledUtterance], manifest: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse { path: "manifest".into(), line, msg };
        let mut lines = manifest.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty manifest".into()))?;
        let header = header.strip_prefix("# ").ok_or_else(|| bad(1, "missing `# ` header".into()))?;
        let mut seed = None;
        let mut fraction = None;
        let mut shots = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("seed", v)) => seed = v.parse::<u64>().ok(),
                Some(("joint_fraction", v)) => fraction = v.parse::<f64>().ok(),
                Some(("K", v)) => shots = v.parse::<usize>().ok(),
                _ => return Err(bad(1, format!("unexpected header field `{field}`"))),
            }
        }
        let (Some(seed), Some(joint_fraction), Some(shots)) = (seed, fraction, shots) else {
            return Err(bad(1, "header needs seed, joint_fraction and K".into()));
        };
        let mut assigned: Vec<Option<Pool>> = vec![None; corpus.len()];
        for (i, line) in lines {
            let (pool, index) = line.split_once('\t').ok_or_else(|| bad(i + 1, "expected `pool<TAB>index`".into()))?;
            let pool: Pool = pool.parse().map_err(|e| bad(i + 1, e))?;
            let index: usize = index.parse().map_err(|_| bad(i + 1, format!("bad index `{index}`")))?;
            let slot = assigned.get_mut(index).ok_or_else(|| bad(i + 1, format!("index {index} beyond corpus")))?;
            if slot.replace(pool).is_some() {
                return Err(bad(i + 1, format!("index {index} listed twice")));
            }
        }
        if let Some(missing) = assigned.iter().position(Option::is_none) {
            return Err(Error::Split(format!("manifest does not assign record {missing}")));
        }
        let mut train_pool = Vec::new();
        let mut seen_heldout = Vec::new();
        let mut novel_test = Vec::new();
        let mut support_shots: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (i, pool) in assigned.iter().enumerate() {
            let label = corpus[i].label().to_string();
            match pool.expect("checked above") {
                Pool::Train => {
                    train_pool.push(i);
                    seen.insert(label);
                }
                Pool::Joint => {
                    seen_heldout.push(i);
                    seen.insert(label);
                }
                Pool::Novel => novel_test.push(i),
                Pool::Support => support_shots.entry(label).or_default().push(i),
            }
        }
        let all: BTreeSet<String> = corpus.iter().map(|u| u.label().to_string()).collect();
        let novel: BTreeSet<String> = all.difference(&seen).cloned().collect();
        for (label, shots_of) in &support_shots {
            if shots_of.len() != shots {
                return Err(Error::Split(format!("class `{label}` has {} shots, header says K={shots}", shots_of.len())));
            }
        }
        if support_shots.len() != all.len() {
            return Err(Error::Split("manifest lacks support shots for some class".into()));
        }
        Ok(Self {
            corpus: corpus.to_vec(),
            spec: SplitSpec { novel_labels: novel.clone(), joint_fraction, shots, seed },
            seen_labels: seen.into_iter().collect(),
            novel_labels: novel.into_iter().collect(),
            train_pool,
            seen_heldout,
            novel_test,
            support_shots,
        })
    }
}
