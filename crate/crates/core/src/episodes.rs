//! Episode sampling for training and episodic evaluation, and the fixed
//! tasks used by non-episodic evaluation.
//!
//! Episodes refer to utterances by their index into the split's corpus.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplits, LabeledUtterance};
use crate::error::{Error, Result};

/// Default number of queries per episode.
pub const DEFAULT_QUERIES: usize = 20;

/// Class-resampling budget for generalized episodes.
pub const GFSL_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelPool {
    Seen,
    Novel,
    Joint,
}

impl LabelPool {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelPool::Seen => "seen",
            LabelPool::Novel => "novel",
            LabelPool::Joint => "joint",
        }
    }
}

impl fmt::Display for LabelPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelPool {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "seen" => Ok(LabelPool::Seen),
            "novel" => Ok(LabelPool::Novel),
            "joint" => Ok(LabelPool::Joint),
            other => Err(format!("unknown label pool `{other}` (expected seen, novel or joint)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    /// `C`
    pub classes: usize,
    /// `K`
    pub shots: usize,
    /// `N_Q`
    pub queries: usize,
    pub label_pool: LabelPool,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn new(classes: usize, shots: usize, label_pool: LabelPool, seed: u64) -> Self {
        Self { classes, shots, queries: DEFAULT_QUERIES, label_pool, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Episode(format!("C must be at least 2, got {}", self.classes)));
        }
        if self.shots == 0 {
            return Err(Error::Episode("K must be at least 1".into()));
        }
        if self.queries == 0 {
            return Err(Error::Episode("N_Q must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub classes: Vec<String>,
    /// `support[c]` holds the `K` utterances of `classes[c]`.
    pub support: Vec<Vec<usize>>,
    /// `(utterance, class index)` pairs.
    pub queries: Vec<(usize, usize)>,
}

impl Episode {
    pub fn support_labels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.support.iter().enumerate().flat_map(|(c, s)| s.iter().map(move |&u| (u, c)))
    }
}

/// Independent stream for episode `index` under `seed`. Stream 0 is left to
/// parameter initialization.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

fn group_by_label<'a>(corpus: &'a [LabeledUtterance], pool: &[usize]) -> BTreeMap<&'a str, Vec<usize>> {
    let mut by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in pool {
        by.entry(corpus[i].label()).or_default().push(i);
    }
    by
}

fn choose_k<R: Rng + ?Sized>(items: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    sample(rng, items.len(), k).into_iter().map(|i| items[i]).collect()
}

/// `C` classes of the pool, `K` supports each, and `N_Q` queries drawn from
/// the remaining utterances of those classes.
pub fn sample_training_episode<R: Rng + ?Sized>(
    corpus: &[LabeledUtterance],
    pool: &[usize],
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    spec.validate()?;
    let by = group_by_label(corpus, pool);
    if spec.classes > by.len() {
        return Err(Error::Episode(format!("C={} exceeds the {} classes in the pool", spec.classes, by.len())));
    }
    let labels: Vec<&str> = by.keys().copied().collect();
    let picked: Vec<usize> = sample(rng, labels.len(), spec.classes).into_vec();
    let mut classes = Vec::with_capacity(spec.classes);
    let mut support = Vec::with_capacity(spec.classes);
    let mut rest: Vec<(usize, usize)> = Vec::new();
    for (c, &li) in picked.iter().enumerate() {
        let items = &by[labels[li]];
        if items.len() <= spec.shots {
            return Err(Error::Episode(format!(
                "class `{}` has {} utterances, needs at least K+1 = {}",
                labels[li],
                items.len(),
                spec.shots + 1
            )));
        }
        let chosen = sample(rng, items.len(), spec.shots);
        let mut taken = vec![false; items.len()];
        let mut s = Vec::with_capacity(spec.shots);
        for i in chosen {
            taken[i] = true;
            s.push(items[i]);
        }
        rest.extend(items.iter().zip(&taken).filter(|(_, t)| !**t).map(|(&u, _)| (u, c)));
        classes.push(labels[li].to_string());
        support.push(s);
    }
    if rest.len() < spec.queries {
        return Err(Error::Episode(format!(
            "only {} utterances left for {} queries in classes {:?}",
            rest.len(),
            spec.queries,
            classes
        )));
    }
    let queries = sample(rng, rest.len(), spec.queries).into_iter().map(|i| rest[i]).collect();
    Ok(Episode { classes, support, queries })
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Uniform draw of `c` labels from `seen ∪ novel`, restricted to sets that
/// contain both kinds whenever that is possible.
fn constrained_classes<R: Rng + ?Sized>(seen: &[String], novel: &[String], c: usize, rng: &mut R) -> Vec<String> {
    let (s, n) = (seen.len(), novel.len());
    let lo = if s > 0 && n > 0 && c >= 2 { 1.max(c.saturating_sub(s)) } else { c.saturating_sub(s) };
    let hi = if s > 0 && n > 0 && c >= 2 { (c - 1).min(n) } else { c.min(n) };
    let weights: Vec<f64> = (lo..=hi).map(|j| binomial(s, c - j) * binomial(n, j)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut n_novel = hi;
    for (j, w) in (lo..=hi).zip(&weights) {
        if u < *w {
            n_novel = j;
            break;
        }
        u -= w;
    }
    let mut out: Vec<String> = sample(rng, s, c - n_novel).into_iter().map(|i| seen[i].clone()).collect();
    out.extend(sample(rng, n, n_novel).into_iter().map(|i| novel[i].clone()));
    out
}

fn shots_for<'a>(splits: &'a DatasetSplits, label: &str, k: usize) -> Result<&'a [usize]> {
    let shots = splits
        .support_shots()
        .get(label)
        .ok_or_else(|| Error::Episode(format!("no support shots for `{label}`")))?;
    if shots.len() != k {
        return Err(Error::Episode(format!(
            "splits hold {} shots per class but the episode asks for K={k}",
            shots.len()
        )));
    }
    Ok(shots)
}

fn draw_queries<R: Rng + ?Sized>(
    corpus: &[LabeledUtterance],
    test: &[usize],
    classes: &[String],
    n: usize,
    rng: &mut R,
) -> Option<Vec<(usize, usize)>> {
    let candidates: Vec<(usize, usize)> = test
        .iter()
        .filter_map(|&u| classes.iter().position(|c| c == corpus[u].label()).map(|c| (u, c)))
        .collect();
    (candidates.len() >= n).then(|| sample(rng, candidates.len(), n).into_iter().map(|i| candidates[i]).collect())
}

/// Generalized episode over the joint label space. Novel classes use the
/// split's pre-sampled shots; seen classes draw supports from the training
/// pool. Queries come from the joint test set.
pub fn sample_gfsl_episode<R: Rng + ?Sized>(splits: &DatasetSplits, spec: &EpisodeSpec, rng: &mut R) -> Result<Episode> {
    spec.validate()?;
    let (seen, novel) = (splits.seen_labels(), splits.novel_labels());
    if spec.classes > seen.len() + novel.len() {
        return Err(Error::Episode(format!(
            "C={} exceeds the {} joint classes",
            spec.classes,
            seen.len() + novel.len()
        )));
    }
    let corpus = splits.corpus();
    let train = group_by_label(corpus, splits.train_pool());
    let joint_test = splits.joint_test();
    for _ in 0..GFSL_ATTEMPTS {
        let classes = constrained_classes(seen, novel, spec.classes, rng);
        let Some(queries) = draw_queries(corpus, &joint_test, &classes, spec.queries, rng) else {
            continue;
        };
        let mut support = Vec::with_capacity(classes.len());
        for c in &classes {
            if splits.is_novel(c) {
                support.push(shots_for(splits, c, spec.shots)?.to_vec());
            } else {
                let items = train.get(c.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                if items.len() < spec.shots {
                    return Err(Error::Episode(format!("seen class `{c}` has fewer than K={} training utterances", spec.shots)));
                }
                support.push(choose_k(items, spec.shots, rng));
            }
        }
        return Ok(Episode { classes, support, queries });
    }
    Err(Error::Episode(format!(
        "could not find {} joint-test queries for sampled classes after {GFSL_ATTEMPTS} attempts",
        spec.queries
    )))
}

/// Episode over novel classes only: supports are the pre-sampled shots and
/// queries come from the novel test set.
pub fn sample_novel_episode<R: Rng + ?Sized>(splits: &DatasetSplits, spec: &EpisodeSpec, rng: &mut R) -> Result<Episode> {
    spec.validate()?;
    let novel = splits.novel_labels();
    if spec.classes > novel.len() {
        return Err(Error::Episode(format!("C={} exceeds the {} novel classes", spec.classes, novel.len())));
    }
    let corpus = splits.corpus();
    for _ in 0..GFSL_ATTEMPTS {
        let classes: Vec<String> = sample(rng, novel.len(), spec.classes).into_iter().map(|i| novel[i].clone()).collect();
        let Some(queries) = draw_queries(corpus, splits.novel_test(), &classes, spec.queries, rng) else {
            continue;
        };
        let support = classes.iter().map(|c| shots_for(splits, c, spec.shots).map(<[usize]>::to_vec)).collect::<Result<_>>()?;
        return Ok(Episode { classes, support, queries });
    }
    Err(Error::Episode(format!("not enough novel-test queries for N_Q={}", spec.queries)))
}

/// Dispatches on `spec.label_pool`: seen episodes come from the training pool.
pub fn sample_episode<R: Rng + ?Sized>(splits: &DatasetSplits, spec: &EpisodeSpec, rng: &mut R) -> Result<Episode> {
    match spec.label_pool {
        LabelPool::Seen => sample_training_episode(splits.corpus(), splits.train_pool(), spec, rng),
        LabelPool::Novel => sample_novel_episode(splits, spec, rng),
        LabelPool::Joint => sample_gfsl_episode(splits, spec, rng),
    }
}

/// Label space of a non-episodic task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Novel,
    Joint,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::Novel => "novel",
            Space::Joint => "joint",
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Space {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "novel" => Ok(Space::Novel),
            "joint" => Ok(Space::Joint),
            other => Err(format!("unknown space `{other}` (expected novel or joint)")),
        }
    }
}

/// Fixed label space with its supports and every test utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct NonEpisodicTask {
    pub space: Space,
    pub labels: Vec<String>,
    pub support: Vec<Vec<usize>>,
    /// `(utterance, label index)` in corpus order.
    pub test: Vec<(usize, usize)>,
}

pub fn nonepisodic_tasks(splits: &DatasetSplits, space: Space) -> Result<NonEpisodicTask> {
    let labels = match space {
        Space::Novel => splits.novel_labels().to_vec(),
        Space::Joint => splits.joint_labels(),
    };
    let k = splits.shots();
    let support = labels.iter().map(|l| shots_for(splits, l, k).map(<[usize]>::to_vec)).collect::<Result<Vec<_>>>()?;
    let test_idx = match space {
        Space::Novel => splits.novel_test().to_vec(),
        Space::Joint => splits.joint_test(),
    };
    let corpus = splits.corpus();
    let test = test_idx
        .into_iter()
        .map(|u| {
            let label = corpus[u].label();
            labels
                .binary_search_by(|l| l.as_str().cmp(label))
                .map(|c| (u, c))
                .map_err(|_| Error::Episode(format!("test label `{label}` is not in the {space} space")))
        })
        .collect::<Result<_>>()?;
    Ok(NonEpisodicTask { space, labels, support, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_splits, SplitSpec};

    fn corpus(classes: usize, per: usize) -> Vec<LabeledUtterance> {
        (0..classes)
            .flat_map(|c| (0..per).map(move |i| LabeledUtterance::from_text(&format!("w{c} x{i}"), &format!("c{c}")).unwrap()))
            .collect()
    }

    #[test]
    fn tiny_training_episode_is_disjoint() {
        let data = corpus(2, 3);
        let pool: Vec<usize> = (0..6).collect();
        let spec = EpisodeSpec { queries: 2, ..EpisodeSpec::new(2, 1, LabelPool::Seen, 0) };
        for i in 0..50 {
            let ep = sample_training_episode(&data, &pool, &spec, &mut episode_rng(1, i)).unwrap();
            let supports: Vec<usize> = ep.support_labels().map(|(u, _)| u).collect();
            assert!(ep.queries.iter().all(|(u, _)| !supports.contains(u)));
            for &(u, c) in &ep.queries {
                assert_eq!(data[u].label(), ep.classes[c]);
            }
        }
    }

    #[test]
    fn same_stream_same_episode() {
        let data = corpus(4, 6);
        let pool: Vec<usize> = (0..24).collect();
        let spec = EpisodeSpec { queries: 4, ..EpisodeSpec::new(3, 2, LabelPool::Seen, 0) };
        let a = sample_training_episode(&data, &pool, &spec, &mut episode_rng(9, 3)).unwrap();
        let b = sample_training_episode(&data, &pool, &spec, &mut episode_rng(9, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors_on_small_classes_and_large_c() {
        let data = corpus(2, 2);
        let pool: Vec<usize> = (0..4).collect();
        let mut spec = EpisodeSpec { queries: 1, ..EpisodeSpec::new(2, 2, LabelPool::Seen, 0) };
        assert!(sample_training_episode(&data, &pool, &spec, &mut episode_rng(0, 0)).is_err());
        spec.shots = 1;
        spec.classes = 3;
        assert!(sample_training_episode(&data, &pool, &spec, &mut episode_rng(0, 0)).is_err());
    }

    #[test]
    fn forced_mix_with_one_seen_and_one_novel() {
        let data = corpus(2, 10);
        let splits = build_splits(&data, &SplitSpec::new(["c1"], 1, 4)).unwrap();
        let spec = EpisodeSpec { queries: 3, ..EpisodeSpec::new(2, 1, LabelPool::Joint, 0) };
        let ep = sample_gfsl_episode(&splits, &spec, &mut episode_rng(0, 0)).unwrap();
        let mut classes = ep.classes.clone();
        classes.sort();
        assert_eq!(classes, ["c0", "c1"]);
        let novel = ep.classes.iter().position(|c| c == "c1").unwrap();
        assert_eq!(ep.support[novel], splits.support_shots()["c1"]);
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(5, 2), 10.0);
        assert_eq!(binomial(2, 3), 0.0);
        assert_eq!(binomial(7, 0), 1.0);
    }
}
