//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// Every accepted key with its default; an empty default means unset.
const KEYS: &[(&str, &str)] = &[
    ("ablate.seeds", "0,1,2"),
    ("data.format", "tsv"),
    ("data.joint_fraction", "0.2"),
    ("data.manifest", ""),
    ("data.novel_labels", ""),
    ("data.path", ""),
    ("embeddings", "synthetic:300"),
    ("embeddings.seed", "0"),
    ("episode.C", "2"),
    ("episode.K", "1"),
    ("episode.NQ", "20"),
    ("episode.count", "1000"),
    ("eval.C", "2"),
    ("eval.episodes", "100"),
    ("eval.seeds", "0,1,2,3,4"),
    ("eval.space", "both"),
    ("gradcheck.seed", "0"),
    ("model.checkpoint", ""),
    ("model.d_a", "20"),
    ("model.d_h", "64"),
    ("model.match_level", "head"),
    ("model.matchers", "all"),
    ("model.perspectives", "5"),
    ("model.r", "4"),
    ("output.dir", "out"),
    ("precision", "64"),
    ("reg.alpha", "1e-4"),
    ("reg.beta", "1e-5"),
    ("reg.gamma", "0.01"),
    ("reg.kl_cap", "10"),
    ("report.utterances", ""),
    ("split.seed", "0"),
    ("threads", "1"),
    ("train.checkpoint_every", "100"),
    ("train.lr", "1e-4"),
    ("train.seed", "0"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|(k, _)| *k)
    }

    /// Defaults overlaid with `text`, one `key = value` per line; `#` starts a comment.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{source}:{}: expected `key = value`", n + 1))?;
            cfg.set(k.trim(), v.trim()).with_context(|| format!("{source}:{}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => bail!("unknown config key `{key}`"),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| anyhow!("override `{assignment}` is not key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn opt(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|v| !v.is_empty())
    }

    pub fn required(&self, key: &str) -> Result<&str> {
        self.opt(key).ok_or_else(|| anyhow!("config key `{key}` is required"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.required(key)?;
        raw.parse::<T>().map_err(|e| anyhow!("config key `{key}` = `{raw}`: {e}"))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|e| anyhow!("config key `{key}` item `{s}`: {e}")))
            .collect()
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("output.dir"))
    }

    /// Effective configuration in the same format [`RunConfig::parse`] reads.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
