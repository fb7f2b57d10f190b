//! Frozen word vectors.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::corpus::LabeledUtterance;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";

/// Dense token ids; id 0 is the unknown-token slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self { index: HashMap::new(), tokens: Vec::new() };
        v.insert(UNK);
        v
    }

    /// Vocabulary over every token of `corpus`, in first-occurrence order.
    pub fn from_corpus(corpus: &[LabeledUtterance]) -> Self {
        let mut v = Self::new();
        for u in corpus {
            for t in u.tokens() {
                v.insert(t);
            }
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    /// Id of `token`, or 0 when out of vocabulary.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `|V| × d_w` lookup table. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
}

impl EmbeddingTable {
    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        if !matrix.is_finite() {
            return Err(Error::Embedding("table contains non-finite values".into()));
        }
        Ok(Self { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        self.matrix.row(id)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(f))
    } else {
        Box::new(f)
    };
    Ok(Box::new(BufReader::new(reader)))
}

/// Reads a `<count> <dim>` header followed by `token v_1 … v_dim` lines
/// (gzip-compressed when the path ends in `.gz`).
///
/// Vocabulary tokens found in the file take the file vector; the unknown slot
/// and every token missing from the file take the mean of all file vectors.
pub fn load_vectors(path: &Path, vocab: &Vocabulary) -> Result<EmbeddingTable> {
    read_vectors(open_maybe_gz(path)?, vocab, &path.display().to_string())
}

pub fn read_vectors<R: BufRead>(reader: R, vocab: &Vocabulary, source: &str) -> Result<EmbeddingTable> {
    let mut lines = reader.lines();
    let parse_err = |line: usize, msg: String| Error::Parse { path: source.to_string(), line, msg };
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing `<count> <dim>` header".into()))?
        .map_err(|e| Error::Io { path: source.to_string(), source: e })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let dim = match fields[..] {
        [count, dim] if count.parse::<usize>().is_ok() => {
            dim.parse::<usize>().ok().filter(|&d| d > 0).ok_or_else(|| parse_err(1, format!("bad dimension `{dim}`")))?
        }
        _ => return Err(parse_err(1, format!("malformed header `{header}`"))),
    };

    let mut matrix = Tensor::zeros(vocab.len(), dim);
    let mut found = vec![false; vocab.len()];
    let mut sum = vec![0.0; dim];
    let mut loaded = 0usize;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::Io { path: source.to_string(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.trim_end().split(' ');
        let token = parts.next().unwrap_or_default();
        let values: Vec<f64> = parts
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(lineno, format!("bad number `{s}`"))))
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(parse_err(lineno, format!("expected {dim} values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(lineno, "non-finite value".into()));
        }
        for (s, v) in sum.iter_mut().zip(&values) {
            *s += v;
        }
        loaded += 1;
        if token != UNK && vocab.contains(token) {
            let id = vocab.id(token);
            if !found[id] {
                matrix.row_mut(id).copy_from_slice(&values);
                found[id] = true;
            }
        }
    }
    if loaded == 0 {
        return Err(Error::Embedding(format!("{source}: no vectors loaded")));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / loaded as f64).collect();
    for (id, hit) in found.iter().enumerate() {
        if !hit {
            matrix.row_mut(id).copy_from_slice(&mean);
        }
    }
    EmbeddingTable::from_matrix(matrix)
}

fn token_seed(token: &str, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(token.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Deterministic `N(0, 1/d_w)` vectors keyed on `(token, seed)`.
pub fn synthesize_vectors(vocab: &Vocabulary, dim: usize, seed: u64) -> EmbeddingTable {
    assert!(dim >= 1, "embedding dimension must be positive");
    let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("valid std-dev");
    let mut matrix = Tensor::zeros(vocab.len(), dim);
    for id in 0..vocab.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(token_seed(vocab.token(id), seed));
        for v in matrix.row_mut(id) {
            *v = normal.sample(&mut rng);
        }
    }
    EmbeddingTable { matrix }
}

/// `T × d_w` matrix of the token vectors (unknown tokens map to the UNK row).
pub fn embed_tokens<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable, vocab: &Vocabulary) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::Embedding("cannot embed an empty token sequence".into()));
    }
    let dim = table.dim();
    let mut data = Vec::with_capacity(tokens.len() * dim);
    for t in tokens {
        data.extend_from_slice(table.vector(vocab.id(t.as_ref())));
    }
    Ok(Tensor::from_vec(tokens.len(), dim, data))
}

/// A vocabulary with its frozen table.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectors {
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
}

impl WordVectors {
    pub fn new(vocab: Vocabulary, table: EmbeddingTable) -> Self {
        assert_eq!(vocab.len(), table.rows(), "vocabulary and table sizes differ");
        Self { vocab, table }
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn embed<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Tensor> {
        embed_tokens(tokens, &self.table, &self.vocab)
    }
}
