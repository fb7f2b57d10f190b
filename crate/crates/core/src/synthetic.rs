//! Generated keyword corpora for smoke tests and benchmarks.
//!
//! Class `c` owns three exclusive keywords `kw{c}a`, `kw{c}b`, `kw{c}c`. Every
//! utterance carries two or three of its class keywords mixed into shared
//! filler tokens at random positions, so any two utterances of a class share a
//! keyword.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::LabeledUtterance;

pub const FILLERS: [&str; 16] = [
    "please", "the", "a", "for", "me", "can", "you", "now", "to", "some", "my", "with", "this", "i", "want", "find",
];

pub fn class_label(c: usize) -> String {
    format!("intent{c}")
}

pub fn class_keywords(c: usize) -> [String; 3] {
    [format!("kw{c}a"), format!("kw{c}b"), format!("kw{c}c")]
}

/// `n_classes × per_class` utterances of 4 to 7 tokens, grouped by class.
pub fn keyword_corpus(n_classes: usize, per_class: usize, seed: u64) -> Vec<LabeledUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_classes * per_class);
    for c in 0..n_classes {
        let keywords = class_keywords(c);
        let label = class_label(c);
        for _ in 0..per_class {
            let len = rng.random_range(4..=7);
            let n_kw = rng.random_range(2..=3);
            let mut tokens: Vec<String> = keywords.choose_multiple(&mut rng, n_kw).cloned().collect();
            while tokens.len() < len {
                tokens.push(FILLERS.choose(&mut rng).expect("fillers non-empty").to_string());
            }
            tokens.shuffle(&mut rng);
            out.push(LabeledUtterance::from_tokens(tokens, &label).expect("generated utterance is valid"));
        }
    }
    out
}

/// Tab-separated rendering accepted by [`crate::corpus::parse_records`].
pub fn to_tsv(corpus: &[LabeledUtterance]) -> String {
    corpus.iter().map(|u| format!("{}\t{}\n", u.tokens().join(" "), u.label())).collect()
}
