//! Fixtures shared by the benchmarks.

use smanet_core::corpus::{build_splits, DatasetSplits, SplitSpec};
use smanet_core::embeddings::{synthesize_vectors, Vocabulary, WordVectors};
use smanet_core::model::{Model, ModelConfig};
use smanet_core::synthetic::{class_label, keyword_corpus};

pub struct Fixture {
    pub splits: DatasetSplits,
    pub vectors: WordVectors,
    pub model: Model,
}

/// Eight-class keyword corpus with two novel classes and a model sized like
/// the synthetic acceptance runs.
pub fn fixture(shots: usize) -> Fixture {
    let corpus = keyword_corpus(8, 40, 0);
    let splits = build_splits(&corpus, &SplitSpec::new([class_label(6), class_label(7)], shots, 0)).expect("valid split");
    let vocab = Vocabulary::from_corpus(&corpus);
    let vectors = WordVectors::new(vocab.clone(), synthesize_vectors(&vocab, 16, 0));
    let config = ModelConfig { embed_dim: 16, hidden: 16, perspectives: 3, ..Default::default() };
    let model = Model::new(config, 0).expect("valid config");
    Fixture { splits, vectors, model }
}
