//! Small fixtures shared by unit tests.

use std::collections::BTreeMap;

use crate::corpus::{generate_corpus, CorpusSet, GenerationSpec, TierThresholds};
use crate::transformer::{ModelConfig, TransformerModel};

pub fn tiny_spec() -> GenerationSpec {
    let sizes: BTreeMap<String, usize> =
        [("aa", 60), ("ab", 20), ("ba", 8)].iter().map(|(l, n)| (l.to_string(), *n)).collect();
    GenerationSpec {
        families: vec![vec!["aa".into(), "ab".into()], vec!["ba".into()]],
        sizes,
        valid_size: 6,
        test_size: 6,
        zero_shot_test_size: 4,
        extension: vec![],
        pivot_words: 24,
        min_len: 2,
        max_len: 5,
        tiers: TierThresholds { low_max: 10, rich_min: 50 },
        ..GenerationSpec::default()
    }
}

pub fn tiny_corpus() -> CorpusSet {
    generate_corpus(&tiny_spec()).unwrap()
}

pub fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        d_model: 16,
        num_heads: 2,
        d_ff: 32,
        vocab_size: vocab,
        max_seq_len: 12,
        dropout: 0.0,
        label_smoothing: 0.1,
        seed: 3,
    }
}

pub fn tiny_model(corpus: &CorpusSet) -> TransformerModel<f32> {
    TransformerModel::build(&tiny_config(corpus.registry.vocab_size())).unwrap()
}
