#![allow(dead_code)]

use mitvg::data::synth::random_dialogue;
use mitvg::data::{EncodedDialogue, Limits, SyntheticWorld, Vocabulary};
use mitvg::ModelConfig;

/// Random dialogue for the tiny config: 3 objects, `rounds` rounds.
pub fn tiny_dialogue(seed: u64, rounds: usize) -> EncodedDialogue {
    let cfg = ModelConfig::tiny();
    random_dialogue(cfg.vocab_size, cfg.feature_dim, 3, rounds, seed)
}

/// A synthetic train/validation pair with its vocabulary, encoded for `cfg`
/// (whose `vocab_size` is updated to match).
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<EncodedDialogue>,
    pub val: Vec<EncodedDialogue>,
    pub config: ModelConfig,
}

pub fn synthetic_corpus(train: usize, val: usize, rounds: usize, seed: u64, mut cfg: ModelConfig) -> Corpus {
    let world = SyntheticWorld {
        feature_dim: cfg.feature_dim,
        ..SyntheticWorld::default()
    };
    let limits = Limits::from_config(&cfg);
    let tr = world.generate(train, rounds, seed).into_dataset(limits).unwrap();
    let va = SyntheticWorld {
        id_offset: train as u64,
        ..world
    }
    .generate(val, rounds, seed + 1)
    .into_dataset(limits)
    .unwrap();
    let vocab = Vocabulary::build(tr.texts(), cfg.vocab_min_count);
    cfg.vocab_size = vocab.len();
    Corpus {
        train: tr.encode(&vocab).unwrap(),
        val: va.encode(&vocab).unwrap(),
        vocab,
        config: cfg,
    }
}
