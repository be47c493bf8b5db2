//! Vocabulary, tokenization, dataset and feature files, and the synthetic
//! benchmark generator.

mod dataset;
mod features;
pub mod synth;
mod text;

pub use dataset::{
    parse_records, records_to_jsonl, CandidateSet, Dataset, DialogueExample, DialogueRecord, EncodedCandidates,
    EncodedDialogue, EncodedRound, Limits, Round, RoundRecord,
};
pub use features::{FeatureSet, ImageFeatures, FEATURE_MAGIC};
pub use synth::{SyntheticSplit, SyntheticWorld};
pub use text::{normalize_and_tokenize, Vocabulary, BOS, EOS, NUM_SPECIALS, PAD, SEP, UNK};
