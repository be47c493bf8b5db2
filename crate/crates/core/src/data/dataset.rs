//! JSON-lines dialogue files and their tokenized, id-encoded forms.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::{FeatureSet, ImageFeatures};
use super::text::{normalize_and_tokenize, Vocabulary};
use crate::error::{Error, Result};

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueRecord {
    pub image_id: u64,
    pub caption: String,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default)]
    pub grounding: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<Vec<f64>>,
}

/// Truncation limits applied when text is tokenized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub caption: usize,
    pub question: usize,
    pub answer: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            caption: 40,
            question: 20,
            answer: 20,
        }
    }
}

impl Limits {
    pub fn from_config(cfg: &crate::config::ModelConfig) -> Self {
        Self {
            caption: cfg.max_caption_len,
            question: cfg.max_question_len,
            answer: cfg.max_answer_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub answers: Vec<Vec<String>>,
    pub gt_index: usize,
    /// Dense relevance in [0, 1], one entry per candidate.
    pub relevance: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Round {
    pub question: Vec<String>,
    pub answer: Option<Vec<String>>,
    /// Object rows named by the question; empty means the whole image.
    pub grounding: Vec<usize>,
    pub candidates: Option<CandidateSet>,
}

/// A tokenized dialogue: caption, then ordered question/answer rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueExample {
    pub image_id: u64,
    pub caption: Vec<String>,
    pub rounds: Vec<Round>,
}

fn truncate(mut v: Vec<String>, n: usize) -> Vec<String> {
    v.truncate(n);
    v
}

impl DialogueExample {
    /// Tokenizes and validates one record. `image` enables grounding-range checks.
    pub fn from_record(
        rec: &DialogueRecord,
        limits: Limits,
        image: Option<&ImageFeatures>,
        line: usize,
    ) -> Result<Self> {
        let caption = truncate(normalize_and_tokenize(&rec.caption), limits.caption);
        if caption.is_empty() {
            return Err(Error::data_at(line, "caption", "empty after tokenization"));
        }
        if rec.rounds.is_empty() {
            return Err(Error::data_at(line, "rounds", "dialogue has no rounds"));
        }
        let mut rounds = Vec::with_capacity(rec.rounds.len());
        for (i, r) in rec.rounds.iter().enumerate() {
            let field = |f: &str| format!("rounds[{i}].{f}");
            let question = truncate(normalize_and_tokenize(&r.question), limits.question);
            if question.is_empty() {
                return Err(Error::data_at(line, field("question"), "empty after tokenization"));
            }
            let answer = match &r.answer {
                Some(a) => {
                    let a = truncate(normalize_and_tokenize(a), limits.answer);
                    if a.is_empty() {
                        return Err(Error::data_at(line, field("answer"), "empty after tokenization"));
                    }
                    Some(a)
                }
                None => None,
            };
            if let Some(img) = image {
                if let Some(&bad) = r.grounding.iter().find(|&&k| k >= img.objects()) {
                    return Err(Error::data_at(
                        line,
                        field("grounding"),
                        format!(
                            "round {} grounds object {bad} but image has {} objects",
                            i + 1,
                            img.objects()
                        ),
                    ));
                }
            }
            let candidates = match (&r.candidates, r.gt_index) {
                (None, None) if r.relevance.is_none() => None,
                (Some(c), Some(gt)) => {
                    if c.is_empty() {
                        return Err(Error::data_at(line, field("candidates"), "empty candidate list"));
                    }
                    if gt >= c.len() {
                        return Err(Error::data_at(
                            line,
                            field("gt_index"),
                            format!("{gt} out of range for {} candidates", c.len()),
                        ));
                    }
                    if let Some(rel) = &r.relevance {
                        if rel.len() != c.len() {
                            return Err(Error::data_at(
                                line,
                                field("relevance"),
                                "length differs from candidates",
                            ));
                        }
                        if rel.iter().any(|v| !(0.0..=1.0).contains(v)) {
                            return Err(Error::data_at(line, field("relevance"), "values must lie in [0, 1]"));
                        }
                    }
                    let answers = c
                        .iter()
                        .map(|s| truncate(normalize_and_tokenize(s), limits.answer))
                        .collect();
                    Some(CandidateSet {
                        answers,
                        gt_index: gt,
                        relevance: r.relevance.clone(),
                    })
                }
                (Some(_), None) => return Err(Error::data_at(line, field("gt_index"), "candidates without gt_index")),
                _ => {
                    return Err(Error::data_at(
                        line,
                        field("candidates"),
                        "gt_index or relevance without candidates",
                    ))
                }
            };
            rounds.push(Round {
                question,
                answer,
                grounding: r.grounding.clone(),
                candidates,
            });
        }
        Ok(Self {
            image_id: rec.image_id,
            caption,
            rounds,
        })
    }
}

fn field_of(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    // serde reports "missing field `x`" / "unknown field `x`" / "invalid type ..."
    msg.split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "record".to_string())
}

pub fn parse_records(text: &str) -> Result<Vec<(usize, DialogueRecord)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogueRecord =
            serde_json::from_str(line).map_err(|e| Error::data_at(n + 1, field_of(&e), e.to_string()))?;
        out.push((n + 1, rec));
    }
    Ok(out)
}

pub fn records_to_jsonl(records: &[DialogueRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

/// A validated split: dialogues plus the features of every referenced image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<DialogueExample>,
    pub features: FeatureSet,
}

impl Dataset {
    pub fn from_parts(jsonl: &str, features: FeatureSet, limits: Limits) -> Result<Self> {
        Self::from_numbered(parse_records(jsonl)?, features, limits)
    }

    /// Validates in-memory records; record `i` is reported as line `i + 1`.
    pub fn from_records(records: Vec<DialogueRecord>, features: FeatureSet, limits: Limits) -> Result<Self> {
        Self::from_numbered(
            records.into_iter().enumerate().map(|(i, r)| (i + 1, r)).collect(),
            features,
            limits,
        )
    }

    fn from_numbered(records: Vec<(usize, DialogueRecord)>, features: FeatureSet, limits: Limits) -> Result<Self> {
        let mut examples = Vec::new();
        for (line, rec) in records {
            let img = features
                .get(rec.image_id)
                .ok_or_else(|| Error::data_at(line, "image_id", format!("no features for image {}", rec.image_id)))?;
            examples.push(DialogueExample::from_record(&rec, limits, Some(img), line)?);
        }
        Ok(Self { examples, features })
    }

    pub fn load(jsonl: &Path, features: &Path, limits: Limits) -> Result<Self> {
        let feats = FeatureSet::load(features)?;
        Self::from_parts(&fs::read_to_string(jsonl)?, feats, limits)
    }

    /// All text used for vocabulary construction (captions, questions, answers).
    pub fn texts(&self) -> impl Iterator<Item = &[String]> {
        self.examples.iter().flat_map(|e| {
            std::iter::once(e.caption.as_slice()).chain(
                e.rounds
                    .iter()
                    .flat_map(|r| std::iter::once(r.question.as_slice()).chain(r.answer.as_deref())),
            )
        })
    }

    pub fn encode(&self, vocab: &Vocabulary) -> Result<Vec<EncodedDialogue>> {
        self.examples
            .iter()
            .map(|e| {
                let img = self
                    .features
                    .get(e.image_id)
                    .ok_or_else(|| Error::data("image_id", format!("no features for image {}", e.image_id)))?;
                Ok(EncodedDialogue::new(e, img.clone(), vocab))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCandidates {
    pub answers: Vec<Vec<usize>>,
    pub gt_index: usize,
    pub relevance: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedRound {
    pub question: Vec<usize>,
    pub answer: Option<Vec<usize>>,
    pub grounding: Vec<usize>,
    pub candidates: Option<EncodedCandidates>,
}

/// Model-ready dialogue: token ids plus the image's object features.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDialogue {
    pub image_id: u64,
    pub image: ImageFeatures,
    pub caption: Vec<usize>,
    pub rounds: Vec<EncodedRound>,
}

impl EncodedDialogue {
    pub fn new(ex: &DialogueExample, image: ImageFeatures, vocab: &Vocabulary) -> Self {
        Self {
            image_id: ex.image_id,
            image,
            caption: vocab.encode(&ex.caption),
            rounds: ex
                .rounds
                .iter()
                .map(|r| EncodedRound {
                    question: vocab.encode(&r.question),
                    answer: r.answer.as_ref().map(|a| vocab.encode(a)),
                    grounding: r.grounding.clone(),
                    candidates: r.candidates.as_ref().map(|c| EncodedCandidates {
                        answers: c.answers.iter().map(|a| vocab.encode(a)).collect(),
                        gt_index: c.gt_index,
                        relevance: c.relevance.clone(),
                    }),
                })
                .collect(),
        }
    }

    /// Number of question rounds (the caption is round 0).
    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    /// Round `t` (1-based).
    pub fn round(&self, t: usize) -> Result<&EncodedRound> {
        if t == 0 || t > self.rounds.len() {
            return Err(Error::contract(format!(
                "round {t} outside 1..={} for image {}",
                self.rounds.len(),
                self.image_id
            )));
        }
        Ok(&self.rounds[t - 1])
    }
}
