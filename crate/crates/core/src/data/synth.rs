//! Closed-world synthetic visual dialogues with oracle grounding.
//!
//! Each image holds 3–6 object groups with a colour, a shape and a count.
//! Object features are the attribute one-hots tiled across the feature width
//! plus small seeded noise. Questions ask about one group's attribute and
//! ground that group; every fourth round is an entity-free "anything else ?"
//! whose grounding is empty.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{Dataset, DialogueRecord, EncodedCandidates, EncodedDialogue, EncodedRound, Limits, RoundRecord};
use super::features::{FeatureSet, ImageFeatures};
use super::text::NUM_SPECIALS;

pub const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "purple", "orange", "white", "black"];
pub const SHAPES: [&str; 8] = ["cube", "sphere", "cone", "cylinder", "ring", "pyramid", "star", "disk"];
pub const COUNTS: [&str; 6] = ["one", "two", "three", "four", "five", "six"];
pub const FALLBACK_QUESTION: &str = "anything else ?";
pub const FALLBACK_ANSWER: &str = "nothing else";
pub const CANDIDATES_PER_ROUND: usize = 100;

const ONE_HOT: usize = COLORS.len() + SHAPES.len() + COUNTS.len();
const NOISE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub color: usize,
    pub shape: usize,
    pub count: usize,
}

impl SceneObject {
    fn describe(&self) -> String {
        format!("{} {} {}", COUNTS[self.count], COLORS[self.color], SHAPES[self.shape])
    }

    fn one_hot(&self) -> [f64; ONE_HOT] {
        let mut v = [0.0; ONE_HOT];
        v[self.color] = 1.0;
        v[COLORS.len() + self.shape] = 1.0;
        v[COLORS.len() + SHAPES.len() + self.count] = 1.0;
        v
    }
}

/// Generator parameters.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub min_objects: usize,
    pub max_objects: usize,
    pub feature_dim: usize,
    /// Added to image ids so splits do not collide.
    pub id_offset: u64,
}

impl Default for SyntheticWorld {
    fn default() -> Self {
        Self {
            min_objects: 3,
            max_objects: 6,
            feature_dim: 64,
            id_offset: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplit {
    pub records: Vec<DialogueRecord>,
    pub features: FeatureSet,
    pub scenes: Vec<Vec<SceneObject>>,
}

#[derive(Clone, Copy)]
enum Ask {
    Color,
    Shape,
    Count,
}

impl SyntheticWorld {
    pub fn generate(&self, dialogues: usize, rounds: usize, seed: u64) -> SyntheticSplit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::with_capacity(dialogues);
        let mut images = Vec::with_capacity(dialogues);
        let mut scenes = Vec::with_capacity(dialogues);
        for d in 0..dialogues {
            let image_id = self.id_offset + d as u64;
            let k = rng.gen_range(self.min_objects..=self.max_objects);
            let scene: Vec<SceneObject> = (0..k)
                .map(|_| SceneObject {
                    color: rng.gen_range(0..COLORS.len()),
                    shape: rng.gen_range(0..SHAPES.len()),
                    count: rng.gen_range(0..COUNTS.len()),
                })
                .collect();
            let mut data = Vec::with_capacity(k * self.feature_dim);
            for obj in &scene {
                let hot = obj.one_hot();
                for j in 0..self.feature_dim {
                    let noise = rng.gen_range(-NOISE..NOISE);
                    data.push((hot[j % ONE_HOT] + noise) as f32);
                }
            }
            images.push(ImageFeatures::new(image_id, k, self.feature_dim, data).expect("generated features are valid"));

            let caption = format!(
                "there are {k} groups : {} .",
                scene.iter().map(SceneObject::describe).collect::<Vec<_>>().join(" , ")
            );
            let mut round_records = Vec::with_capacity(rounds);
            let mut previous: Option<usize> = None;
            for i in 1..=rounds {
                let (question, answer, grounding) = if i % 4 == 0 {
                    previous = None;
                    (FALLBACK_QUESTION.to_string(), FALLBACK_ANSWER.to_string(), vec![])
                } else {
                    let ask = match rng.gen_range(0..3) {
                        0 => Ask::Color,
                        1 => Ask::Shape,
                        _ => Ask::Count,
                    };
                    let follow_up = previous.is_some() && rng.gen_bool(0.3);
                    let o = match previous {
                        Some(p) if follow_up => p,
                        _ => rng.gen_range(0..k),
                    };
                    let obj = scene[o];
                    let q = match (ask, follow_up) {
                        (Ask::Color, true) => "what color is it ?".to_string(),
                        (Ask::Shape, true) => "what shape is it ?".to_string(),
                        (Ask::Count, true) => "how many are there ?".to_string(),
                        (Ask::Color, false) => format!("what color is the {} ?", SHAPES[obj.shape]),
                        (Ask::Shape, false) => format!("what shape is the {} one ?", COLORS[obj.color]),
                        (Ask::Count, false) => {
                            format!("how many {} {} are there ?", COLORS[obj.color], SHAPES[obj.shape])
                        }
                    };
                    let a = match ask {
                        Ask::Color => COLORS[obj.color],
                        Ask::Shape => SHAPES[obj.shape],
                        Ask::Count => COUNTS[obj.count],
                    };
                    previous = Some(o);
                    (q, a.to_string(), vec![o])
                };
                let (candidates, gt_index, relevance) = candidate_set(&answer, &mut rng);
                round_records.push(RoundRecord {
                    question,
                    answer: Some(answer),
                    grounding,
                    candidates: Some(candidates),
                    gt_index: Some(gt_index),
                    relevance: Some(relevance),
                });
            }
            records.push(DialogueRecord {
                image_id,
                caption,
                rounds: round_records,
            });
            scenes.push(scene);
        }
        SyntheticSplit {
            records,
            features: FeatureSet::new(images).expect("generated ids are unique"),
            scenes,
        }
    }
}

impl SyntheticSplit {
    pub fn into_dataset(self, limits: Limits) -> crate::error::Result<Dataset> {
        Dataset::from_records(self.records, self.features, limits)
    }
}

/// A dialogue of random tokens and features, for probing a model of any size
/// (gradient checks, benchmarks). Every round is grounded on one object except
/// the last, which falls back to the whole image.
pub fn random_dialogue(
    vocab_size: usize,
    feature_dim: usize,
    objects: usize,
    rounds: usize,
    seed: u64,
) -> EncodedDialogue {
    assert!(vocab_size > NUM_SPECIALS && objects > 0 && rounds > 0 && feature_dim > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..objects * feature_dim)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    let image = ImageFeatures::new(seed, objects, feature_dim, data).expect("random features are valid");
    let words = |rng: &mut ChaCha8Rng, n: usize| -> Vec<usize> {
        (0..n).map(|_| rng.gen_range(NUM_SPECIALS..vocab_size)).collect()
    };
    let caption = words(&mut rng, 5);
    let rounds = (0..rounds)
        .map(|i| {
            let answers: Vec<Vec<usize>> = (0..4).map(|k| words(&mut rng, 1 + k % 3)).collect();
            EncodedRound {
                question: words(&mut rng, 4),
                answer: Some(answers[0].clone()),
                grounding: if i + 1 == rounds { vec![] } else { vec![i % objects] },
                candidates: Some(EncodedCandidates {
                    answers,
                    gt_index: 0,
                    relevance: Some(vec![1.0, 0.5, 0.0, 0.0]),
                }),
            }
        })
        .collect();
    EncodedDialogue {
        image_id: seed,
        image,
        caption,
        rounds,
    }
}

/// The answer of a grounded round, recomputed from the object's attributes.
pub fn answer_from_attributes(question: &str, obj: SceneObject) -> Option<&'static str> {
    if question.starts_with("what color") {
        Some(COLORS[obj.color])
    } else if question.starts_with("what shape") {
        Some(SHAPES[obj.shape])
    } else if question.starts_with("how many") {
        Some(COUNTS[obj.count])
    } else {
        None
    }
}

/// Every single attribute word and the fallback answer, then 77 sampled
/// two-word phrases. Relevance: 1 for the answer, 0.5 for phrases containing it.
fn candidate_set(answer: &str, rng: &mut ChaCha8Rng) -> (Vec<String>, usize, Vec<f64>) {
    let mut singles: Vec<String> = COLORS
        .iter()
        .chain(&SHAPES)
        .chain(&COUNTS)
        .map(|s| s.to_string())
        .collect();
    singles.push(FALLBACK_ANSWER.to_string());
    let mut phrases: Vec<String> = Vec::new();
    for c in COLORS {
        for s in SHAPES {
            phrases.push(format!("{c} {s}"));
        }
    }
    for n in COUNTS {
        for s in SHAPES {
            phrases.push(format!("{n} {s}"));
        }
    }
    phrases.shuffle(rng);
    let mut all = singles;
    all.extend(phrases.into_iter().take(CANDIDATES_PER_ROUND - all.len()));
    all.shuffle(rng);
    let gt = all
        .iter()
        .position(|c| c == answer)
        .expect("answer is in the single-word pool");
    let relevance = all
        .iter()
        .map(|c| {
            if c == answer {
                1.0
            } else if c.split(' ').any(|w| w == answer) {
                0.5
            } else {
                0.0
            }
        })
        .collect();
    (all, gt, relevance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::records_to_jsonl;

    #[test]
    fn deterministic_per_seed() {
        let w = SyntheticWorld::default();
        let a = w.generate(5, 6, 42);
        let b = w.generate(5, 6, 42);
        assert_eq!(records_to_jsonl(&a.records), records_to_jsonl(&b.records));
        assert_eq!(a.features.to_bytes(), b.features.to_bytes());
        assert_ne!(
            records_to_jsonl(&a.records),
            records_to_jsonl(&w.generate(5, 6, 43).records)
        );
    }

    #[test]
    fn grounded_answers_follow_attributes() {
        let split = SyntheticWorld::default().generate(30, 8, 1);
        for (rec, scene) in split.records.iter().zip(&split.scenes) {
            for (i, r) in rec.rounds.iter().enumerate() {
                if (i + 1) % 4 == 0 {
                    assert!(r.grounding.is_empty());
                    assert_eq!(r.answer.as_deref(), Some(FALLBACK_ANSWER));
                    continue;
                }
                assert_eq!(r.grounding.len(), 1);
                let obj = scene[r.grounding[0]];
                assert_eq!(answer_from_attributes(&r.question, obj), r.answer.as_deref());
            }
        }
    }

    #[test]
    fn candidate_sets_hold_the_answer() {
        let split = SyntheticWorld::default().generate(10, 5, 3);
        for rec in &split.records {
            for r in &rec.rounds {
                let c = r.candidates.as_ref().unwrap();
                assert_eq!(c.len(), CANDIDATES_PER_ROUND);
                assert_eq!(Some(&c[r.gt_index.unwrap()]), r.answer.as_ref());
                let mut uniq = c.clone();
                uniq.sort();
                uniq.dedup();
                assert_eq!(uniq.len(), CANDIDATES_PER_ROUND);
                assert_eq!(r.relevance.as_ref().unwrap()[r.gt_index.unwrap()], 1.0);
            }
        }
    }
}
