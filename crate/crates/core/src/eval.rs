//! Candidate-ranking evaluation: rank of the reference answer among the
//! candidates, aggregated into MRR, R@1/5/10, mean rank and NDCG.
//!
//! Ties are broken by candidate index, so an equal-scored candidate listed
//! earlier ranks above a later one.

use serde::{Deserialize, Serialize};

use crate::data::EncodedDialogue;
use crate::error::{Error, Result};
use crate::model::MitvgModel;
use crate::tensor::Real;

/// Model scores for one question's candidate list.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateScores {
    pub image_id: u64,
    pub round: usize,
    pub scores: Vec<f64>,
    pub gt_index: usize,
    pub relevance: Option<Vec<f64>>,
}

/// `1 + #{strictly greater} + #{equal with smaller index}`.
pub fn rank_of_gt(scores: &[f64], gt_index: usize) -> Result<usize> {
    if gt_index >= scores.len() {
        return Err(Error::data(
            "gt_index",
            format!("{gt_index} outside {} candidates", scores.len()),
        ));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::data("scores", format!("candidate {i} has a NaN score")));
    }
    let g = scores[gt_index];
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > g || (s == g && i < gt_index))
        .count();
    Ok(1 + above)
}

/// Candidate indices by descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn dcg(rels: impl Iterator<Item = f64>) -> f64 {
    rels.enumerate().map(|(p, r)| r / ((p + 2) as f64).log2()).sum()
}

/// NDCG truncated at the number of positively relevant candidates; 0 when
/// nothing is relevant.
pub fn ndcg(scores: &[f64], relevance: &[f64]) -> Result<f64> {
    if scores.len() != relevance.len() {
        return Err(Error::data(
            "relevance",
            format!("{} relevance values for {} candidates", relevance.len(), scores.len()),
        ));
    }
    if let Some(i) = relevance.iter().position(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::data(
            "relevance",
            format!("entry {i} = {} outside [0, 1]", relevance[i]),
        ));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::data("scores", format!("candidate {i} has a NaN score")));
    }
    let k = relevance.iter().filter(|&&r| r > 0.0).count();
    if k == 0 {
        return Ok(0.0);
    }
    let order = ranking(scores);
    let got = dcg(order.iter().take(k).map(|&i| relevance[i]));
    let mut ideal = relevance.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let best = dcg(ideal.into_iter().take(k));
    Ok(got / best)
}

/// Aggregate retrieval metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub n: usize,
    pub mrr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mean: f64,
    /// Mean NDCG over questions with relevance annotations; `None` if there are none.
    pub ndcg: Option<f64>,
}

pub fn aggregate(ranks: &[usize], ndcgs: &[f64]) -> Result<RankingReport> {
    if ranks.is_empty() {
        return Err(Error::data("ranks", "no questions to aggregate"));
    }
    let n = ranks.len() as f64;
    let recall = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(RankingReport {
        n: ranks.len(),
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        r1: recall(1),
        r5: recall(5),
        r10: recall(10),
        mean: ranks.iter().map(|&r| r as f64).sum::<f64>() / n,
        ndcg: (!ndcgs.is_empty()).then(|| ndcgs.iter().sum::<f64>() / ndcgs.len() as f64),
    })
}

/// Per-question line of the detail file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub image_id: u64,
    pub round: usize,
    pub rank: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<f64>,
}

impl QuestionResult {
    pub fn from_scores(c: &CandidateScores) -> Result<Self> {
        Ok(Self {
            image_id: c.image_id,
            round: c.round,
            rank: rank_of_gt(&c.scores, c.gt_index)?,
            ndcg: c.relevance.as_deref().map(|r| ndcg(&c.scores, r)).transpose()?,
        })
    }
}

pub fn report_from(results: &[QuestionResult]) -> Result<RankingReport> {
    let ranks: Vec<usize> = results.iter().map(|r| r.rank).collect();
    let ndcgs: Vec<f64> = results.iter().filter_map(|r| r.ndcg).collect();
    aggregate(&ranks, &ndcgs)
}

/// Scores every candidate list of `round` (or of all rounds when `None`).
pub fn score_dataset<T: Real>(
    model: &MitvgModel<T>,
    data: &[EncodedDialogue],
    round: Option<usize>,
) -> Result<Vec<CandidateScores>> {
    let mut out = Vec::new();
    for dlg in data {
        for t in 1..=dlg.num_rounds() {
            if round.is_some_and(|r| r != t) {
                continue;
            }
            let r = dlg.round(t)?;
            let Some(c) = &r.candidates else {
                return Err(Error::data(
                    format!("rounds[{}].candidates", t - 1),
                    format!("image {} round {t} has no candidates to rank", dlg.image_id),
                ));
            };
            let scores = model.score_candidates(dlg, t)?;
            if let Some(i) = scores.iter().position(|s| s.is_nan()) {
                return Err(Error::data(
                    "scores",
                    format!("image {} round {t}: candidate {i} scored NaN", dlg.image_id),
                ));
            }
            out.push(CandidateScores {
                image_id: dlg.image_id,
                round: t,
                scores,
                gt_index: c.gt_index,
                relevance: c.relevance.clone(),
            });
        }
    }
    Ok(out)
}

/// Ranks every question of `data` and aggregates.
pub fn evaluate<T: Real>(
    model: &MitvgModel<T>,
    data: &[EncodedDialogue],
) -> Result<(RankingReport, Vec<QuestionResult>)> {
    let results = score_dataset(model, data, None)?
        .iter()
        .map(QuestionResult::from_scores)
        .collect::<Result<Vec<_>>>()?;
    Ok((report_from(&results)?, results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of_gt(&[0.1, 0.9, 0.3], 1).unwrap(), 1);
        let flat = vec![0.0; 100];
        assert_eq!(rank_of_gt(&flat, 0).unwrap(), 1);
        assert_eq!(rank_of_gt(&flat, 99).unwrap(), 100);
        assert!(matches!(rank_of_gt(&[f64::NAN, 1.0], 1), Err(Error::Data { .. })));
    }

    #[test]
    fn aggregate_examples() {
        let r = aggregate(&[1, 3, 5], &[]).unwrap();
        assert_eq!(r.mean, 3.0);
        assert!((r.mrr - (1.0 + 1.0 / 3.0 + 0.2) / 3.0).abs() < 1e-12);
        assert_eq!(r.r5, 1.0);
        assert!((r.r1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.ndcg, None);
        assert_eq!(aggregate(&[4], &[]).unwrap().mrr, 0.25);
        let ones = aggregate(&[1, 1], &[1.0]).unwrap();
        assert_eq!((ones.mrr, ones.r1, ones.mean), (1.0, 1.0, 1.0));
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg(&[3.0, 2.0, 1.0], &[1.0, 0.5, 0.0]).unwrap(), 1.0);
        assert_eq!(ndcg(&[3.0, 2.0, 1.0], &[0.0, 0.0, 0.0]).unwrap(), 0.0);
        // ordering by score puts the 0.5 candidate first, then the 1.0 one
        let v = ndcg(&[2.0, 0.0, 3.0], &[1.0, 0.0, 0.5]).unwrap();
        assert!((v - 0.8597).abs() < 1e-4, "{v}");
        assert!(matches!(ndcg(&[1.0], &[1.5]), Err(Error::Data { .. })));
    }
}
