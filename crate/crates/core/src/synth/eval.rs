//! Scoring: event precision/recall/F1, top-k node accuracy, the error-log
//! ranking baselines and the naive level/frequency detectors.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::GroundTruth;
use crate::drain::ParsedBundle;
use crate::model::{Level, Timestamp};
use crate::report::DiagnosisReport;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} reports but {1} truths")]
    LengthMismatch(usize, usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Set comparison. Two empty sets agree perfectly; otherwise an empty
/// denominator scores 0.
pub fn score_sets<S: AsRef<str>, T: AsRef<str>>(
    predicted: impl IntoIterator<Item = S>,
    truth: impl IntoIterator<Item = T>,
) -> EventScores {
    let predicted: BTreeSet<String> = predicted.into_iter().map(|s| s.as_ref().to_string()).collect();
    let truth: BTreeSet<String> = truth.into_iter().map(|s| s.as_ref().to_string()).collect();
    if predicted.is_empty() && truth.is_empty() {
        return EventScores { precision: 1.0, recall: 1.0, f1: 1.0 };
    }
    let hit = predicted.intersection(&truth).count();
    let precision = ratio(hit, predicted.len());
    let recall = ratio(hit, truth.len());
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    EventScores { precision, recall, f1 }
}

pub fn evaluate_events(report: &DiagnosisReport, truth: &GroundTruth) -> EventScores {
    score_sets(report.event_signatures(), &truth.failure_indicating_signatures)
}

/// Component-wise mean.
pub fn macro_average(scores: &[EventScores]) -> EventScores {
    if scores.is_empty() {
        return EventScores::default();
    }
    let n = scores.len() as f64;
    EventScores {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

/// 1-based rank of the best-placed faulty node, if any was ranked.
pub fn faulty_rank<S: AsRef<str>>(ranking: &[S], truth: &GroundTruth) -> Option<usize> {
    ranking.iter().position(|n| truth.faulty_nodes.iter().any(|f| f == n.as_ref())).map(|p| p + 1)
}

/// Fraction of cases whose faulty node is among the first `k` of its
/// ranking.
pub fn topk_accuracy<S: AsRef<str>>(rankings: &[Vec<S>], truths: &[GroundTruth], k: usize) -> Result<f64, EvalError> {
    if rankings.is_empty() || rankings.len() != truths.len() {
        return Err(EvalError::LengthMismatch(rankings.len(), truths.len()));
    }
    let hits = rankings.iter().zip(truths).filter(|(r, t)| faulty_rank(r, t).is_some_and(|p| p <= k)).count();
    Ok(hits as f64 / rankings.len() as f64)
}

pub fn evaluate_topk(reports: &[DiagnosisReport], truths: &[GroundTruth], k: usize) -> Result<f64, EvalError> {
    let rankings: Vec<Vec<&str>> = reports.iter().map(|r| r.ranked_nodes()).collect();
    topk_accuracy(&rankings, truths, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BaselineMethod {
    /// Earliest first ERROR record first; nodes without errors last.
    ErrorTime,
    /// Most ERROR records first.
    ErrorCount,
}

pub fn baseline_rank(bundle: &ParsedBundle, method: BaselineMethod) -> Vec<String> {
    let mut rows: Vec<(&String, Option<Timestamp>, usize)> = bundle
        .nodes
        .iter()
        .map(|(node, recs)| {
            let errors = recs.iter().filter(|r| r.level() == Level::Error);
            let first = errors.clone().map(|r| r.timestamp()).min();
            (node, first, errors.count())
        })
        .collect();
    match method {
        BaselineMethod::ErrorTime => rows.sort_by(|a, b| match (a.1, b.1) {
            (Some(x), Some(y)) => x.cmp(&y).then_with(|| a.0.cmp(b.0)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.0.cmp(b.0),
        }),
        BaselineMethod::ErrorCount => rows.sort_by(|a, b| b.2.cmp(&a.2).then_with(|| a.0.cmp(b.0))),
    }
    rows.into_iter().map(|r| r.0.clone()).collect()
}

/// Every signature that occurs at ERROR level.
pub fn level_only(bundle: &ParsedBundle) -> BTreeSet<String> {
    bundle.records().filter(|r| r.level() == Level::Error).map(|r| bundle.signature(r.event_id).to_string()).collect()
}

/// Signatures whose job-wide count is at or below the first quartile
/// (nearest rank) of all template counts.
pub fn frequency_only(bundle: &ParsedBundle) -> BTreeSet<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in bundle.records() {
        *counts.entry(bundle.signature(r.event_id)).or_default() += 1;
    }
    if counts.is_empty() {
        return BTreeSet::new();
    }
    let mut sorted: Vec<usize> = counts.values().copied().collect();
    sorted.sort_unstable();
    let q = sorted[(sorted.len() as f64 * 0.25).ceil().max(1.0) as usize - 1];
    counts.into_iter().filter(|&(_, c)| c <= q).map(|(s, _)| s.to_string()).collect()
}
