//! Per-iteration sequences and the sliding-window three-sigma check.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::dtw::sequence_similarity;
use super::TemporalError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationSequence {
    pub node_id: String,
    pub iteration_index: usize,
    pub events: Vec<String>,
    /// Positions of the events in the caller's record slice.
    #[serde(skip)]
    pub positions: Vec<usize>,
}

/// Splits a stream at marker events. Records before the first marker are
/// dropped; the tail after the last marker is the final sequence.
pub fn segment_iterations(
    node_id: &str,
    events: &[&str],
    is_marker: impl Fn(usize) -> bool,
) -> Result<Vec<IterationSequence>, TemporalError> {
    let mut out: Vec<IterationSequence> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        if is_marker(i) {
            out.push(IterationSequence {
                node_id: node_id.to_string(),
                iteration_index: out.len(),
                events: Vec::new(),
                positions: Vec::new(),
            });
        }
        if let Some(cur) = out.last_mut() {
            cur.events.push(e.to_string());
            cur.positions.push(i);
        }
    }
    if out.is_empty() {
        return Err(TemporalError::NoIterationMarkers(node_id.to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationVerdict {
    pub node_id: String,
    pub iteration_index: usize,
    pub similarity: f64,
    pub flagged: bool,
    /// Events of this iteration missing from the window, then events of
    /// the window missing from this iteration, each in first-occurrence
    /// order.
    pub deviating_events: Vec<String>,
    /// How many leading entries of `deviating_events` are new in this
    /// iteration (as opposed to missing from it).
    pub novel_count: usize,
}

impl IterationVerdict {
    pub fn novel_events(&self) -> &[String] {
        &self.deviating_events[..self.novel_count]
    }
}

fn first_occurrences<'a>(seqs: impl IntoIterator<Item = &'a IterationSequence>) -> Vec<&'a str> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for s in seqs {
        for e in &s.events {
            if seen.insert(e.as_str()) {
                out.push(e.as_str());
            }
        }
    }
    out
}

fn deviation(current: &IterationSequence, window: &[IterationSequence]) -> (Vec<String>, usize) {
    let mine = first_occurrences([current]);
    let theirs = first_occurrences(window);
    let mine_set: BTreeSet<&str> = mine.iter().copied().collect();
    let theirs_set: BTreeSet<&str> = theirs.iter().copied().collect();
    let mut out: Vec<String> = mine.iter().filter(|e| !theirs_set.contains(*e)).map(|e| e.to_string()).collect();
    let novel = out.len();
    out.extend(theirs.iter().filter(|e| !mine_set.contains(*e)).map(|e| e.to_string()));
    (out, novel)
}

/// Mean DTW similarity of each iteration to its `window` predecessors.
/// From iteration `window` on, an iteration is flagged when its similarity
/// falls below `mean - 3 sigma` of all similarities computed since then
/// (itself included). Iteration 0 has no history and scores 1.
pub fn windowed_verdicts(sequences: &[IterationSequence], window: usize) -> Vec<IterationVerdict> {
    let window = window.max(1);
    let mut population: Vec<f64> = Vec::new();
    let mut verdicts = Vec::with_capacity(sequences.len());
    for (i, seq) in sequences.iter().enumerate() {
        let lo = i.saturating_sub(window);
        let history = &sequences[lo..i];
        let similarity = if history.is_empty() || seq.events.is_empty() {
            1.0
        } else {
            let total: f64 = history
                .iter()
                .filter(|h| !h.events.is_empty())
                .map(|h| sequence_similarity(&seq.events, &h.events).expect("non-empty"))
                .sum();
            total / history.len() as f64
        };
        let mut flagged = false;
        if i >= window {
            population.push(similarity);
            let n = population.len() as f64;
            let mean = population.iter().sum::<f64>() / n;
            let var = population.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
            flagged = similarity < mean - 3.0 * var.sqrt();
        }
        let (deviating_events, novel_count) =
            if history.is_empty() { (Vec::new(), 0) } else { deviation(seq, history) };
        verdicts.push(IterationVerdict {
            node_id: seq.node_id.clone(),
            iteration_index: seq.iteration_index,
            similarity,
            flagged,
            deviating_events,
            novel_count,
        });
    }
    verdicts
}
