//! Temporal comparison: training iterations repeat, so an iteration whose
//! event sequence stops resembling its predecessors marks the onset of a
//! failure.

pub mod dtw;
pub mod stages;
pub mod window;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drain::ParsedBundle;
use crate::pattern::TemplatePattern;
pub use dtw::{dtw_distance, sequence_similarity};
pub use stages::{segment_stages, Segmentation, Stage, StageRule, StageRules, StageSpan};
pub use window::{segment_iterations, windowed_verdicts, IterationSequence, IterationVerdict};

#[derive(Debug, Error)]
pub enum TemporalError {
    #[error("sequence is empty")]
    EmptySequence,
    #[error("no node reached the iterative training stage")]
    NoIterativeStage,
    #[error("no iteration markers on node {0}")]
    NoIterationMarkers(String),
    #[error("invalid stage rules: {0}")]
    BadRules(String),
}

pub const DEFAULT_WINDOW: usize = 10;

/// Matches templates with a masked counter right after `step`,
/// `iteration` or `iter` (optionally joined by `:`, `=`, `_` or `#`).
pub fn default_iteration_marker() -> TemplatePattern {
    r"/(?i)\b(step|iteration|iter)\s*[:=_#]?\s*<\*>/".parse().expect("valid marker regex")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalConfig {
    pub window: usize,
    pub rules: StageRules,
    pub iteration_marker: TemplatePattern,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig {
            window: DEFAULT_WINDOW,
            rules: StageRules::default(),
            iteration_marker: default_iteration_marker(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    /// New in a flagged iteration.
    FlaggedIteration,
    /// In the last stage of a node that stopped outside iterative training.
    TerminalStage,
}

/// A non-normal record singled out by temporal analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalEvidence {
    pub signature: String,
    pub node_id: String,
    /// Index into the node's record list of the parsed bundle.
    pub record_index: usize,
    pub stage: Stage,
    pub iteration: Option<usize>,
    pub kind: EvidenceKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TemporalOutcome {
    pub segmentation: Segmentation,
    pub verdicts: BTreeMap<String, Vec<IterationVerdict>>,
    /// Union over nodes, ascending.
    pub flagged_iterations: Vec<usize>,
    pub evidence: Vec<TemporalEvidence>,
    pub warnings: Vec<String>,
}

impl TemporalOutcome {
    pub fn first_flagged(&self) -> Option<usize> {
        self.flagged_iterations.first().copied()
    }

    pub fn flagged_verdicts(&self) -> impl Iterator<Item = &IterationVerdict> {
        self.verdicts.values().flatten().filter(|v| v.flagged)
    }
}

struct NodeResult {
    verdicts: Vec<IterationVerdict>,
    evidence: Vec<TemporalEvidence>,
    warning: Option<String>,
}

/// Runs stage segmentation and per-node iteration analysis on the unfiltered
/// job. `normal[event_id]` marks events the cross-job filter would drop;
/// those never become evidence.
pub fn analyze(bundle: &ParsedBundle, normal: &[bool], config: &TemporalConfig) -> TemporalOutcome {
    let segmentation = segment_stages(bundle, &config.rules);
    let mut warnings = Vec::new();
    if let Err(e) = segmentation.check_iterative() {
        warnings.push(format!("{e}; iteration analysis skipped"));
    }
    let is_marker: Vec<bool> =
        bundle.templates.iter().map(|t| config.iteration_marker.is_match(bundle.signature(t.event_id))).collect();
    let is_normal = |id: u32| normal.get(id as usize).copied().unwrap_or(false);

    let results: Vec<(String, NodeResult)> = bundle
        .nodes
        .par_iter()
        .map(|(node, recs)| {
            let spans = segmentation.spans(node);
            let mut evidence = Vec::new();
            let mut warning = None;

            let iter_idx: Vec<usize> =
                spans.iter().filter(|s| s.stage == Stage::IterTrain).flat_map(|s| s.start..s.end).collect();
            let mut verdicts = Vec::new();
            if !iter_idx.is_empty() {
                let events: Vec<&str> = iter_idx.iter().map(|&i| bundle.signature(recs[i].event_id)).collect();
                match segment_iterations(node, &events, |k| is_marker[recs[iter_idx[k]].event_id as usize]) {
                    Ok(seqs) => {
                        verdicts = windowed_verdicts(&seqs, config.window);
                        for (seq, v) in seqs.iter().zip(&verdicts) {
                            if !v.flagged {
                                continue;
                            }
                            let novel: BTreeSet<&str> = v.novel_events().iter().map(String::as_str).collect();
                            let mut seen = BTreeSet::new();
                            for &p in &seq.positions {
                                let idx = iter_idx[p];
                                let r = &recs[idx];
                                let sig = bundle.signature(r.event_id);
                                if novel.contains(sig) && !is_normal(r.event_id) && seen.insert(sig) {
                                    evidence.push(TemporalEvidence {
                                        signature: sig.to_string(),
                                        node_id: node.clone(),
                                        record_index: idx,
                                        stage: Stage::IterTrain,
                                        iteration: Some(seq.iteration_index),
                                        kind: EvidenceKind::FlaggedIteration,
                                    });
                                }
                            }
                        }
                    }
                    Err(e) => warning = Some(e.to_string()),
                }
            }

            if let Some(last) = spans.last().filter(|s| s.stage != Stage::IterTrain) {
                let mut seen = BTreeSet::new();
                for (idx, r) in recs.iter().enumerate().take(last.end).skip(last.start) {
                    let sig = bundle.signature(r.event_id);
                    if !is_normal(r.event_id) && seen.insert(sig) {
                        evidence.push(TemporalEvidence {
                            signature: sig.to_string(),
                            node_id: node.clone(),
                            record_index: idx,
                            stage: last.stage,
                            iteration: None,
                            kind: EvidenceKind::TerminalStage,
                        });
                    }
                }
            }
            (node.clone(), NodeResult { verdicts, evidence, warning })
        })
        .collect();

    let mut verdicts = BTreeMap::new();
    let mut flagged = BTreeSet::new();
    let mut evidence = Vec::new();
    for (node, res) in results {
        flagged.extend(res.verdicts.iter().filter(|v| v.flagged).map(|v| v.iteration_index));
        evidence.extend(res.evidence);
        warnings.extend(res.warning);
        verdicts.insert(node, res.verdicts);
    }
    TemporalOutcome { segmentation, verdicts, flagged_iterations: flagged.into_iter().collect(), evidence, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::job;

    fn healthy(iters: usize) -> Vec<String> {
        let mut v = vec!["initializing distributed environment".to_string(), "building model graph".into()];
        for i in 0..iters {
            v.push(format!("training iteration {i} begins"));
            v.push("forward pass done".into());
            v.push("backward pass done".into());
            v.push("optimizer step applied".into());
        }
        v
    }

    #[test]
    fn default_marker() {
        let m = default_iteration_marker();
        assert!(m.is_match("training iteration <*> begins"));
        assert!(m.is_match("global step=<*> loss <*>"));
        assert!(m.is_match("Iter:<*>"));
        assert!(!m.is_match("optimizer step applied"));
        assert!(!m.is_match("iteration finished"));
    }

    #[test]
    fn divergent_iteration_is_flagged_with_evidence() {
        let mut bad = healthy(30);
        bad.push("training iteration 30 begins".into());
        bad.push("nic link flapped on port".into());
        bad.push("nic link flapped on port".into());
        bad.push("backward pass done".into());
        let good = healthy(30);
        let lines_bad: Vec<&str> = bad.iter().map(String::as_str).collect();
        let lines_good: Vec<&str> = good.iter().map(String::as_str).collect();
        let b = job("j", &[("bad", &lines_bad), ("good", &lines_good)]);
        let normal = vec![false; b.templates.len()];
        let out = analyze(&b, &normal, &TemporalConfig::default());
        assert!(out.warnings.is_empty(), "{:?}", out.warnings);
        assert_eq!(out.flagged_iterations, [30]);
        assert_eq!(out.first_flagged(), Some(30));
        assert_eq!(out.evidence.len(), 1);
        let e = &out.evidence[0];
        assert_eq!((e.node_id.as_str(), e.signature.as_str()), ("bad", "nic link flapped on port"));
        assert_eq!(e.iteration, Some(30));
        assert_eq!(out.verdicts["good"].len(), 30);
    }

    #[test]
    fn terminal_stage_evidence_skips_normal_events() {
        let b = job(
            "j",
            &[("n", &["initializing distributed environment", "building model graph", "config value rejected"])],
        );
        let mut normal = vec![false; b.templates.len()];
        let graph = b.templates.iter().find(|t| t.signature() == "building model graph").unwrap().event_id;
        normal[graph as usize] = true;
        let out = analyze(&b, &normal, &TemporalConfig::default());
        assert!(out.flagged_iterations.is_empty());
        assert_eq!(out.warnings.len(), 1);
        let sigs: Vec<_> = out.evidence.iter().map(|e| e.signature.as_str()).collect();
        assert_eq!(sigs, ["config value rejected"]);
        assert_eq!(out.evidence[0].stage, Stage::ModelInit);
        assert_eq!(out.segmentation.latest_common_stage(), Some(Stage::ModelInit));
    }
}
