//! Diagnosis report: one document combining library matches, suspicious
//! nodes, the failing stage, flagged iterations and the failure-indicating
//! events behind them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::drain::ParsedBundle;
use crate::filter::FilterStats;
use crate::library::MatchResult;
use crate::model::{Level, Timestamp};
use crate::spatial::{EventAttribution, NodeAnomalyScore, SpatialOutcome};
use crate::temporal::{IterationVerdict, Stage, TemporalOutcome};

pub const SCHEMA_VERSION: u32 = 1;

pub const TEXT_MAX_EVENTS: usize = 20;
pub const TEXT_MAX_NODES: usize = 8;
pub const TEXT_MAX_ITERATIONS: usize = 5;

pub const NEIGHBOR_CAVEAT: &str =
    "nodes that communicate with a faulty node can look anomalous too; inspect the top-ranked node first";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EvidenceSource {
    Library,
    Temporal,
    Spatial,
}

/// A concrete log line cited as evidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRef {
    pub node_id: String,
    pub line: u32,
    pub timestamp: Timestamp,
    pub level: Level,
    pub stage: Option<Stage>,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub signature: String,
    pub sources: Vec<EvidenceSource>,
    pub example: RecordRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuspiciousNode {
    pub node_id: String,
    pub score: f64,
    pub rank: usize,
    pub attributed_events: Vec<EventAttribution>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailingStage {
    pub stage: Stage,
    pub evidence: Vec<RecordRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub schema: u32,
    pub job_id: String,
    /// True when no section below carries a finding.
    pub no_findings: bool,
    pub library_matches: Vec<MatchResult>,
    /// Nodes at or above the anomaly threshold, best first.
    pub suspicious_nodes: Vec<SuspiciousNode>,
    /// Every scored node, best first.
    pub node_ranking: Vec<NodeAnomalyScore>,
    pub failing_stage: Option<FailingStage>,
    pub flagged_iterations: Vec<IterationVerdict>,
    pub failure_indicating_events: Vec<FailureEvent>,
    pub filter_stats: FilterStats,
    pub notes: Vec<String>,
}

fn record_ref(bundle: &ParsedBundle, temporal: &TemporalOutcome, node: &str, index: usize) -> Option<RecordRef> {
    let r = bundle.nodes.get(node)?.get(index)?;
    Some(RecordRef {
        node_id: node.to_string(),
        line: r.line(),
        timestamp: r.timestamp(),
        level: r.level(),
        stage: temporal.segmentation.stage_at(node, index),
        message: r.raw.message.clone(),
    })
}

/// Position of the first record with `signature`, preferring `node`.
fn first_occurrence(bundle: &ParsedBundle, signature: &str, node: &str) -> Option<(String, usize)> {
    let find = |n: &str| {
        bundle.nodes.get(n)?.iter().position(|r| bundle.signature(r.event_id) == signature).map(|i| (n.to_string(), i))
    };
    find(node).or_else(|| {
        bundle
            .records()
            .filter(|r| bundle.signature(r.event_id) == signature)
            .min_by_key(|r| (r.timestamp(), r.node_id().to_string(), r.line()))
            .and_then(|r| find(r.node_id()))
    })
}

struct Collector<'a> {
    bundle: &'a ParsedBundle,
    temporal: &'a TemporalOutcome,
    events: BTreeMap<String, FailureEvent>,
    order: Vec<String>,
}

impl Collector<'_> {
    fn add(&mut self, signature: &str, source: EvidenceSource, node: &str, index: usize) {
        if let Some(e) = self.events.get_mut(signature) {
            if !e.sources.contains(&source) {
                e.sources.push(source);
                e.sources.sort();
            }
            return;
        }
        let Some(example) = record_ref(self.bundle, self.temporal, node, index) else {
            return;
        };
        self.order.push(signature.to_string());
        self.events.insert(signature.to_string(), FailureEvent { signature: signature.to_string(), sources: vec![source], example });
    }
}

/// Combines analyzer outputs for one job. `bundle` is the unfiltered parse
/// that all record indices refer to.
pub fn assemble(
    bundle: &ParsedBundle,
    matches: Vec<MatchResult>,
    spatial: &SpatialOutcome,
    temporal: &TemporalOutcome,
    filter_stats: FilterStats,
) -> DiagnosisReport {
    let mut col = Collector { bundle, temporal, events: BTreeMap::new(), order: Vec::new() };
    let mut stage_classes: Vec<Vec<RecordRef>> = Vec::new();

    let mut lib_refs = Vec::new();
    for m in &matches {
        for e in &m.matched_events {
            col.add(&e.signature, EvidenceSource::Library, &e.node_id, e.record_index);
            lib_refs.extend(record_ref(bundle, temporal, &e.node_id, e.record_index));
        }
    }
    stage_classes.push(lib_refs);

    let mut iter_refs = Vec::new();
    let mut tail_refs = Vec::new();
    let first_flag = temporal.first_flagged();
    for ev in &temporal.evidence {
        col.add(&ev.signature, EvidenceSource::Temporal, &ev.node_id, ev.record_index);
        let r = record_ref(bundle, temporal, &ev.node_id, ev.record_index);
        if ev.iteration.is_some() && ev.iteration == first_flag {
            iter_refs.extend(r);
        } else if ev.iteration.is_none() {
            tail_refs.extend(r);
        }
    }
    stage_classes.push(iter_refs);

    let mut spatial_refs = Vec::new();
    let mut suspicious_nodes = Vec::new();
    for s in &spatial.recommended {
        let attributed = spatial.attributions.get(&s.node_id).cloned().unwrap_or_default();
        for (k, a) in attributed.iter().enumerate() {
            if let Some((node, idx)) = first_occurrence(bundle, &a.signature, &s.node_id) {
                col.add(&a.signature, EvidenceSource::Spatial, &node, idx);
                if k == 0 && s.rank == 1 {
                    spatial_refs.extend(record_ref(bundle, temporal, &node, idx));
                }
            }
        }
        suspicious_nodes.push(SuspiciousNode {
            node_id: s.node_id.clone(),
            score: s.score,
            rank: s.rank,
            attributed_events: attributed,
        });
    }
    stage_classes.push(spatial_refs);
    stage_classes.push(tail_refs);

    let failing_stage = stage_classes
        .into_iter()
        .find_map(|mut refs| {
            refs.retain(|r| r.stage.is_some());
            refs.sort_by(|a, b| (a.timestamp, &a.node_id, a.line).cmp(&(b.timestamp, &b.node_id, b.line)));
            let stage = refs.first()?.stage?;
            Some(FailingStage { stage, evidence: refs })
        })
        .or_else(|| {
            temporal.segmentation.latest_common_stage().map(|stage| FailingStage { stage, evidence: Vec::new() })
        });

    let mut flagged_iterations: Vec<IterationVerdict> = temporal.flagged_verdicts().cloned().collect();
    flagged_iterations.sort_by(|a, b| (a.iteration_index, &a.node_id).cmp(&(b.iteration_index, &b.node_id)));

    // More corroborating sources first, then discovery order.
    let mut failure_indicating_events: Vec<FailureEvent> =
        col.order.iter().map(|s| col.events.remove(s).expect("collected")).collect();
    failure_indicating_events.sort_by_key(|e| std::cmp::Reverse(e.sources.len()));

    let mut notes = Vec::new();
    if !filter_stats.applied {
        notes.push("no success history given; cross-job filtering skipped".to_string());
    }
    if let Some(why) = &spatial.skipped {
        notes.push(why.clone());
    }
    notes.extend(temporal.warnings.iter().cloned());
    if suspicious_nodes.len() > 1 {
        notes.push(NEIGHBOR_CAVEAT.to_string());
    }

    let no_findings = matches.is_empty()
        && suspicious_nodes.is_empty()
        && flagged_iterations.is_empty()
        && failure_indicating_events.is_empty();
    if no_findings {
        notes.push("no failure-indicating pattern found".to_string());
    }

    DiagnosisReport {
        schema: SCHEMA_VERSION,
        job_id: bundle.job_id.clone(),
        no_findings,
        library_matches: matches,
        suspicious_nodes,
        node_ranking: spatial.ranking.clone(),
        failing_stage,
        flagged_iterations,
        failure_indicating_events,
        filter_stats,
        notes,
    }
}

impl DiagnosisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn event_signatures(&self) -> Vec<&str> {
        self.failure_indicating_events.iter().map(|e| e.signature.as_str()).collect()
    }

    /// Node ids in ranking order, best first.
    pub fn ranked_nodes(&self) -> Vec<&str> {
        self.node_ranking.iter().map(|n| n.node_id.as_str()).collect()
    }

    /// Human-readable summary, truncated to the top events, nodes and
    /// iterations.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "job {}", self.job_id);
        let fs = &self.filter_stats;
        let _ = writeln!(
            s,
            "records: {} parsed, {} after cross-job filter ({:.1}% removed)",
            fs.records_in,
            fs.records_out,
            100.0 * fs.removed_fraction()
        );
        if self.no_findings {
            let _ = writeln!(s, "\nno failure-indicating pattern found");
        }
        if !self.library_matches.is_empty() {
            let _ = writeln!(s, "\nknown fault patterns:");
            for m in &self.library_matches {
                let _ = writeln!(s, "  {} [{}] {} (confidence {:.2})", m.pattern_id, m.category, m.name, m.confidence);
                let _ = writeln!(s, "    root cause: {}", m.root_cause);
                let _ = writeln!(s, "    remediation: {}", m.remediation);
            }
        }
        if let Some(fs) = &self.failing_stage {
            let _ = writeln!(s, "\nfailing stage: {}", fs.stage);
            if let Some(r) = fs.evidence.first() {
                let _ = writeln!(s, "  first evidence: {}:{} {}", r.node_id, r.line, r.message);
            }
        }
        if !self.suspicious_nodes.is_empty() {
            let _ = writeln!(s, "\nsuspicious nodes:");
            for n in self.suspicious_nodes.iter().take(TEXT_MAX_NODES) {
                let top = n.attributed_events.first().map_or("", |a| a.signature.as_str());
                let _ = writeln!(s, "  #{} {} score {:.3}  {}", n.rank, n.node_id, n.score, top);
            }
            more(&mut s, self.suspicious_nodes.len(), TEXT_MAX_NODES, "nodes");
        }
        if !self.flagged_iterations.is_empty() {
            let _ = writeln!(s, "\nanomalous iterations:");
            for v in self.flagged_iterations.iter().take(TEXT_MAX_ITERATIONS) {
                let _ = writeln!(
                    s,
                    "  iteration {} on {}: similarity {:.3}, {} deviating events",
                    v.iteration_index,
                    v.node_id,
                    v.similarity,
                    v.deviating_events.len()
                );
            }
            more(&mut s, self.flagged_iterations.len(), TEXT_MAX_ITERATIONS, "iterations");
        }
        if !self.failure_indicating_events.is_empty() {
            let _ = writeln!(s, "\nfailure-indicating events:");
            for e in self.failure_indicating_events.iter().take(TEXT_MAX_EVENTS) {
                let tags: Vec<String> =
                    e.sources.iter().map(|t| format!("{t:?}").to_uppercase()).collect();
                let _ = writeln!(s, "  [{}] {}", tags.join(","), e.signature);
                let _ = writeln!(s, "      e.g. {}:{} {} {}", e.example.node_id, e.example.line, e.example.level, e.example.message);
            }
            more(&mut s, self.failure_indicating_events.len(), TEXT_MAX_EVENTS, "events");
        }
        if !self.notes.is_empty() {
            let _ = writeln!(s, "\nnotes:");
            for n in &self.notes {
                let _ = writeln!(s, "  - {n}");
            }
        }
        s
    }
}

fn more(s: &mut String, total: usize, shown: usize, what: &str) {
    if total > shown {
        let _ = writeln!(s, "  ... {} more {what}", total - shown);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::{FaultCategory, FaultLibrary, FaultPattern, MatchMode};
    use crate::temporal::{self, TemporalConfig};
    use crate::testutil::job;

    fn bundle() -> ParsedBundle {
        job(
            "j",
            &[
                ("n0", &["initializing distributed environment", "training iteration 0 begins", "ROCE(,hccp_service.bin):error cqe status."]),
                ("n1", &["initializing distributed environment", "training iteration 0 begins"]),
            ],
        )
    }

    fn temporal_of(b: &ParsedBundle) -> TemporalOutcome {
        temporal::analyze(b, &vec![true; b.templates.len()], &TemporalConfig::default())
    }

    #[test]
    fn empty_inputs_give_explicit_no_findings() {
        let b = bundle();
        let t = temporal_of(&b);
        let r = assemble(&b, Vec::new(), &SpatialOutcome::default(), &t, FilterStats::default());
        assert!(r.no_findings);
        assert!(r.failure_indicating_events.is_empty());
        assert!(r.notes.iter().any(|n| n.contains("no failure-indicating pattern found")));
        assert_eq!(r.failing_stage.as_ref().map(|f| f.stage), Some(Stage::IterTrain));
        assert!(r.to_text().contains("no failure-indicating pattern found"));
    }

    #[test]
    fn library_match_is_carried_verbatim() {
        let b = bundle();
        let mut lib = FaultLibrary::new();
        lib.add(FaultPattern {
            id: "net".into(),
            name: "RoCE completion error".into(),
            category: FaultCategory::Network,
            signature_events: vec!["error cqe status".parse().unwrap()],
            match_mode: MatchMode::Any,
            root_cause: "optical module failure".into(),
            remediation: "swap the module, then resume from checkpoint".into(),
        })
        .unwrap();
        let t = temporal_of(&b);
        let r = assemble(&b, lib.match_bundle(&b), &SpatialOutcome::default(), &t, FilterStats::default());
        assert!(!r.no_findings);
        assert_eq!(r.library_matches[0].root_cause, "optical module failure");
        assert_eq!(r.library_matches[0].remediation, "swap the module, then resume from checkpoint");
        let e = &r.failure_indicating_events[0];
        assert_eq!(e.sources, [EvidenceSource::Library]);
        assert_eq!((e.example.node_id.as_str(), e.example.line), ("n0", 3));
        assert_eq!(r.failing_stage.unwrap().stage, Stage::IterTrain);
    }

    #[test]
    fn sources_merge_and_json_round_trips() {
        let b = bundle();
        let t = temporal_of(&b);
        let sig = "ROCE(,hccp_service.bin):error cqe status.";
        let spatial = SpatialOutcome {
            ranking: vec![
                NodeAnomalyScore { node_id: "n0".into(), score: 0.7, rank: 1 },
                NodeAnomalyScore { node_id: "n1".into(), score: 0.4, rank: 2 },
            ],
            recommended: vec![NodeAnomalyScore { node_id: "n0".into(), score: 0.7, rank: 1 }],
            attributions: [("n0".to_string(), vec![EventAttribution { signature: sig.into(), deviation: 1.0 }])]
                .into_iter()
                .collect(),
            skipped: None,
        };
        let lib_match = MatchResult {
            pattern_id: "p".into(),
            name: "p".into(),
            category: FaultCategory::Network,
            root_cause: String::new(),
            remediation: String::new(),
            confidence: 1.0,
            matched_events: vec![crate::library::MatchedEvent {
                node_id: "n0".into(),
                line: 3,
                record_index: 2,
                signature: sig.into(),
            }],
        };
        let r = assemble(&b, vec![lib_match], &spatial, &t, FilterStats { records_in: 5, records_out: 1, applied: true });
        assert_eq!(r.failure_indicating_events.len(), 1);
        assert_eq!(r.failure_indicating_events[0].sources, [EvidenceSource::Library, EvidenceSource::Spatial]);
        assert_eq!(r.ranked_nodes(), ["n0", "n1"]);
        let back = DiagnosisReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.schema, 1);
    }
}
