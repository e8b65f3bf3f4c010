//! Rule-based stage segmentation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TemporalError;
use crate::drain::{ParsedBundle, ParsedRecord};
use crate::pattern::TemplatePattern;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    EnvInit,
    DataLoad,
    ModelInit,
    IterTrain,
    Checkpoint,
    Teardown,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::EnvInit, Stage::DataLoad, Stage::ModelInit, Stage::IterTrain, Stage::Checkpoint, Stage::Teardown];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::EnvInit => "ENV_INIT",
            Stage::DataLoad => "DATA_LOAD",
            Stage::ModelInit => "MODEL_INIT",
            Stage::IterTrain => "ITER_TRAIN",
            Stage::Checkpoint => "CHECKPOINT",
            Stage::Teardown => "TEARDOWN",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = TemporalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| TemporalError::BadRules(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRule {
    pub stage: Stage,
    pub boundary_patterns: Vec<TemplatePattern>,
    pub priority: i32,
}

/// A validated rule set: every rule has a pattern, priorities are unique
/// and ITER_TRAIN is covered.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRules(Vec<StageRule>);

impl StageRules {
    pub fn new(rules: Vec<StageRule>) -> Result<Self, TemporalError> {
        let mut seen = BTreeMap::new();
        for r in &rules {
            if r.boundary_patterns.is_empty() {
                return Err(TemporalError::BadRules(format!("rule for {} has no patterns", r.stage)));
            }
            if let Some(other) = seen.insert(r.priority, r.stage) {
                return Err(TemporalError::BadRules(format!(
                    "priority {} used by both {other} and {}",
                    r.priority, r.stage
                )));
            }
        }
        if !rules.iter().any(|r| r.stage == Stage::IterTrain) {
            return Err(TemporalError::BadRules("no rule for ITER_TRAIN".into()));
        }
        Ok(StageRules(rules))
    }

    /// Rules for the synthetic generator's dialect.
    pub fn default_rules() -> Self {
        let rule = |stage, pat: &str, priority| StageRule {
            stage,
            boundary_patterns: vec![TemplatePattern::Substring(pat.into())],
            priority,
        };
        StageRules(vec![
            rule(Stage::EnvInit, "initializing distributed environment", 1),
            rule(Stage::DataLoad, "start data loading", 2),
            rule(Stage::ModelInit, "building model", 3),
            rule(Stage::IterTrain, "training iteration", 4),
            rule(Stage::Checkpoint, "saving checkpoint", 5),
            rule(Stage::Teardown, "training finished", 6),
        ])
    }

    /// One rule line per pattern: `STAGE <pattern> PRIORITY`. The pattern
    /// is everything between the first and last whitespace-separated
    /// fields. Lines for the same stage accumulate patterns and must agree
    /// on priority. `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, TemporalError> {
        let mut rules: Vec<StageRule> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: &str| TemporalError::BadRules(format!("line {}: {why}", n + 1));
            let (stage, rest) = line.split_once(char::is_whitespace).ok_or_else(|| bad("expected stage, pattern, priority"))?;
            let (pattern, priority) =
                rest.trim().rsplit_once(char::is_whitespace).ok_or_else(|| bad("expected stage, pattern, priority"))?;
            let stage: Stage = stage.parse()?;
            let priority: i32 = priority.parse().map_err(|_| bad("priority must be an integer"))?;
            let pattern: TemplatePattern = pattern.trim().parse().map_err(|e| bad(&format!("{e}")))?;
            match rules.iter_mut().find(|r| r.stage == stage) {
                Some(r) if r.priority != priority => return Err(bad("conflicting priority for stage")),
                Some(r) => r.boundary_patterns.push(pattern),
                None => rules.push(StageRule { stage, boundary_patterns: vec![pattern], priority }),
            }
        }
        StageRules::new(rules)
    }

    pub fn rules(&self) -> &[StageRule] {
        &self.0
    }

    /// The highest-priority stage whose boundary matches `template_text`.
    pub fn classify(&self, template_text: &str) -> Option<Stage> {
        self.0
            .iter()
            .filter(|r| r.boundary_patterns.iter().any(|p| p.is_match(template_text)))
            .max_by_key(|r| r.priority)
            .map(|r| r.stage)
    }
}

impl Default for StageRules {
    fn default() -> Self {
        StageRules::default_rules()
    }
}

/// Half-open record range `[start, end)` of one node's stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpan {
    pub stage: Stage,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub nodes: BTreeMap<String, Vec<StageSpan>>,
}

impl Segmentation {
    pub fn spans(&self, node: &str) -> &[StageSpan] {
        self.nodes.get(node).map_or(&[], Vec::as_slice)
    }

    pub fn stage_at(&self, node: &str, index: usize) -> Option<Stage> {
        self.spans(node).iter().find(|s| s.start <= index && index < s.end).map(|s| s.stage)
    }

    pub fn terminal_stage(&self, node: &str) -> Option<Stage> {
        self.spans(node).last().map(|s| s.stage)
    }

    pub fn has_iterative_stage(&self) -> bool {
        self.nodes.values().flatten().any(|s| s.stage == Stage::IterTrain)
    }

    /// Warning-level check: without an ITER_TRAIN span, iteration analysis
    /// has nothing to work on.
    pub fn check_iterative(&self) -> Result<(), TemporalError> {
        if self.has_iterative_stage() {
            Ok(())
        } else {
            Err(TemporalError::NoIterativeStage)
        }
    }

    /// The latest stage (in pipeline order) that every node entered.
    pub fn latest_common_stage(&self) -> Option<Stage> {
        self.nodes.values().filter_map(|spans| spans.iter().map(|s| s.stage).max()).min()
    }
}

fn segment_node(records: &[ParsedRecord], boundary: &[Option<Stage>]) -> Vec<StageSpan> {
    let mut spans: Vec<StageSpan> = Vec::new();
    let mut current = StageSpan { stage: Stage::EnvInit, start: 0, end: 0 };
    for (i, r) in records.iter().enumerate() {
        if let Some(stage) = boundary[r.event_id as usize] {
            if stage != current.stage || i == 0 {
                if current.end > current.start {
                    spans.push(current);
                }
                current = StageSpan { stage, start: i, end: i };
            }
        }
        current.end = i + 1;
    }
    if current.end > current.start {
        spans.push(current);
    }
    spans
}

/// Partitions each node's stream into contiguous spans labeled by the most
/// recent boundary; records before any boundary are ENV_INIT.
pub fn segment_stages(bundle: &ParsedBundle, rules: &StageRules) -> Segmentation {
    let boundary: Vec<Option<Stage>> =
        bundle.templates.iter().map(|t| rules.classify(bundle.signature(t.event_id))).collect();
    let nodes = bundle.nodes.iter().map(|(node, recs)| (node.clone(), segment_node(recs, &boundary))).collect();
    Segmentation { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::job;

    #[test]
    fn spans_follow_boundaries() {
        let b = job(
            "j",
            &[(
                "n",
                &[
                    "loading env vars",
                    "start data loading now",
                    "read shard 1",
                    "training iteration 0 begins",
                    "loss is 1",
                    "training iteration 1 begins",
                ],
            )],
        );
        let seg = segment_stages(&b, &StageRules::default());
        let spans = seg.spans("n");
        let stages: Vec<_> = spans.iter().map(|s| (s.stage, s.start, s.end)).collect();
        assert_eq!(
            stages,
            [(Stage::EnvInit, 0, 1), (Stage::DataLoad, 1, 3), (Stage::IterTrain, 3, 6)]
        );
        assert_eq!(seg.terminal_stage("n"), Some(Stage::IterTrain));
        assert!(seg.check_iterative().is_ok());
    }

    #[test]
    fn no_boundary_is_one_env_span() {
        let b = job("j", &[("n", &["hello there", "general remark"])]);
        let seg = segment_stages(&b, &StageRules::default());
        assert_eq!(seg.spans("n"), [StageSpan { stage: Stage::EnvInit, start: 0, end: 2 }]);
        assert!(matches!(seg.check_iterative(), Err(TemporalError::NoIterativeStage)));
    }

    #[test]
    fn higher_priority_wins_on_shared_record() {
        let rules = StageRules::parse(
            "ITER_TRAIN training iteration 4\nCHECKPOINT /saving checkpoint/ 5\n# comment\nCHECKPOINT ckpt 5\n",
        )
        .unwrap();
        assert_eq!(rules.rules()[1].boundary_patterns.len(), 2);
        assert_eq!(rules.classify("training iteration <*> saving checkpoint"), Some(Stage::Checkpoint));
        assert_eq!(rules.classify("training iteration <*> begins"), Some(Stage::IterTrain));
        assert_eq!(rules.classify("nothing"), None);
    }

    #[test]
    fn rule_validation() {
        assert!(StageRules::parse("DATA_LOAD start 1\n").is_err());
        assert!(StageRules::parse("ITER_TRAIN a 1\nDATA_LOAD b 1\n").is_err());
        assert!(StageRules::parse("ITER_TRAIN a 1\nITER_TRAIN b 2\n").is_err());
        assert!(StageRules::parse("WARMUP a 1\n").is_err());
        assert!(StageRules::parse("ITER_TRAIN a b\n").is_err());
    }
}
