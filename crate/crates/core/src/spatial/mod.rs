//! Spatial comparison: nodes of a synchronous job should log alike, so a
//! node whose event-count vector stands apart is suspicious.

pub mod iforest;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drain::ParsedBundle;
pub use iforest::{average_path_length, IsolationForest, IsolationForestParams};

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error("need at least {MIN_NODES} nodes to score, got {0}")]
    TooFewNodes(usize),
    #[error("average path length is undefined for m = {0}")]
    Domain(usize),
    #[error("invalid isolation forest parameters: {0}")]
    BadParams(String),
}

pub const MIN_NODES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCountVector {
    pub node_id: String,
    pub counts: Vec<u32>,
}

/// Vectors over one shared, sorted signature index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorSet {
    pub index: Vec<String>,
    pub vectors: Vec<EventCountVector>,
}

pub fn vectorize(bundle: &ParsedBundle) -> VectorSet {
    let present: BTreeSet<&str> = bundle.records().map(|r| bundle.signature(r.event_id)).collect();
    let index: Vec<String> = present.into_iter().map(str::to_string).collect();
    let position: BTreeMap<&str, usize> = index.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let vectors = bundle
        .nodes
        .iter()
        .map(|(node, recs)| {
            let mut counts = vec![0u32; index.len()];
            for r in recs {
                counts[position[bundle.signature(r.event_id)]] += 1;
            }
            EventCountVector { node_id: node.clone(), counts }
        })
        .collect();
    VectorSet { index, vectors }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeAnomalyScore {
    pub node_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Fits a forest on all vectors and ranks nodes by descending score; exact
/// ties go to the lexicographically smaller node id.
pub fn score_nodes(
    vectors: &[EventCountVector],
    params: &IsolationForestParams,
    seed: u64,
) -> Result<Vec<NodeAnomalyScore>, SpatialError> {
    if vectors.len() < MIN_NODES {
        return Err(SpatialError::TooFewNodes(vectors.len()));
    }
    // input order must not influence subsampling
    let mut sorted: Vec<&EventCountVector> = vectors.iter().collect();
    sorted.sort_by(|a, b| a.node_id.cmp(&b.node_id));
    let data: Vec<Vec<f64>> = sorted.iter().map(|v| v.counts.iter().map(|&c| c as f64).collect()).collect();
    let forest = IsolationForest::fit(&data, params, seed)?;
    let mut scores: Vec<NodeAnomalyScore> = sorted
        .iter()
        .zip(&data)
        .map(|(v, x)| NodeAnomalyScore { node_id: v.node_id.clone(), score: forest.score(x), rank: 0 })
        .collect();
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.node_id.cmp(&b.node_id)));
    for (i, s) in scores.iter_mut().enumerate() {
        s.rank = i + 1;
    }
    Ok(scores)
}

pub fn recommend_nodes(scores: &[NodeAnomalyScore], k: usize, threshold: f64) -> Vec<NodeAnomalyScore> {
    scores.iter().filter(|s| s.score >= threshold).take(k).cloned().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventAttribution {
    pub signature: String,
    pub deviation: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub const ATTRIBUTION_TOP: usize = 10;

/// Robust per-event deviation `|c - median| / (MAD + 1)` for each
/// recommended node, best first. Events with zero deviation are omitted.
pub fn attribute_events(set: &VectorSet, recommended: &[String]) -> BTreeMap<String, Vec<EventAttribution>> {
    let n_events = set.index.len();
    let mut centers = Vec::with_capacity(n_events);
    for i in 0..n_events {
        let mut col: Vec<f64> = set.vectors.iter().map(|v| v.counts[i] as f64).collect();
        let med = median(&mut col);
        let mut dev: Vec<f64> = col.iter().map(|c| (c - med).abs()).collect();
        let mad = median(&mut dev);
        centers.push((med, mad));
    }
    let mut out = BTreeMap::new();
    for node in recommended {
        let Some(v) = set.vectors.iter().find(|v| &v.node_id == node) else {
            continue;
        };
        let mut attrs: Vec<EventAttribution> = (0..n_events)
            .map(|i| {
                let (med, mad) = centers[i];
                EventAttribution {
                    signature: set.index[i].clone(),
                    deviation: (v.counts[i] as f64 - med).abs() / (mad + 1.0),
                }
            })
            .filter(|a| a.deviation > 0.0)
            .collect();
        attrs.sort_by(|a, b| b.deviation.total_cmp(&a.deviation).then_with(|| a.signature.cmp(&b.signature)));
        attrs.truncate(ATTRIBUTION_TOP);
        out.insert(node.clone(), attrs);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialConfig {
    pub forest: IsolationForestParams,
    pub anomaly_threshold: f64,
    pub top_k_nodes: usize,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig { forest: IsolationForestParams::default(), anomaly_threshold: 0.6, top_k_nodes: 8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpatialOutcome {
    pub ranking: Vec<NodeAnomalyScore>,
    pub recommended: Vec<NodeAnomalyScore>,
    pub attributions: BTreeMap<String, Vec<EventAttribution>>,
    /// Set when scoring was skipped (e.g. fewer than four nodes).
    pub skipped: Option<String>,
}

pub fn analyze(filtered: &ParsedBundle, config: &SpatialConfig, seed: u64) -> Result<SpatialOutcome, SpatialError> {
    let set = vectorize(filtered);
    let ranking = match score_nodes(&set.vectors, &config.forest, seed) {
        Ok(r) => r,
        Err(SpatialError::TooFewNodes(n)) => {
            return Ok(SpatialOutcome {
                skipped: Some(format!("spatial comparison needs at least {MIN_NODES} nodes, job has {n}")),
                ..Default::default()
            })
        }
        Err(e) => return Err(e),
    };
    let recommended = recommend_nodes(&ranking, config.top_k_nodes, config.anomaly_threshold);
    let names: Vec<String> = recommended.iter().map(|s| s.node_id.clone()).collect();
    let attributions = attribute_events(&set, &names);
    Ok(SpatialOutcome { ranking, recommended, attributions, skipped: None })
}
