//! Cross-job filtering against a pool of events seen in successful runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drain::ParsedBundle;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("no successful jobs to build a normal event pool from")]
    EmptyHistory,
    #[error("presence fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("pool file {path}: {reason}")]
    PoolFile { path: String, reason: String },
}

/// Event signatures of successful jobs, with the number of jobs each
/// appeared in.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalEventPool {
    pub signatures: BTreeMap<String, u32>,
    pub total_jobs: u32,
}

impl NormalEventPool {
    pub fn build(successful: &[ParsedBundle]) -> Result<Self, FilterError> {
        if successful.is_empty() {
            return Err(FilterError::EmptyHistory);
        }
        let mut signatures: BTreeMap<String, u32> = BTreeMap::new();
        for job in successful {
            let present: BTreeSet<&str> = job
                .templates
                .iter()
                .filter(|t| t.occurrence_count > 0)
                .map(|t| job.signature(t.event_id))
                .collect();
            for sig in present {
                *signatures.entry(sig.to_string()).or_default() += 1;
            }
        }
        Ok(NormalEventPool { signatures, total_jobs: successful.len() as u32 })
    }

    pub fn presence(&self, signature: &str) -> f64 {
        self.signatures.get(signature).map_or(0.0, |&n| n as f64 / self.total_jobs as f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), FilterError> {
        let text = serde_json::to_string_pretty(self).expect("pool serializes");
        fs::write(path, text).map_err(|e| FilterError::PoolFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, FilterError> {
        let err = |reason: String| FilterError::PoolFile { path: path.display().to_string(), reason };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

pub fn build_pool(successful: &[ParsedBundle]) -> Result<NormalEventPool, FilterError> {
    NormalEventPool::build(successful)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub records_in: usize,
    pub records_out: usize,
    /// False when no history was available and the stream passed through.
    pub applied: bool,
}

impl FilterStats {
    pub fn removed_fraction(&self) -> f64 {
        if self.records_in == 0 {
            0.0
        } else {
            1.0 - self.records_out as f64 / self.records_in as f64
        }
    }
}

/// A pool plus the presence threshold above which an event counts as normal.
#[derive(Clone, Debug)]
pub struct CrossJobFilter {
    pool: Option<NormalEventPool>,
    presence_fraction: f64,
}

pub const DEFAULT_PRESENCE_FRACTION: f64 = 0.5;

impl CrossJobFilter {
    pub fn new(pool: Option<NormalEventPool>, presence_fraction: f64) -> Result<Self, FilterError> {
        if !(presence_fraction > 0.0 && presence_fraction <= 1.0) {
            return Err(FilterError::BadFraction(presence_fraction));
        }
        Ok(CrossJobFilter { pool, presence_fraction })
    }

    /// A filter that keeps everything.
    pub fn passthrough() -> Self {
        CrossJobFilter { pool: None, presence_fraction: DEFAULT_PRESENCE_FRACTION }
    }

    pub fn pool(&self) -> Option<&NormalEventPool> {
        self.pool.as_ref()
    }

    pub fn is_normal(&self, signature: &str) -> bool {
        self.pool.as_ref().is_some_and(|p| p.presence(signature) >= self.presence_fraction)
    }

    /// Per-template verdicts for one bundle, indexed by event id.
    pub fn normal_mask(&self, bundle: &ParsedBundle) -> Vec<bool> {
        bundle.templates.iter().map(|t| self.is_normal(bundle.signature(t.event_id))).collect()
    }

    pub fn apply(&self, bundle: &ParsedBundle) -> (ParsedBundle, FilterStats) {
        let records_in = bundle.record_count();
        if self.pool.is_none() {
            return (bundle.clone(), FilterStats { records_in, records_out: records_in, applied: false });
        }
        let normal = self.normal_mask(bundle);
        let nodes = bundle
            .nodes
            .iter()
            .map(|(node, recs)| {
                let kept = recs.iter().filter(|r| !normal[r.event_id as usize]).cloned().collect();
                (node.clone(), kept)
            })
            .collect();
        let out = bundle.with_nodes(nodes);
        let records_out = out.record_count();
        (out, FilterStats { records_in, records_out, applied: true })
    }
}

/// Removes records whose signature is present in at least
/// `presence_fraction` of the pooled jobs; order is preserved.
pub fn filter(failed: &ParsedBundle, pool: &NormalEventPool, presence_fraction: f64) -> Result<ParsedBundle, FilterError> {
    let f = CrossJobFilter::new(Some(pool.clone()), presence_fraction)?;
    Ok(f.apply(failed).0)
}
