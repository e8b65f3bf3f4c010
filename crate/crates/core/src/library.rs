//! Library of confirmed fault patterns, matched against new failures before
//! (and alongside) full analysis.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drain::ParsedBundle;
use crate::pattern::TemplatePattern;

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("pattern id {0:?} already exists")]
    DuplicateId(String),
    #[error("invalid pattern: {0}")]
    Validation(String),
    #[error("library file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("library file {path}: {reason}")]
    Format { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultCategory {
    Network,
    Accelerator,
    Node,
    Storage,
    Config,
    ProgramBug,
    Incompatibility,
    Misoperation,
    Framework,
    Platform,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MatchMode {
    #[default]
    All,
    Any,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultPattern {
    pub id: String,
    pub name: String,
    pub category: FaultCategory,
    pub signature_events: Vec<TemplatePattern>,
    #[serde(default)]
    pub match_mode: MatchMode,
    pub root_cause: String,
    pub remediation: String,
}

impl FaultPattern {
    pub fn validate(&self) -> Result<(), LibraryError> {
        if self.id.trim().is_empty() {
            return Err(LibraryError::Validation("empty pattern id".into()));
        }
        if self.signature_events.is_empty() {
            return Err(LibraryError::Validation(format!("pattern {:?} has no signature events", self.id)));
        }
        Ok(())
    }
}

/// A record that satisfied one of a pattern's signature events.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedEvent {
    pub node_id: String,
    pub line: u32,
    pub record_index: usize,
    pub signature: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pattern_id: String,
    pub name: String,
    pub category: FaultCategory,
    pub root_cause: String,
    pub remediation: String,
    pub confidence: f64,
    pub matched_events: Vec<MatchedEvent>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultLibrary {
    #[serde(default, rename = "pattern")]
    patterns: Vec<FaultPattern>,
}

impl FaultLibrary {
    pub fn new() -> Self {
        FaultLibrary::default()
    }

    pub fn patterns(&self) -> &[FaultPattern] {
        &self.patterns
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&FaultPattern> {
        self.patterns.iter().find(|p| p.id == id)
    }

    pub fn add(&mut self, pattern: FaultPattern) -> Result<(), LibraryError> {
        pattern.validate()?;
        if self.get(&pattern.id).is_some() {
            return Err(LibraryError::DuplicateId(pattern.id));
        }
        self.patterns.push(pattern);
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let lib: FaultLibrary = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut ids = BTreeSet::new();
        for p in &lib.patterns {
            p.validate().map_err(|e| e.to_string())?;
            if !ids.insert(p.id.as_str()) {
                return Err(LibraryError::DuplicateId(p.id.clone()).to_string());
            }
        }
        Ok(lib)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("library serializes")
    }

    pub fn load(path: &Path) -> Result<Self, LibraryError> {
        let text =
            fs::read_to_string(path).map_err(|source| LibraryError::Io { path: path.display().to_string(), source })?;
        FaultLibrary::from_toml(&text).map_err(|reason| LibraryError::Format { path: path.display().to_string(), reason })
    }

    /// A missing file is an empty library.
    pub fn load_or_empty(path: &Path) -> Result<Self, LibraryError> {
        if path.exists() {
            FaultLibrary::load(path)
        } else {
            Ok(FaultLibrary::new())
        }
    }

    /// Writes to a temporary file in the same directory, then renames it
    /// over `path`.
    pub fn save(&self, path: &Path) -> Result<(), LibraryError> {
        let io = |source| LibraryError::Io { path: path.display().to_string(), source };
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(self.to_toml().as_bytes()).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    /// Matches every pattern against the template texts of `bundle`.
    /// Results are sorted by descending confidence, then pattern id.
    pub fn match_bundle(&self, bundle: &ParsedBundle) -> Vec<MatchResult> {
        let live: Vec<(u32, &str)> = bundle
            .templates
            .iter()
            .filter(|t| t.occurrence_count > 0)
            .map(|t| (t.event_id, bundle.signature(t.event_id)))
            .collect();
        let mut results: Vec<MatchResult> = self
            .patterns
            .iter()
            .filter_map(|p| {
                let mut hit_ids = BTreeSet::new();
                let mut satisfied = 0usize;
                for sig in &p.signature_events {
                    let hits: Vec<u32> = live.iter().filter(|(_, text)| sig.is_match(text)).map(|(id, _)| *id).collect();
                    if !hits.is_empty() {
                        satisfied += 1;
                    }
                    hit_ids.extend(hits);
                }
                let total = p.signature_events.len();
                let ok = match p.match_mode {
                    MatchMode::All => satisfied == total,
                    MatchMode::Any => satisfied > 0,
                };
                if !ok {
                    return None;
                }
                let mut matched_events = Vec::new();
                for (node, recs) in &bundle.nodes {
                    let mut seen = BTreeSet::new();
                    for (i, r) in recs.iter().enumerate() {
                        if hit_ids.contains(&r.event_id) && seen.insert(r.event_id) {
                            matched_events.push(MatchedEvent {
                                node_id: node.clone(),
                                line: r.line(),
                                record_index: i,
                                signature: bundle.signature(r.event_id).to_string(),
                            });
                        }
                    }
                }
                Some(MatchResult {
                    pattern_id: p.id.clone(),
                    name: p.name.clone(),
                    category: p.category,
                    root_cause: p.root_cause.clone(),
                    remediation: p.remediation.clone(),
                    confidence: satisfied as f64 / total as f64,
                    matched_events,
                })
            })
            .collect();
        results.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.pattern_id.cmp(&b.pattern_id)));
        results
    }
}

/// Loads the library at `path` (or starts empty), adds `pattern` and saves.
pub fn add_pattern(path: &Path, pattern: FaultPattern) -> Result<FaultLibrary, LibraryError> {
    let mut lib = FaultLibrary::load_or_empty(path)?;
    lib.add(pattern)?;
    lib.save(path)?;
    Ok(lib)
}

impl fmt::Display for FaultCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("category serializes");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

fn from_upper<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    let v = serde_json::Value::String(s.to_ascii_uppercase().replace('-', "_"));
    serde_json::from_value(v).map_err(|_| format!("unknown value `{s}`"))
}

impl FromStr for FaultCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        from_upper(s)
    }
}

impl FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        from_upper(s)
    }
}
