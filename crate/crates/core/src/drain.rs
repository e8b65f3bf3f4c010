//! Online template mining with a fixed-depth parse tree (Drain).
//!
//! Messages are masked, tokenized on whitespace and routed through the tree
//! by token count and then by their leading tokens. The leaf holds the
//! candidate templates; the most similar one above the threshold absorbs the
//! message, otherwise a new template is created.
//!
//! ```text
//!                 root
//!                  |
//!              len = 6            token count
//!               /     \
//!          "connect"  "<*>"       first token (digits route to <*>)
//!              |
//!            "to"                 second token (depth 4)
//!              |
//!   [connect to <*> failed after <*> ms]
//! ```
//!
//! Each node's stream is parsed by its own tree; templates are then unified
//! by feeding the per-node templates, sorted, through a fresh tree. Event ids
//! are therefore local to one job. Jobs are compared by template signature.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{JobBundle, Level, RawLogRecord, Timestamp};

pub const WILDCARD: &str = "<*>";
const EMPTY_MESSAGE: &str = "<empty>";

pub type EventId = u32;

#[derive(Debug, Error)]
pub enum DrainError {
    #[error("token lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid mask pattern `{pattern}`: {reason}")]
    BadMask { pattern: String, reason: String },
    #[error("drain depth must be at least 2, got {0}")]
    BadDepth(usize),
    #[error("similarity threshold must be in (0, 1], got {0}")]
    BadThreshold(f64),
}

#[derive(Clone, Debug)]
pub struct Mask {
    pattern: Regex,
    placeholder: String,
}

impl Mask {
    /// When the pattern has a capture group named `mask`, only that group is
    /// replaced; otherwise the whole match is.
    pub fn new(pattern: &str, placeholder: &str) -> Result<Self, DrainError> {
        let pattern = Regex::new(pattern).map_err(|e| DrainError::BadMask {
            pattern: pattern.to_string(),
            reason: e.to_string(),
        })?;
        Ok(Mask { pattern, placeholder: placeholder.to_string() })
    }

    fn apply<'a>(&self, text: &'a str) -> std::borrow::Cow<'a, str> {
        let placeholder = self.placeholder.as_str();
        if self.pattern.capture_names().any(|n| n == Some("mask")) {
            self.pattern.replace_all(text, |caps: &regex::Captures<'_>| {
                let whole = caps.get(0).unwrap();
                match caps.name("mask") {
                    Some(m) => {
                        let start = m.start() - whole.start();
                        let end = m.end() - whole.start();
                        let w = whole.as_str();
                        format!("{}{}{}", &w[..start], placeholder, &w[end..])
                    }
                    None => whole.as_str().to_string(),
                }
            })
        } else {
            self.pattern.replace_all(text, placeholder)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Masks(Vec<Mask>);

impl Masks {
    pub fn none() -> Self {
        Masks(Vec::new())
    }

    /// IPs, paths, hex ids and numbers, applied in that order.
    pub fn standard() -> Self {
        let specs = [
            r"\b\d{1,3}(?:\.\d{1,3}){3}(?::\d+)?\b",
            r#"(?:^|[\s=:'"(\[,])(?P<mask>(?:/[\w.\-]+)+/?)"#,
            r"\b0[xX][0-9a-fA-F]+\b|\b[0-9a-fA-F]{12,}\b",
            r"\d+(?:\.\d+)?(?:[eE][-+]?\d+)?",
        ];
        Masks(specs.iter().map(|p| Mask::new(p, WILDCARD).expect("builtin mask")).collect())
    }

    /// One mask per line: `<regex>\t<placeholder>`; the placeholder defaults
    /// to `<*>`. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, DrainError> {
        let mut masks = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (pattern, placeholder) = match line.rsplit_once('\t') {
                Some((p, ph)) if !ph.trim().is_empty() => (p, ph.trim()),
                _ => (line, WILDCARD),
            };
            masks.push(Mask::new(pattern, placeholder)?);
        }
        Ok(Masks(masks))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for Masks {
    fn default() -> Self {
        Masks::standard()
    }
}

/// Masks the message and splits it on whitespace.
pub fn preprocess(message: &str, masks: &Masks) -> Vec<String> {
    let mut text = std::borrow::Cow::Borrowed(message);
    for mask in &masks.0 {
        if let std::borrow::Cow::Owned(s) = mask.apply(&text) {
            text = std::borrow::Cow::Owned(s);
        }
    }
    text.split_whitespace().map(str::to_string).collect()
}

/// Fraction of positions where the tokens agree; template wildcards match
/// anything.
pub fn similarity(tokens: &[String], template: &[String]) -> Result<f64, DrainError> {
    if tokens.len() != template.len() {
        return Err(DrainError::LengthMismatch(tokens.len(), template.len()));
    }
    if tokens.is_empty() {
        return Ok(1.0);
    }
    Ok(matching_positions(tokens, template) as f64 / tokens.len() as f64)
}

fn matching_positions(tokens: &[String], template: &[String]) -> usize {
    tokens
        .iter()
        .zip(template)
        .filter(|(t, p)| p.as_str() == WILDCARD || t == p)
        .count()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogTemplate {
    pub event_id: EventId,
    pub tokens: Vec<String>,
    pub occurrence_count: u64,
}

impl LogTemplate {
    /// Joined token string; stable across parser instances.
    pub fn signature(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn wildcard_count(&self) -> usize {
        self.tokens.iter().filter(|t| *t == WILDCARD).count()
    }

    /// Message tokens sitting at this template's wildcard positions.
    pub fn extract_parameters(&self, tokens: &[String]) -> Vec<String> {
        self.tokens
            .iter()
            .zip(tokens)
            .filter(|(t, _)| *t == WILDCARD)
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Substitutes parameters back into the wildcard slots.
    pub fn reconstruct(&self, parameters: &[String]) -> Vec<String> {
        let mut params = parameters.iter();
        self.tokens
            .iter()
            .map(|t| {
                if t == WILDCARD {
                    params.next().cloned().unwrap_or_else(|| WILDCARD.to_string())
                } else {
                    t.clone()
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrainConfig {
    pub depth: usize,
    pub similarity_threshold: f64,
    pub max_children: usize,
}

impl Default for DrainConfig {
    fn default() -> Self {
        DrainConfig { depth: 4, similarity_threshold: 0.4, max_children: 100 }
    }
}

impl DrainConfig {
    pub fn validate(&self) -> Result<(), DrainError> {
        if self.depth < 2 {
            return Err(DrainError::BadDepth(self.depth));
        }
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold <= 1.0) {
            return Err(DrainError::BadThreshold(self.similarity_threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct TreeNode {
    children: HashMap<String, usize>,
    templates: Vec<usize>,
}

/// A single-writer Drain tree.
#[derive(Debug)]
pub struct ParseTree {
    config: DrainConfig,
    nodes: Vec<TreeNode>,
    by_length: HashMap<usize, usize>,
    templates: Vec<LogTemplate>,
}

fn routing_key(token: &str) -> &str {
    if token.contains(WILDCARD) || token.bytes().any(|b| b.is_ascii_digit()) {
        WILDCARD
    } else {
        token
    }
}

impl ParseTree {
    pub fn new(config: DrainConfig) -> Self {
        ParseTree { config, nodes: Vec::new(), by_length: HashMap::new(), templates: Vec::new() }
    }

    pub fn config(&self) -> &DrainConfig {
        &self.config
    }

    pub fn templates(&self) -> &[LogTemplate] {
        &self.templates
    }

    pub fn into_templates(self) -> Vec<LogTemplate> {
        self.templates
    }

    fn token_levels(&self, len: usize) -> usize {
        self.config.depth.saturating_sub(2).min(len)
    }

    fn find_leaf(&self, tokens: &[String]) -> Option<usize> {
        let mut node = *self.by_length.get(&tokens.len())?;
        for token in &tokens[..self.token_levels(tokens.len())] {
            let children = &self.nodes[node].children;
            node = match children.get(routing_key(token)) {
                Some(&child) => child,
                None => *children.get(WILDCARD)?,
            };
        }
        Some(node)
    }

    fn new_node(&mut self) -> usize {
        self.nodes.push(TreeNode::default());
        self.nodes.len() - 1
    }

    fn insert_leaf(&mut self, tokens: &[String]) -> usize {
        let mut node = match self.by_length.get(&tokens.len()) {
            Some(&n) => n,
            None => {
                let n = self.new_node();
                self.by_length.insert(tokens.len(), n);
                n
            }
        };
        for token in &tokens[..self.token_levels(tokens.len())] {
            let key = routing_key(token);
            if let Some(&child) = self.nodes[node].children.get(key) {
                node = child;
                continue;
            }
            let children = &self.nodes[node].children;
            let named = children.len() - usize::from(children.contains_key(WILDCARD));
            // keep one slot for the catch-all child
            let key = if key != WILDCARD && named + 1 < self.config.max_children {
                key.to_string()
            } else {
                WILDCARD.to_string()
            };
            node = match self.nodes[node].children.get(&key) {
                Some(&child) => child,
                None => {
                    let child = self.new_node();
                    self.nodes[node].children.insert(key, child);
                    child
                }
            };
        }
        node
    }

    fn best_match(&self, leaf: usize, tokens: &[String]) -> Option<usize> {
        let mut best: Option<(usize, usize)> = None;
        for &idx in &self.nodes[leaf].templates {
            let score = matching_positions(tokens, &self.templates[idx].tokens);
            // earliest template wins ties
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((idx, score));
            }
        }
        let (idx, score) = best?;
        (score as f64 / tokens.len() as f64 >= self.config.similarity_threshold).then_some(idx)
    }

    /// Assigns already-preprocessed tokens to a template.
    pub fn add_tokens(&mut self, tokens: &[String]) -> EventId {
        let empty;
        let tokens = if tokens.is_empty() {
            empty = vec![EMPTY_MESSAGE.to_string()];
            &empty[..]
        } else {
            tokens
        };
        if let Some(leaf) = self.find_leaf(tokens) {
            if let Some(idx) = self.best_match(leaf, tokens) {
                let template = &mut self.templates[idx];
                for (slot, token) in template.tokens.iter_mut().zip(tokens) {
                    if slot != token && slot != WILDCARD {
                        *slot = WILDCARD.to_string();
                    }
                }
                template.occurrence_count += 1;
                return template.event_id;
            }
        }
        let leaf = self.insert_leaf(tokens);
        let event_id = self.templates.len() as EventId;
        self.templates.push(LogTemplate { event_id, tokens: tokens.to_vec(), occurrence_count: 1 });
        self.nodes[leaf].templates.push(event_id as usize);
        event_id
    }

    /// Parses one message; parameters are taken against the template as it
    /// stands after this message was merged.
    pub fn parse_line(&mut self, message: &str, masks: &Masks) -> (EventId, Vec<String>) {
        let tokens = preprocess(message, masks);
        let id = self.add_tokens(&tokens);
        let params = self.templates[id as usize].extract_parameters(&tokens);
        (id, params)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParserConfig {
    pub drain: DrainConfig,
    pub masks: Masks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsedRecord {
    pub raw: RawLogRecord,
    pub event_id: EventId,
    pub parameters: Vec<String>,
}

impl ParsedRecord {
    pub fn node_id(&self) -> &str {
        &self.raw.node_id
    }

    pub fn timestamp(&self) -> Timestamp {
        self.raw.timestamp
    }

    pub fn level(&self) -> Level {
        self.raw.level
    }

    pub fn line(&self) -> u32 {
        self.raw.source_line
    }
}

/// A job whose records have been resolved to job-local templates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsedBundle {
    pub job_id: String,
    pub metadata: BTreeMap<String, String>,
    pub templates: Vec<LogTemplate>,
    signatures: Vec<String>,
    pub nodes: BTreeMap<String, Vec<ParsedRecord>>,
}

impl ParsedBundle {
    pub fn new(
        job_id: String,
        metadata: BTreeMap<String, String>,
        templates: Vec<LogTemplate>,
        nodes: BTreeMap<String, Vec<ParsedRecord>>,
    ) -> Self {
        let signatures = templates.iter().map(LogTemplate::signature).collect();
        let mut bundle = ParsedBundle { job_id, metadata, templates, signatures, nodes };
        bundle.recount();
        bundle
    }

    pub fn signature(&self, event_id: EventId) -> &str {
        &self.signatures[event_id as usize]
    }

    pub fn template(&self, event_id: EventId) -> &LogTemplate {
        &self.templates[event_id as usize]
    }

    pub fn record_count(&self) -> usize {
        self.nodes.values().map(Vec::len).sum()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn records(&self) -> impl Iterator<Item = &ParsedRecord> {
        self.nodes.values().flatten()
    }

    /// Same templates, different record set; occurrence counts are refreshed.
    pub fn with_nodes(&self, nodes: BTreeMap<String, Vec<ParsedRecord>>) -> ParsedBundle {
        let mut bundle = ParsedBundle {
            job_id: self.job_id.clone(),
            metadata: self.metadata.clone(),
            templates: self.templates.clone(),
            signatures: self.signatures.clone(),
            nodes,
        };
        bundle.recount();
        bundle
    }

    fn recount(&mut self) {
        for t in &mut self.templates {
            t.occurrence_count = 0;
        }
        for rec in self.nodes.values().flatten() {
            self.templates[rec.event_id as usize].occurrence_count += 1;
        }
    }

    /// Finds a record by node and source line.
    pub fn find(&self, node: &str, line: u32) -> Option<&ParsedRecord> {
        let recs = self.nodes.get(node)?;
        recs.iter().find(|r| r.raw.source_line == line)
    }

    /// Writes `{node, ts, level, event_id, template, params}` per record.
    pub fn write_json_lines<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            node: &'a str,
            ts: Timestamp,
            level: Level,
            event_id: EventId,
            template: &'a str,
            params: &'a [String],
        }
        for rec in self.records() {
            let line = Line {
                node: &rec.raw.node_id,
                ts: rec.raw.timestamp,
                level: rec.raw.level,
                event_id: rec.event_id,
                template: self.signature(rec.event_id),
                params: &rec.parameters,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

struct NodeParse {
    node: String,
    templates: Vec<LogTemplate>,
    assignments: Vec<(EventId, Vec<String>)>,
}

/// Parses every node with its own tree, then unifies the templates.
pub fn parse_bundle(bundle: &JobBundle, config: &ParserConfig) -> ParsedBundle {
    let node_parses: Vec<NodeParse> = bundle
        .nodes
        .par_iter()
        .map(|(node, records)| {
            let mut tree = ParseTree::new(config.drain.clone());
            let assignments = records
                .iter()
                .map(|r| {
                    let tokens = preprocess(&r.message, &config.masks);
                    (tree.add_tokens(&tokens), tokens)
                })
                .collect();
            NodeParse { node: node.clone(), templates: tree.into_templates(), assignments }
        })
        .collect();

    // Unify: distinct node templates in sorted order through a fresh tree.
    let mut distinct: Vec<&Vec<String>> =
        node_parses.iter().flat_map(|p| p.templates.iter().map(|t| &t.tokens)).collect();
    distinct.sort();
    distinct.dedup();
    let mut merge_tree = ParseTree::new(config.drain.clone());
    let job_ids: HashMap<&Vec<String>, EventId> =
        distinct.iter().map(|tokens| (*tokens, merge_tree.add_tokens(tokens))).collect();
    let templates = merge_tree.into_templates();
    let local_to_job: Vec<Vec<EventId>> =
        node_parses.iter().map(|p| p.templates.iter().map(|t| job_ids[&t.tokens]).collect()).collect();

    let mut nodes = BTreeMap::new();
    for ((parse, local_to_job), (_, raw_records)) in node_parses.into_iter().zip(local_to_job).zip(&bundle.nodes) {
        let recs = parse
            .assignments
            .into_iter()
            .zip(raw_records)
            .map(|((local, tokens), raw)| {
                let event_id = local_to_job[local as usize];
                let parameters = if tokens.is_empty() {
                    Vec::new()
                } else {
                    templates[event_id as usize].extract_parameters(&tokens)
                };
                ParsedRecord { raw: raw.clone(), event_id, parameters }
            })
            .collect();
        nodes.insert(parse.node, recs);
    }
    ParsedBundle::new(bundle.job_id.clone(), bundle.metadata.clone(), templates, nodes)
}
