//! Raw log data model and job-directory ingestion.
//!
//! A job is a directory of per-node log files. Each line is split into a
//! header (timestamp, level) and a free-text message. Lines whose header
//! cannot be parsed are kept as `UNKNOWN` records stamped with the previous
//! record's timestamp, so no line is ever dropped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, SecondsFormat, TimeZone, Utc};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("no log files found under {0}")]
    EmptyBundle(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line does not match the header format")]
    HeaderMismatch,
    #[error("invalid header regex: {0}")]
    BadHeaderRegex(String),
}

/// Milliseconds since the Unix epoch, UTC.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const EPOCH: Timestamp = Timestamp(0);

    pub fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub fn millis(self) -> i64 {
        self.0
    }

    fn to_datetime(self) -> DateTime<Utc> {
        Utc.timestamp_millis_opt(self.0)
            .single()
            .unwrap_or_else(|| Utc.timestamp_millis_opt(0).unwrap())
    }

    /// Parses the timestamp shapes seen in training logs. Zone-less values
    /// are taken as UTC.
    pub fn parse(text: &str) -> Option<Timestamp> {
        let text = text.trim();
        if text.len() < 10 || !text.as_bytes()[0].is_ascii_digit() {
            return None;
        }
        if let Ok(dt) = DateTime::parse_from_rfc3339(text) {
            return Some(Timestamp(dt.timestamp_millis()));
        }
        // Ascend plog style: 2024-03-01-10:00:00.123.456
        let normalized;
        let mut candidate = text;
        if text.len() > 11 && text.as_bytes()[10] == b'-' {
            let mut s = String::with_capacity(text.len());
            s.push_str(&text[..10]);
            s.push('T');
            let rest = &text[11..];
            // drop a trailing microsecond group
            match rest.match_indices('.').nth(1) {
                Some((idx, _)) => s.push_str(&rest[..idx]),
                None => s.push_str(rest),
            }
            normalized = s;
            candidate = &normalized;
        }
        let candidate = candidate.replace(',', ".");
        let candidate = candidate.trim_end_matches('Z');
        for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
            if let Ok(ndt) = NaiveDateTime::parse_from_str(candidate, fmt) {
                return Some(Timestamp(ndt.and_utc().timestamp_millis()));
            }
        }
        if let Ok(d) = NaiveDate::parse_from_str(candidate, "%Y-%m-%d") {
            return Some(Timestamp(
                d.and_hms_opt(0, 0, 0)?.and_utc().timestamp_millis(),
            ));
        }
        None
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_datetime().to_rfc3339_opts(SecondsFormat::Millis, true))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Timestamp::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("bad timestamp {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Level {
    Debug,
    Info,
    Warning,
    Error,
    Unknown,
}

impl Level {
    /// Maps a header token to a level; `None` when the token is not a level.
    pub fn from_token(token: &str) -> Option<Level> {
        let t = token.trim_matches(|c| c == '[' || c == ']' || c == ':');
        let level = match t.to_ascii_uppercase().as_str() {
            "DEBUG" => Level::Debug,
            "INFO" => Level::Info,
            "WARNING" | "WARN" => Level::Warning,
            "ERROR" | "FATAL" | "CRITICAL" => Level::Error,
            _ => return None,
        };
        Some(level)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Debug => "DEBUG",
            Level::Info => "INFO",
            Level::Warning => "WARNING",
            Level::Error => "ERROR",
            Level::Unknown => "UNKNOWN",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawLogRecord {
    pub node_id: String,
    pub timestamp: Timestamp,
    pub level: Level,
    pub message: String,
    pub source_line: u32,
}

/// Header fields extracted from one line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeaderFields {
    pub timestamp: Timestamp,
    pub level: Level,
    pub message: String,
}

/// Line header grammar.
#[derive(Clone, Debug, Default)]
pub enum HeaderFormat {
    /// `2024-03-01T10:00:00.123 ERROR message`
    #[default]
    IsoFirst,
    /// `[2024-03-01 10:00:00,123] [ERROR] message`
    Bracketed,
    /// `[ERROR] HCCL(1234,python):2024-03-01-10:00:00.123.456 [file.cc:42] message`
    FrameworkPrefixed,
    /// User regex with named captures `ts`, `level` and `msg`.
    Custom(Regex),
}

impl FromStr for HeaderFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iso" | "iso-first" => Ok(HeaderFormat::IsoFirst),
            "bracketed" | "bracketed-level" => Ok(HeaderFormat::Bracketed),
            "framework" | "framework-prefixed" => Ok(HeaderFormat::FrameworkPrefixed),
            pattern => {
                let re = Regex::new(pattern).map_err(|e| IngestError::BadHeaderRegex(e.to_string()))?;
                let names: Vec<_> = re.capture_names().flatten().collect();
                for required in ["ts", "level", "msg"] {
                    if !names.contains(&required) {
                        return Err(IngestError::BadHeaderRegex(format!(
                            "missing named capture `{required}`"
                        )));
                    }
                }
                Ok(HeaderFormat::Custom(re))
            }
        }
    }
}

fn split_first_token(s: &str) -> (&str, &str) {
    let s = s.trim_start();
    match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], s[i..].trim_start()),
        None => (s, ""),
    }
}

/// Resolves a level candidate; an unrecognized token stays in the message.
fn level_and_message(level_token: &str, rest: &str, whole: &str) -> (Level, String) {
    match Level::from_token(level_token) {
        Some(level) => (level, rest.to_string()),
        None => (Level::Unknown, whole.to_string()),
    }
}

pub fn parse_record_header(line: &str, format: &HeaderFormat) -> Result<HeaderFields, IngestError> {
    let line = line.trim_end_matches(['\r', '\n']);
    match format {
        HeaderFormat::IsoFirst => {
            let (first, rest) = split_first_token(line);
            // date and time separated by a space
            let (second, tail) = split_first_token(rest);
            let spaced = if first.len() == 10 { Timestamp::parse(&format!("{first} {second}")) } else { None };
            let (timestamp, rest) = match spaced {
                Some(ts) => (ts, tail),
                None => (Timestamp::parse(first).ok_or(IngestError::HeaderMismatch)?, rest),
            };
            let (level_token, msg) = split_first_token(rest);
            let (level, message) = level_and_message(level_token, msg, rest);
            Ok(HeaderFields { timestamp, level, message })
        }
        HeaderFormat::Bracketed => {
            let body = line.trim_start().strip_prefix('[').ok_or(IngestError::HeaderMismatch)?;
            let close = body.find(']').ok_or(IngestError::HeaderMismatch)?;
            let timestamp = Timestamp::parse(&body[..close]).ok_or(IngestError::HeaderMismatch)?;
            let rest = body[close + 1..].trim_start();
            let (level_token, msg) = split_first_token(rest);
            let (level, message) = level_and_message(level_token, msg, rest);
            Ok(HeaderFields { timestamp, level, message })
        }
        HeaderFormat::FrameworkPrefixed => {
            let body = line.trim_start().strip_prefix('[').ok_or(IngestError::HeaderMismatch)?;
            let close = body.find(']').ok_or(IngestError::HeaderMismatch)?;
            let level = Level::from_token(&body[..close]).unwrap_or(Level::Unknown);
            let rest = body[close + 1..].trim_start();
            let colon = rest.find("):").ok_or(IngestError::HeaderMismatch)?;
            let (ts_token, msg) = split_first_token(&rest[colon + 2..]);
            let timestamp = Timestamp::parse(ts_token).ok_or(IngestError::HeaderMismatch)?;
            // optional [file:line] location
            let msg = match msg.strip_prefix('[').and_then(|m| m.find(']').map(|i| &m[i + 1..])) {
                Some(after) => after.trim_start(),
                None => msg,
            };
            Ok(HeaderFields { timestamp, level, message: msg.to_string() })
        }
        HeaderFormat::Custom(re) => {
            let caps = re.captures(line).ok_or(IngestError::HeaderMismatch)?;
            let timestamp = caps
                .name("ts")
                .and_then(|m| Timestamp::parse(m.as_str()))
                .ok_or(IngestError::HeaderMismatch)?;
            let level = caps
                .name("level")
                .and_then(|m| Level::from_token(m.as_str()))
                .unwrap_or(Level::Unknown);
            let message = caps.name("msg").map(|m| m.as_str().to_string()).unwrap_or_default();
            Ok(HeaderFields { timestamp, level, message })
        }
    }
}

/// How files under a job directory map to nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutSpec {
    /// `<node_id>.log` files directly under the root.
    #[default]
    FilePerNode,
    /// One sub-directory per node holding one or more `*.log` files.
    DirPerNode,
}

impl FromStr for LayoutSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "file-per-node" => Ok(LayoutSpec::FilePerNode),
            "dir-per-node" => Ok(LayoutSpec::DirPerNode),
            other => Err(format!("unknown layout `{other}`")),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct IngestOptions {
    pub layout: LayoutSpec,
    pub header: HeaderFormat,
    /// Fold header-less lines into the preceding record's message instead of
    /// keeping them as separate `UNKNOWN` records.
    pub join_continuations: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobBundle {
    pub job_id: String,
    pub nodes: BTreeMap<String, Vec<RawLogRecord>>,
    pub metadata: BTreeMap<String, String>,
}

impl JobBundle {
    pub fn record_count(&self) -> usize {
        self.nodes.values().map(Vec::len).sum()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

fn log_files_in(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "log") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Parses the lines of one node's files into records in file order.
pub fn parse_lines<'a>(
    node_id: &str,
    lines: impl Iterator<Item = &'a str>,
    options: &IngestOptions,
) -> Vec<RawLogRecord> {
    let mut records: Vec<RawLogRecord> = Vec::new();
    for (line_no, line) in (1u32..).zip(lines) {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match parse_record_header(line, &options.header) {
            Ok(fields) => records.push(RawLogRecord {
                node_id: node_id.to_string(),
                timestamp: fields.timestamp,
                level: fields.level,
                message: fields.message,
                source_line: line_no,
            }),
            Err(_) => {
                if options.join_continuations {
                    if let Some(prev) = records.last_mut() {
                        prev.message.push('\n');
                        prev.message.push_str(line);
                        continue;
                    }
                }
                let timestamp = records.last().map_or(Timestamp::EPOCH, |r| r.timestamp);
                records.push(RawLogRecord {
                    node_id: node_id.to_string(),
                    timestamp,
                    level: Level::Unknown,
                    message: line.to_string(),
                    source_line: line_no,
                });
            }
        }
    }
    // stable: equal timestamps keep file order
    records.sort_by_key(|r| (r.timestamp, r.source_line));
    records
}

fn read_node(node_id: &str, files: &[PathBuf], options: &IngestOptions) -> Result<Vec<RawLogRecord>, IngestError> {
    let mut text = String::new();
    for path in files {
        let bytes = fs::read(path).map_err(io_err(path))?;
        text.push_str(&String::from_utf8_lossy(&bytes));
        if !text.is_empty() && !text.ends_with('\n') {
            text.push('\n');
        }
    }
    Ok(parse_lines(node_id, text.lines(), options))
}

pub fn read_job_bundle(root: &Path, options: &IngestOptions) -> Result<JobBundle, IngestError> {
    let meta = fs::metadata(root).map_err(io_err(root))?;
    if !meta.is_dir() {
        return Err(IngestError::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotADirectory, "not a directory"),
        });
    }
    let mut groups: Vec<(String, Vec<PathBuf>)> = Vec::new();
    match options.layout {
        LayoutSpec::FilePerNode => {
            for path in log_files_in(root)? {
                let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                groups.push((stem, vec![path]));
            }
        }
        LayoutSpec::DirPerNode => {
            let mut dirs = Vec::new();
            for entry in fs::read_dir(root).map_err(io_err(root))? {
                let path = entry.map_err(io_err(root))?.path();
                if path.is_dir() {
                    dirs.push(path);
                }
            }
            dirs.sort();
            for dir in dirs {
                let files = log_files_in(&dir)?;
                if !files.is_empty() {
                    let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
                    groups.push((name, files));
                }
            }
        }
    }
    if groups.is_empty() {
        return Err(IngestError::EmptyBundle(root.to_path_buf()));
    }
    let parsed: Vec<(String, Vec<RawLogRecord>)> = groups
        .par_iter()
        .map(|(node, files)| read_node(node, files, options).map(|r| (node.clone(), r)))
        .collect::<Result<_, _>>()?;

    let job_id = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| root.display().to_string());
    let mut metadata = BTreeMap::new();
    metadata.insert("node_count".to_string(), parsed.len().to_string());
    Ok(JobBundle { job_id, nodes: parsed.into_iter().collect(), metadata })
}
