use std::collections::BTreeMap;

use crate::drain::{parse_bundle, ParsedBundle, ParserConfig};
use crate::model::{JobBundle, Level, RawLogRecord, Timestamp};

/// Parses a small in-memory job; record timestamps follow list order.
pub(crate) fn job(id: &str, nodes: &[(&str, &[&str])]) -> ParsedBundle {
    let mut map = BTreeMap::new();
    for (node, msgs) in nodes {
        let recs = msgs
            .iter()
            .enumerate()
            .map(|(i, m)| RawLogRecord {
                node_id: node.to_string(),
                timestamp: Timestamp(i as i64),
                level: Level::Info,
                message: m.to_string(),
                source_line: i as u32 + 1,
            })
            .collect();
        map.insert(node.to_string(), recs);
    }
    let bundle = JobBundle { job_id: id.into(), nodes: map, metadata: BTreeMap::new() };
    parse_bundle(&bundle, &ParserConfig::default())
}

