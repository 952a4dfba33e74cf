use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FLOW_COLUMNS: [&str; 7] = [
    "user_id",
    "start_ts_ms",
    "hostname",
    "up_bytes",
    "down_bytes",
    "up_pkts",
    "down_pkts",
];

/// One observed network flow attributed to a user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub user_id: String,
    /// Unix epoch milliseconds, UTC.
    pub start_ts_ms: i64,
    /// Lowercase DNS name, trailing dot stripped. Empty when unknown.
    pub hostname: String,
    pub up_bytes: u64,
    pub down_bytes: u64,
    pub up_pkts: u64,
    pub down_pkts: u64,
}

impl FlowRecord {
    pub fn bytes(&self) -> u64 {
        self.up_bytes + self.down_bytes
    }
}

#[derive(Debug, Default)]
pub struct ParsedFlows {
    pub records: Vec<FlowRecord>,
    pub skipped: usize,
}

pub fn normalize_hostname(raw: &str) -> String {
    raw.trim().trim_end_matches('.').to_ascii_lowercase()
}

/// Parse a flow CSV. Missing required columns are fatal; malformed lines
/// are skipped and counted.
pub fn parse_flow_records<R: Read>(input: R) -> Result<ParsedFlows> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    let mut idx = [0usize; 7];
    let mut missing = Vec::new();
    for (slot, name) in idx.iter_mut().zip(FLOW_COLUMNS) {
        match headers.iter().position(|h| h == name) {
            Some(i) => *slot = i,
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "flow file missing required column(s): {}",
            missing.join(", ")
        )));
    }

    let mut out = ParsedFlows::default();
    for row in reader.records() {
        let Ok(row) = row else {
            out.skipped += 1;
            continue;
        };
        match parse_row(&row, &idx) {
            Some(rec) => out.records.push(rec),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

fn parse_row(row: &csv::StringRecord, idx: &[usize; 7]) -> Option<FlowRecord> {
    let field = |i: usize| row.get(idx[i]);
    let user_id = field(0)?.to_string();
    if user_id.is_empty() {
        return None;
    }
    let start_ts_ms: i64 = field(1)?.parse().ok()?;
    if start_ts_ms <= 0 {
        return None;
    }
    let count = |i: usize| field(i)?.parse::<u64>().ok();
    Some(FlowRecord {
        user_id,
        start_ts_ms,
        hostname: normalize_hostname(field(2)?),
        up_bytes: count(3)?,
        down_bytes: count(4)?,
        up_pkts: count(5)?,
        down_pkts: count(6)?,
    })
}

pub fn write_flow_records<W: Write>(out: W, flows: &[FlowRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FLOW_COLUMNS)?;
    for f in flows {
        w.write_record([
            f.user_id.clone(),
            f.start_ts_ms.to_string(),
            f.hostname.clone(),
            f.up_bytes.to_string(),
            f.down_bytes.to_string(),
            f.up_pkts.to_string(),
            f.down_pkts.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
