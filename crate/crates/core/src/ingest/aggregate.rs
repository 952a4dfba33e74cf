use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::LocalHour;

use super::dictionary::Dictionary;
use super::flows::FlowRecord;

pub const BIN_WIDTH_MS: i64 = 10_000;

/// Per-(user, 10 s bin, hostname) totals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bin10s {
    pub user_id: String,
    /// floor(start_ts_ms / 10000)
    pub bin: i64,
    pub hostname: String,
    pub up_bytes: u64,
    pub down_bytes: u64,
    pub up_pkts: u64,
    pub down_pkts: u64,
    pub flow_count: u64,
}

/// Traffic summary for one user and one local hour with at least one flow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HourlyTraffic {
    pub user_id: String,
    pub local_hour: LocalHour,
    /// Bidirectional bytes per mapped category (absent = 0).
    pub category_bytes: BTreeMap<String, u64>,
    pub unmapped_bytes: u64,
    pub total_bytes: u64,
    pub flow_count: u64,
    /// Bidirectional bytes per mapped application.
    pub app_bytes: BTreeMap<String, u64>,
}

impl HourlyTraffic {
    fn empty(user_id: &str, local_hour: LocalHour) -> Self {
        HourlyTraffic {
            user_id: user_id.to_string(),
            local_hour,
            category_bytes: BTreeMap::new(),
            unmapped_bytes: 0,
            total_bytes: 0,
            flow_count: 0,
            app_bytes: BTreeMap::new(),
        }
    }

    pub fn bytes_for(&self, category: &str) -> u64 {
        self.category_bytes.get(category).copied().unwrap_or(0)
    }

    fn add(&mut self, dict: &Dictionary, hostname: &str, bytes: u64, flows: u64) {
        let mapping = dict.map_hostname(hostname);
        match (mapping.app, mapping.category) {
            (Some(app), Some(cat)) => {
                *self.category_bytes.entry(cat.to_string()).or_default() += bytes;
                *self.app_bytes.entry(app.to_string()).or_default() += bytes;
            }
            _ => self.unmapped_bytes += bytes,
        }
        self.total_bytes += bytes;
        self.flow_count += flows;
    }
}

pub fn bin_10s(flows: &[FlowRecord]) -> Vec<Bin10s> {
    let mut bins: BTreeMap<(&str, i64, &str), Bin10s> = BTreeMap::new();
    for f in flows {
        let bin = f.start_ts_ms.div_euclid(BIN_WIDTH_MS);
        let entry = bins
            .entry((f.user_id.as_str(), bin, f.hostname.as_str()))
            .or_insert_with(|| Bin10s {
                user_id: f.user_id.clone(),
                bin,
                hostname: f.hostname.clone(),
                up_bytes: 0,
                down_bytes: 0,
                up_pkts: 0,
                down_pkts: 0,
                flow_count: 0,
            });
        entry.up_bytes += f.up_bytes;
        entry.down_bytes += f.down_bytes;
        entry.up_pkts += f.up_pkts;
        entry.down_pkts += f.down_pkts;
        entry.flow_count += 1;
    }
    bins.into_values().collect()
}

/// Aggregate 10 s bins into local-time hours. Hours without flows are not
/// materialized. Output is sorted by (user, hour).
pub fn aggregate_hourly(bins: &[Bin10s], dict: &Dictionary, tz_offset_minutes: i32) -> Vec<HourlyTraffic> {
    let mut hours: BTreeMap<(&str, LocalHour), HourlyTraffic> = BTreeMap::new();
    for b in bins {
        let hour = LocalHour::from_utc_ms(b.bin * BIN_WIDTH_MS, tz_offset_minutes);
        hours
            .entry((b.user_id.as_str(), hour))
            .or_insert_with(|| HourlyTraffic::empty(&b.user_id, hour))
            .add(dict, &b.hostname, b.up_bytes + b.down_bytes, b.flow_count);
    }
    hours.into_values().collect()
}

/// Same result as `aggregate_hourly(&bin_10s(flows), ..)`, without the
/// intermediate bins. A flow belongs to the hour of its start timestamp.
pub fn aggregate_hourly_from_flows(
    flows: &[FlowRecord],
    dict: &Dictionary,
    tz_offset_minutes: i32,
) -> Vec<HourlyTraffic> {
    let mut hours: BTreeMap<(&str, LocalHour), HourlyTraffic> = BTreeMap::new();
    for f in flows {
        let hour = LocalHour::from_utc_ms(f.start_ts_ms, tz_offset_minutes);
        hours
            .entry((f.user_id.as_str(), hour))
            .or_insert_with(|| HourlyTraffic::empty(&f.user_id, hour))
            .add(dict, &f.hostname, f.bytes(), 1);
    }
    hours.into_values().collect()
}

const FIXED_COLUMNS: [&str; 6] = [
    "user_id",
    "local_hour",
    "local_time",
    "flow_count",
    "total_bytes",
    "unmapped_bytes",
];

/// One row per (user, local hour); one `bytes_<category>` column per
/// dictionary category in canonical order.
pub fn write_hourly_csv<W: Write>(out: W, hourly: &[HourlyTraffic], categories: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(categories.iter().map(|c| format!("bytes_{c}")))
        .collect();
    w.write_record(&header)?;
    for h in hourly {
        let mut row = vec![
            h.user_id.clone(),
            h.local_hour.0.to_string(),
            h.local_hour.format(),
            h.flow_count.to_string(),
            h.total_bytes.to_string(),
            h.unmapped_bytes.to_string(),
        ];
        row.extend(categories.iter().map(|c| h.bytes_for(c).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_hourly_csv<R: Read>(input: R) -> Result<(Vec<HourlyTraffic>, Vec<String>)> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers()?.clone();
    for (i, name) in FIXED_COLUMNS.iter().enumerate() {
        if headers.get(i) != Some(name) {
            return Err(Error::Config(format!("hourly file: expected column `{name}` at {i}")));
        }
    }
    let categories: Vec<String> = headers
        .iter()
        .skip(FIXED_COLUMNS.len())
        .map(|h| h.trim_start_matches("bytes_").to_string())
        .collect();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let num = |i: usize| -> Result<i64> {
            row.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::InvalidInput(format!("hourly file: bad value in column {i}")))
        };
        let mut h = HourlyTraffic::empty(&row[0], LocalHour(num(1)?));
        h.flow_count = num(3)? as u64;
        h.total_bytes = num(4)? as u64;
        h.unmapped_bytes = num(5)? as u64;
        for (j, cat) in categories.iter().enumerate() {
            let b = num(FIXED_COLUMNS.len() + j)? as u64;
            if b > 0 {
                h.category_bytes.insert(cat.clone(), b);
            }
        }
        out.push(h);
    }
    Ok((out, categories))
}

/// Long-format per-app bytes: `user_id,local_hour,app,bytes`.
pub fn write_hourly_apps_csv<W: Write>(out: W, hourly: &[HourlyTraffic]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user_id", "local_hour", "app", "bytes"])?;
    for h in hourly {
        for (app, bytes) in &h.app_bytes {
            w.write_record([&h.user_id, &h.local_hour.0.to_string(), app, &bytes.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Fill `app_bytes` of already-loaded hourly records.
pub fn read_hourly_apps_csv<R: Read>(input: R, hourly: &mut [HourlyTraffic]) -> Result<()> {
    let index: BTreeMap<(String, LocalHour), usize> = hourly
        .iter()
        .enumerate()
        .map(|(i, h)| ((h.user_id.clone(), h.local_hour), i))
        .collect();
    let mut reader = csv::Reader::from_reader(input);
    for row in reader.records() {
        let row = row?;
        let hour: i64 = row[1]
            .parse()
            .map_err(|_| Error::InvalidInput("hourly apps file: bad hour".into()))?;
        let bytes: u64 = row[3]
            .parse()
            .map_err(|_| Error::InvalidInput("hourly apps file: bad bytes".into()))?;
        if let Some(&i) = index.get(&(row[0].to_string(), LocalHour(hour))) {
            hourly[i].app_bytes.insert(row[2].to_string(), bytes);
        }
    }
    Ok(())
}
