use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};

use super::aggregate::HourlyTraffic;

pub const MIN_PARTICIPANT_COVERAGE: f64 = 0.40;
pub const MIN_TRAFFIC_SHARE: f64 = 0.01;
/// A participant covers a category when it has traffic in at least this
/// fraction of the participant's observed weeks.
pub const MIN_WEEK_FRACTION: f64 = 0.50;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategorySelection {
    pub category: String,
    pub participant_coverage: f64,
    pub traffic_share: f64,
    pub pass: bool,
}

/// Coverage and traffic-share screen for candidate categories.
pub fn category_selection_report(hourly: &[HourlyTraffic], candidates: &[String]) -> Result<Vec<CategorySelection>> {
    let total: u64 = hourly.iter().map(|h| h.total_bytes).sum();
    if total == 0 {
        return Err(Error::InsufficientData("zero total traffic".into()));
    }

    // user -> week -> category -> bytes
    let mut weekly: BTreeMap<&str, BTreeMap<i64, BTreeMap<&str, u64>>> = BTreeMap::new();
    for h in hourly {
        let week = weekly
            .entry(h.user_id.as_str())
            .or_default()
            .entry(h.local_hour.week_index())
            .or_default();
        for (cat, b) in &h.category_bytes {
            *week.entry(cat.as_str()).or_default() += b;
        }
    }
    let participants = weekly.len();

    let mut out = Vec::with_capacity(candidates.len());
    for cat in candidates {
        let cat_bytes: u64 = hourly.iter().map(|h| h.bytes_for(cat)).sum();
        let covering: BTreeSet<&str> = weekly
            .iter()
            .filter(|(_, weeks)| {
                let active = weeks
                    .values()
                    .filter(|w| w.get(cat.as_str()).copied().unwrap_or(0) > 0)
                    .count();
                active as f64 >= MIN_WEEK_FRACTION * weeks.len() as f64
            })
            .map(|(u, _)| *u)
            .collect();
        let participant_coverage = covering.len() as f64 / participants as f64;
        let traffic_share = cat_bytes as f64 / total as f64;
        out.push(CategorySelection {
            category: cat.clone(),
            participant_coverage,
            traffic_share,
            pass: participant_coverage >= MIN_PARTICIPANT_COVERAGE && traffic_share >= MIN_TRAFFIC_SHARE,
        });
    }
    Ok(out)
}
