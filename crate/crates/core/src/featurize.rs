//! Hourly 8-dim feature vectors, 48-hour windows, and chronological splits.
//!
//! Feature order: five category fractions (canonical order), flow-count
//! percentile, then sin and cos of the hour of day.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{HourlyTraffic, MODEL_CATEGORIES};
use crate::time::LocalHour;

pub const FEATURE_DIM: usize = 8;
pub const WINDOW_LEN: usize = 48;
pub const MIN_WINDOWS: usize = 20;
pub const TRAIN_FRACTION: f64 = 0.7;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "frac_communication",
    "frac_social_media",
    "frac_streaming",
    "frac_productivity",
    "frac_system",
    "activity_pct",
    "circ_sin",
    "circ_cos",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyFeature {
    pub user_id: String,
    pub local_hour: LocalHour,
    pub frac: [f64; 5],
    pub activity_pct: f64,
    pub circ_sin: f64,
    pub circ_cos: f64,
}

impl HourlyFeature {
    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        let f = &self.frac;
        [
            f[0],
            f[1],
            f[2],
            f[3],
            f[4],
            self.activity_pct,
            self.circ_sin,
            self.circ_cos,
        ]
    }
}

/// All feature rows of one user, sorted by hour.
#[derive(Debug, Clone, PartialEq)]
pub struct UserFeatures {
    pub user_id: String,
    pub hours: Vec<HourlyFeature>,
}

/// A 48-hour window, stored as a position into its user's feature rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    /// Index into `UserFeatures::hours` of the first hour.
    pub first: usize,
    pub block_id: usize,
    pub start_offset: usize,
    pub start_hour: LocalHour,
}

impl Window {
    pub fn hours<'a>(&self, user: &'a UserFeatures) -> &'a [HourlyFeature] {
        &user.hours[self.first..self.first + WINDOW_LEN]
    }

    pub fn contains(&self, index: usize) -> bool {
        (self.first..self.first + WINDOW_LEN).contains(&index)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserSplit {
    pub train: Vec<Window>,
    pub test: Vec<Window>,
}

pub fn category_fractions(h: &HourlyTraffic) -> [f64; 5] {
    let mut out = [0.0; 5];
    if h.total_bytes == 0 {
        return out;
    }
    let total = h.total_bytes as f64;
    for (slot, cat) in out.iter_mut().zip(MODEL_CATEGORIES) {
        *slot = h.bytes_for(cat) as f64 / total;
    }
    out
}

/// Tie-averaged percentile ranks scaled to [0, 1]; a single value maps to 0.5.
pub fn activity_percentile(counts: &[u64]) -> Vec<f64> {
    let n = counts.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![0.5];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| counts[i]);
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && counts[order[j + 1]] == counts[order[i]] {
            j += 1;
        }
        // ordinal ranks i+1 ..= j+1
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = (mean_rank - 1.0) / (n - 1) as f64;
        }
        i = j + 1;
    }
    ranks
}

pub fn circadian_encoding(hour: u8) -> Result<(f64, f64)> {
    if hour > 23 {
        return Err(Error::InvalidInput(format!("hour of day {hour} outside 0..=23")));
    }
    let angle = 2.0 * PI * f64::from(hour) / 24.0;
    Ok((angle.sin(), angle.cos()))
}

/// Feature rows for every user. Input need not be sorted.
pub fn build_features(hourly: &[HourlyTraffic]) -> Vec<UserFeatures> {
    let mut by_user: BTreeMap<&str, Vec<&HourlyTraffic>> = BTreeMap::new();
    for h in hourly {
        by_user.entry(h.user_id.as_str()).or_default().push(h);
    }
    by_user
        .into_iter()
        .map(|(user, mut rows)| {
            rows.sort_by_key(|h| h.local_hour);
            let counts: Vec<u64> = rows.iter().map(|h| h.flow_count).collect();
            let pct = activity_percentile(&counts);
            let hours = rows
                .iter()
                .zip(pct)
                .map(|(h, activity_pct)| {
                    let (circ_sin, circ_cos) =
                        circadian_encoding(h.local_hour.hour_of_day()).expect("hour of day < 24");
                    HourlyFeature {
                        user_id: user.to_string(),
                        local_hour: h.local_hour,
                        frac: category_fractions(h),
                        activity_pct,
                        circ_sin,
                        circ_cos,
                    }
                })
                .collect();
            UserFeatures {
                user_id: user.to_string(),
                hours,
            }
        })
        .collect()
}

/// Contiguous runs of consecutive hours as `(start index, length)`.
pub fn contiguous_blocks(hours: &[HourlyFeature]) -> Vec<(usize, usize)> {
    let mut blocks = Vec::new();
    let mut start = 0;
    for i in 1..=hours.len() {
        if i == hours.len() || hours[i].local_hour.0 != hours[i - 1].local_hour.0 + 1 {
            if i > start {
                blocks.push((start, i - start));
            }
            start = i;
        }
    }
    blocks
}

/// Sliding stride-1 windows; a block of length L yields max(0, L - 48).
pub fn build_windows(user: &UserFeatures) -> Vec<Window> {
    let mut out = Vec::new();
    for (block_id, (start, len)) in contiguous_blocks(&user.hours).into_iter().enumerate() {
        for offset in 0..len.saturating_sub(WINDOW_LEN) {
            out.push(Window {
                first: start + offset,
                block_id,
                start_offset: offset,
                start_hour: user.hours[start + offset].local_hour,
            });
        }
    }
    out
}

pub fn is_eligible(windows: &[Window]) -> bool {
    windows.len() >= MIN_WINDOWS
}

/// Keep users with at least [`MIN_WINDOWS`] windows.
pub fn eligibility_filter<T>(users: Vec<(UserFeatures, Vec<Window>, T)>) -> Vec<(UserFeatures, Vec<Window>, T)> {
    users.into_iter().filter(|(_, w, _)| is_eligible(w)).collect()
}

/// First ceil(frac * n) windows by start time train, the rest test.
pub fn chronological_split(windows: &[Window], train_frac: f64) -> UserSplit {
    let mut sorted = windows.to_vec();
    sorted.sort_by_key(|w| w.start_hour);
    let n = sorted.len();
    // guard against 0.7 * 10 = 7.000000000000001
    let n_train = ((train_frac * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    let test = sorted.split_off(n_train);
    UserSplit { train: sorted, test }
}

pub fn write_features_csv<W: Write>(out: W, users: &[UserFeatures]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["user_id", "local_hour", "local_time"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header)?;
    for u in users {
        for h in &u.hours {
            let mut row = vec![u.user_id.clone(), h.local_hour.0.to_string(), h.local_hour.format()];
            row.extend(h.to_array().iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_features_csv<R: Read>(input: R) -> Result<Vec<UserFeatures>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut users: Vec<UserFeatures> = Vec::new();
    for row in reader.records() {
        let row = row?;
        let bad = || Error::InvalidInput("feature file: malformed row".into());
        let hour: i64 = row.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let mut v = [0.0; FEATURE_DIM];
        for (j, slot) in v.iter_mut().enumerate() {
            *slot = row.get(3 + j).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        }
        let user_id = row[0].to_string();
        let feat = HourlyFeature {
            user_id: user_id.clone(),
            local_hour: LocalHour(hour),
            frac: [v[0], v[1], v[2], v[3], v[4]],
            activity_pct: v[5],
            circ_sin: v[6],
            circ_cos: v[7],
        };
        match users.last_mut() {
            Some(u) if u.user_id == user_id => u.hours.push(feat),
            _ => users.push(UserFeatures {
                user_id,
                hours: vec![feat],
            }),
        }
    }
    for u in &mut users {
        u.hours.sort_by_key(|h| h.local_hour);
    }
    users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    Ok(users)
}

/// Window index rows: `user_id,block_id,start_offset,start_hour,split`.
pub fn write_windows_csv<W: Write>(out: W, splits: &[(String, UserSplit)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user_id", "block_id", "start_offset", "start_hour", "split"])?;
    for (user, split) in splits {
        for (name, set) in [("train", &split.train), ("test", &split.test)] {
            for win in set {
                w.write_record([
                    user.as_str(),
                    &win.block_id.to_string(),
                    &win.start_offset.to_string(),
                    &win.start_hour.0.to_string(),
                    name,
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traffic(cats: &[(&str, u64)], unmapped: u64) -> HourlyTraffic {
        let category_bytes: BTreeMap<String, u64> = cats.iter().map(|(c, b)| (c.to_string(), *b)).collect();
        HourlyTraffic {
            user_id: "u".into(),
            local_hour: LocalHour(0),
            total_bytes: category_bytes.values().sum::<u64>() + unmapped,
            category_bytes,
            unmapped_bytes: unmapped,
            flow_count: 1,
            app_bytes: BTreeMap::new(),
        }
    }

    fn user_with_hours(hours: impl IntoIterator<Item = i64>) -> UserFeatures {
        let hourly: Vec<_> = hours
            .into_iter()
            .map(|h| {
                let mut t = traffic(&[], 1);
                t.local_hour = LocalHour(h);
                t
            })
            .collect();
        build_features(&hourly).pop().unwrap_or(UserFeatures {
            user_id: "u".into(),
            hours: vec![],
        })
    }

    #[test]
    fn fractions_zero_total() {
        assert_eq!(category_fractions(&traffic(&[], 0)), [0.0; 5]);
    }

    #[test]
    fn fractions_single_category() {
        assert_eq!(
            category_fractions(&traffic(&[("streaming", 1000)], 0)),
            [0.0, 0.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn fractions_with_unmapped() {
        let f = category_fractions(&traffic(&[("communication", 300)], 700));
        assert!((f[0] - 0.3).abs() < 1e-15);
        // non-model categories count in the total only
        let f = category_fractions(&traffic(&[("cdn", 500), ("system", 500)], 0));
        assert_eq!(f, [0.0, 0.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(activity_percentile(&[5]), vec![0.5]);
        assert_eq!(activity_percentile(&[1, 2, 3]), vec![0.0, 0.5, 1.0]);
        assert_eq!(activity_percentile(&[2, 2]), vec![0.5, 0.5]);
        assert_eq!(
            activity_percentile(&[3, 1, 3, 2]),
            vec![5.0 / 6.0, 0.0, 5.0 / 6.0, 1.0 / 3.0]
        );
    }

    #[test]
    fn circadian_examples() {
        let (s, c) = circadian_encoding(0).unwrap();
        assert_eq!((s, c), (0.0, 1.0));
        let (s, c) = circadian_encoding(6).unwrap();
        assert!((s - 1.0).abs() < 1e-15 && c.abs() < 1e-15);
        let (s, c) = circadian_encoding(3).unwrap();
        assert!(
            (s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9 && (c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9
        );
        assert!(circadian_encoding(24).is_err());
    }

    #[test]
    fn block_of_48_has_no_windows() {
        assert!(build_windows(&user_with_hours(0..48)).is_empty());
    }

    #[test]
    fn block_of_50_has_two_windows() {
        let w = build_windows(&user_with_hours(0..50));
        let offsets: Vec<_> = w.iter().map(|w| w.start_offset).collect();
        assert_eq!(offsets, [0, 1]);
    }

    #[test]
    fn windows_do_not_cross_gaps() {
        let u = user_with_hours((0..49).chain(100..149));
        let w = build_windows(&u);
        assert_eq!(w.len(), 2);
        assert_eq!((w[0].block_id, w[1].block_id), (0, 1));
        for win in &w {
            let hs = win.hours(&u);
            assert!(hs.windows(2).all(|p| p[1].local_hour.0 == p[0].local_hour.0 + 1));
        }
    }

    #[test]
    fn eligibility_boundary() {
        assert!(is_eligible(&build_windows(&user_with_hours(0..68))));
        assert!(!is_eligible(&build_windows(&user_with_hours(0..67))));
        assert!(!is_eligible(&build_windows(&user_with_hours(std::iter::empty()))));
        let kept = eligibility_filter(vec![
            (user_with_hours(0..68), build_windows(&user_with_hours(0..68)), ()),
            (user_with_hours(0..67), build_windows(&user_with_hours(0..67)), ()),
        ]);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn split_sizes() {
        let w = build_windows(&user_with_hours(0..58));
        let s = chronological_split(&w, TRAIN_FRACTION);
        assert_eq!((s.train.len(), s.test.len()), (7, 3));
        let s = chronological_split(&w[..1], TRAIN_FRACTION);
        assert_eq!((s.train.len(), s.test.len()), (1, 0));
    }

    #[test]
    fn features_csv_round_trip() {
        let users = vec![user_with_hours(0..3)];
        let mut buf = Vec::new();
        write_features_csv(&mut buf, &users).unwrap();
        assert_eq!(read_features_csv(buf.as_slice()).unwrap(), users);
    }

    proptest! {
        #[test]
        fn feature_invariants(counts in proptest::collection::vec(0u64..20, 1..80),
                              cats in proptest::collection::vec((0u64..500, 0u64..500, 0u64..500), 1..80)) {
            let hourly: Vec<_> = counts.iter().zip(cats.iter().cycle()).enumerate().map(|(i, (&n, &(a, b, c)))| {
                let mut t = traffic(&[("communication", a), ("system", b)], c);
                t.local_hour = LocalHour(i as i64 * 3);
                t.flow_count = n;
                t
            }).collect();
            let users = build_features(&hourly);
            for h in &users[0].hours {
                prop_assert!(h.frac.iter().all(|f| (0.0..=1.0).contains(f)));
                prop_assert!(h.frac.iter().sum::<f64>() <= 1.0 + 1e-12);
                prop_assert!((h.circ_sin.powi(2) + h.circ_cos.powi(2) - 1.0).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(&h.activity_pct));
            }
        }

        #[test]
        fn percentile_monotone(counts in proptest::collection::vec(0u64..10, 1..50)) {
            let p = activity_percentile(&counts);
            for i in 0..counts.len() {
                for j in 0..counts.len() {
                    if counts[i] > counts[j] {
                        prop_assert!(p[i] > p[j]);
                    }
                }
            }
        }

        #[test]
        fn window_count_matches_formula(gaps in proptest::collection::vec((1i64..5, 1usize..120), 1..5)) {
            let mut hours = Vec::new();
            let mut t = 0i64;
            let mut expected = 0;
            for (gap, len) in &gaps {
                t += gap;
                hours.extend(t..t + *len as i64);
                t += *len as i64;
                expected += len.saturating_sub(WINDOW_LEN);
            }
            let u = user_with_hours(hours);
            let w = build_windows(&u);
            prop_assert_eq!(w.len(), expected);
            for win in &w {
                let hs = win.hours(&u);
                prop_assert!(hs.windows(2).all(|p| p[1].local_hour.0 == p[0].local_hour.0 + 1));
            }
        }

        #[test]
        fn split_is_temporal(starts in proptest::collection::btree_set(0i64..10_000, 1..60)) {
            let windows: Vec<Window> = starts.iter().rev().enumerate().map(|(i, &s)| Window {
                first: i, block_id: 0, start_offset: i, start_hour: LocalHour(s),
            }).collect();
            let s = chronological_split(&windows, TRAIN_FRACTION);
            prop_assert_eq!(s.train.len() + s.test.len(), windows.len());
            prop_assert!(!s.train.is_empty());
            if let (Some(max_train), Some(min_test)) = (
                s.train.iter().map(|w| w.start_hour).max(),
                s.test.iter().map(|w| w.start_hour).min(),
            ) {
                prop_assert!(min_test > max_train);
            }
        }
    }
}
