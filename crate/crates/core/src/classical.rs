//! Rest-activity and timing metrics over an hourly activity series.
//!
//! The series holds valid hours only, in chronological order; coverage
//! gaps are dropped rather than imputed. Hour-of-day and weekday labels
//! come from the real timestamps. Every metric is `None` when its
//! denominator degenerates.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HourlySeries {
    pub values: Vec<f64>,
    /// 0..=23
    pub hour_of_day: Vec<u8>,
    /// 0 = Monday .. 6 = Sunday
    pub weekday: Vec<u8>,
}

impl HourlySeries {
    pub fn new(values: Vec<f64>, hour_of_day: Vec<u8>, weekday: Vec<u8>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty hourly series".into()));
        }
        if hour_of_day.len() != values.len() || weekday.len() != values.len() {
            return Err(Error::InvalidInput("series label length mismatch".into()));
        }
        if hour_of_day.iter().any(|&h| h > 23) || weekday.iter().any(|&d| d > 6) {
            return Err(Error::InvalidInput("series label out of range".into()));
        }
        Ok(HourlySeries {
            values,
            hour_of_day,
            weekday,
        })
    }

    /// Consecutive hours starting at the given hour of day and weekday.
    pub fn consecutive(values: Vec<f64>, first_hour: u8, first_weekday: u8) -> Result<Self> {
        let n = values.len();
        let hour_of_day = (0..n).map(|i| ((first_hour as usize + i) % 24) as u8).collect();
        let weekday = (0..n)
            .map(|i| ((first_weekday as usize + (first_hour as usize + i) / 24) % 7) as u8)
            .collect();
        Self::new(values, hour_of_day, weekday)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    fn is_constant(&self) -> bool {
        self.values.iter().all(|&v| v == self.values[0])
    }

    /// Cross-day mean per hour of day; `None` for hours never observed.
    pub fn hour_profile(&self) -> [Option<f64>; 24] {
        let mut sum = [0.0; 24];
        let mut n = [0usize; 24];
        for (&v, &h) in self.values.iter().zip(&self.hour_of_day) {
            sum[h as usize] += v;
            n[h as usize] += 1;
        }
        std::array::from_fn(|h| (n[h] > 0).then(|| sum[h] / n[h] as f64))
    }
}

/// Bounded by 1 when every hour of day is observed equally often (whole
/// days); series with partial days can exceed 1.
pub fn interdaily_stability(s: &HourlySeries) -> Option<f64> {
    let h = s.len();
    if h < 24 || s.is_constant() {
        return None;
    }
    let mean = s.mean();
    let denom: f64 = s.values.iter().map(|v| (v - mean).powi(2)).sum();
    let numer: f64 = s.hour_profile().iter().flatten().map(|p| (p - mean).powi(2)).sum();
    Some(h as f64 * numer / (24.0 * denom))
}

pub fn intradaily_variability(s: &HourlySeries) -> Option<f64> {
    let h = s.len();
    if h < 2 || s.is_constant() {
        return None;
    }
    let mean = s.mean();
    let denom: f64 = s.values.iter().map(|v| (v - mean).powi(2)).sum();
    let numer: f64 = s.values.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    Some(h as f64 * numer / ((h - 1) as f64 * denom))
}

fn rolling_mean_extreme(values: &[f64], width: usize, max: bool) -> f64 {
    let mut best = if max { f64::NEG_INFINITY } else { f64::INFINITY };
    for w in values.windows(width) {
        let m = w.iter().sum::<f64>() / width as f64;
        best = if max { best.max(m) } else { best.min(m) };
    }
    best
}

/// Least-active 5-hour mean over rolling windows of the whole series.
pub fn l5(s: &HourlySeries) -> Option<f64> {
    (s.len() >= 5).then(|| rolling_mean_extreme(&s.values, 5, false))
}

/// Most-active 10-hour mean over rolling windows of the whole series.
pub fn m10(s: &HourlySeries) -> Option<f64> {
    (s.len() >= 10).then(|| rolling_mean_extreme(&s.values, 10, true))
}

pub fn relative_amplitude(s: &HourlySeries) -> Option<f64> {
    let (l5, m10) = (l5(s)?, m10(s)?);
    if s.is_constant() && s.values[0] > 0.0 {
        // M10 == L5 exactly; rolling sums of 5 and 10 terms round differently
        return Some(0.0);
    }
    let denom = m10 + l5;
    if denom == 0.0 {
        return None;
    }
    Some((m10 - l5) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Night,
    Morning,
    Afternoon,
    Evening,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::Night, Band::Morning, Band::Afternoon, Band::Evening];

    pub fn of_hour(hour: u8) -> Band {
        match hour {
            0..=5 => Band::Night,
            6..=11 => Band::Morning,
            12..=17 => Band::Afternoon,
            _ => Band::Evening,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BandMeans {
    pub night: Option<f64>,
    pub morning: Option<f64>,
    pub afternoon: Option<f64>,
    pub evening: Option<f64>,
    pub night_morning_ratio: Option<f64>,
}

pub fn band_means(s: &HourlySeries) -> BandMeans {
    let mut sum = [0.0; 4];
    let mut n = [0usize; 4];
    for (&v, &h) in s.values.iter().zip(&s.hour_of_day) {
        let b = Band::of_hour(h) as usize;
        sum[b] += v;
        n[b] += 1;
    }
    let mean = |b: Band| (n[b as usize] > 0).then(|| sum[b as usize] / n[b as usize] as f64);
    let (night, morning) = (mean(Band::Night), mean(Band::Morning));
    let night_morning_ratio = match (night, morning) {
        (Some(a), Some(b)) if b != 0.0 => Some(a / b),
        _ => None,
    };
    BandMeans {
        night,
        morning,
        afternoon: mean(Band::Afternoon),
        evening: mean(Band::Evening),
        night_morning_ratio,
    }
}

pub fn activity_centroid(s: &HourlySeries) -> Option<f64> {
    let profile = s.hour_profile();
    let (mut num, mut den) = (0.0, 0.0);
    for (h, p) in profile.iter().enumerate() {
        if let Some(p) = p {
            num += h as f64 * p;
            den += p;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Linear-interpolation quantile between order statistics.
pub fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn span_between(onset: u8, offset: u8) -> u8 {
    ((i16::from(offset) - i16::from(onset)).rem_euclid(24)) as u8
}

/// (offset - onset) mod 24 over profile hours at or above the 25th
/// percentile of the profile's nonzero values.
pub fn active_span(s: &HourlySeries) -> Option<f64> {
    let profile = s.hour_profile();
    let mut nonzero: Vec<f64> = profile.iter().flatten().copied().filter(|&p| p != 0.0).collect();
    if nonzero.is_empty() {
        return None;
    }
    nonzero.sort_by(f64::total_cmp);
    let threshold = quantile_linear(&nonzero, 0.25);
    let above = |h: &usize| profile[*h].is_some_and(|p| p != 0.0 && p >= threshold);
    let onset = (0..24).find(above)?;
    let offset = (0..24).rev().find(above)?;
    Some(f64::from(span_between(onset as u8, offset as u8)))
}

pub fn weekday_weekend_diff(s: &HourlySeries) -> Option<f64> {
    let (mut wd, mut nwd, mut we, mut nwe) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &d) in s.values.iter().zip(&s.weekday) {
        if d < 5 {
            wd += v;
            nwd += 1;
        } else {
            we += v;
            nwe += 1;
        }
    }
    (nwd > 0 && nwe > 0).then(|| wd / nwd as f64 - we / nwe as f64)
}

pub const METRIC_NAMES: [&str; 11] = [
    "is",
    "iv",
    "ra",
    "night_mean",
    "morning_mean",
    "afternoon_mean",
    "evening_mean",
    "night_morning_ratio",
    "activity_centroid",
    "active_span",
    "weekday_weekend_diff",
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CircadianMetrics {
    pub is: Option<f64>,
    pub iv: Option<f64>,
    pub ra: Option<f64>,
    pub bands: BandMeans,
    pub activity_centroid: Option<f64>,
    pub active_span_hours: Option<f64>,
    pub weekday_weekend_diff: Option<f64>,
}

impl CircadianMetrics {
    pub fn compute(s: &HourlySeries) -> Self {
        CircadianMetrics {
            is: interdaily_stability(s),
            iv: intradaily_variability(s),
            ra: relative_amplitude(s),
            bands: band_means(s),
            activity_centroid: activity_centroid(s),
            active_span_hours: active_span(s),
            weekday_weekend_diff: weekday_weekend_diff(s),
        }
    }

    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [Option<f64>; 11] {
        [
            self.is,
            self.iv,
            self.ra,
            self.bands.night,
            self.bands.morning,
            self.bands.afternoon,
            self.bands.evening,
            self.bands.night_morning_ratio,
            self.activity_centroid,
            self.active_span_hours,
            self.weekday_weekend_diff,
        ]
    }
}

/// Writes an empty cell for undefined values.
pub fn format_optional(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// `user_id,survey_ts_ms,<metrics...>` with empty cells for undefined.
pub fn write_metrics_csv<W: Write>(
    out: W,
    extra_names: &[String],
    rows: &[(String, i64, CircadianMetrics, Vec<Option<f64>>)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = vec!["user_id".into(), "survey_ts_ms".into()];
    header.extend(METRIC_NAMES.iter().map(|s| s.to_string()));
    header.extend(extra_names.iter().cloned());
    w.write_record(&header)?;
    for (user, ts, m, extra) in rows {
        let mut row = vec![user.clone(), ts.to_string()];
        row.extend(m.values().iter().map(|v| format_optional(*v)));
        row.extend(extra.iter().map(|v| format_optional(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(values: Vec<f64>) -> HourlySeries {
        HourlySeries::consecutive(values, 0, 0).unwrap()
    }

    fn naive_is(s: &HourlySeries) -> Option<f64> {
        let n = s.len() as f64;
        let mean = s.values.iter().sum::<f64>() / n;
        if s.values.iter().all(|v| *v == s.values[0]) {
            return None;
        }
        let mut den = 0.0;
        for v in &s.values {
            den += (v - mean) * (v - mean);
        }
        let mut num = 0.0;
        for h in 0..24u8 {
            let (mut acc, mut k) = (0.0, 0);
            for i in 0..s.len() {
                if s.hour_of_day[i] == h {
                    acc += s.values[i];
                    k += 1;
                }
            }
            if k > 0 {
                let m = acc / k as f64;
                num += (m - mean) * (m - mean);
            }
        }
        Some(n * num / (24.0 * den))
    }

    #[test]
    fn repeating_pattern_is_one() {
        let day: Vec<f64> = (0..24).map(|h| (h as f64 / 3.0).sin().abs()).collect();
        let s = series([day.clone(), day.clone(), day].concat());
        assert!((interdaily_stability(&s).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_series_undefined() {
        let s = series(vec![0.3; 48]);
        assert_eq!(interdaily_stability(&s), None);
        assert_eq!(intradaily_variability(&s), None);
        assert_eq!(relative_amplitude(&s), Some(0.0));
        assert_eq!(relative_amplitude(&series(vec![0.0; 48])), None);
    }

    #[test]
    fn white_noise_is_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = series((0..168).map(|_| rng.random::<f64>()).collect());
        assert_eq!(interdaily_stability(&s), naive_is(&s));
    }

    #[test]
    fn alternating_series_iv() {
        // Σ diffs² = H-1, Σ dev² = H/4 → IV = 4 for even H
        for h in [2usize, 10, 48] {
            let s = series((0..h).map(|i| (i % 2) as f64).collect());
            assert!((intradaily_variability(&s).unwrap() - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_iv_matches_closed_form() {
        // diffs all 1: Σ = H-1; Σ dev² = H(H²-1)/12
        let h = 30usize;
        let s = series((0..h).map(|i| i as f64).collect());
        let hf = h as f64;
        let expected = hf * (hf - 1.0) / ((hf - 1.0) * hf * (hf * hf - 1.0) / 12.0);
        assert!((intradaily_variability(&s).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ra_with_zero_stretch_is_one() {
        let mut v = vec![1.0; 48];
        v[3..8].fill(0.0);
        assert_eq!(relative_amplitude(&series(v)), Some(1.0));
        assert_eq!(relative_amplitude(&series(vec![2.5; 24])), Some(0.0));
        assert_eq!(relative_amplitude(&series(vec![1.0; 9])), None);
    }

    #[test]
    fn band_examples() {
        let night_only = series((0..48).map(|i| if i % 24 < 6 { 1.0 } else { 0.0 }).collect());
        let b = band_means(&night_only);
        assert_eq!(
            (b.night, b.morning, b.afternoon, b.evening),
            (Some(1.0), Some(0.0), Some(0.0), Some(0.0))
        );
        assert_eq!(b.night_morning_ratio, None);
        let b = band_means(&series(vec![0.4; 24]));
        assert_eq!(b.night_morning_ratio, Some(1.0));
        assert!((b.evening.unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn band_means_match_direct_mean() {
        let v: Vec<f64> = (0..72).map(|i| ((i * 37) % 11) as f64).collect();
        let s = series(v.clone());
        let direct = |lo: usize, hi: usize| {
            let xs: Vec<f64> = v
                .iter()
                .enumerate()
                .filter(|(i, _)| (lo..=hi).contains(&(i % 24)))
                .map(|(_, x)| *x)
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        let b = band_means(&s);
        assert_eq!(b.night, Some(direct(0, 5)));
        assert_eq!(b.morning, Some(direct(6, 11)));
        assert_eq!(b.afternoon, Some(direct(12, 17)));
        assert_eq!(b.evening, Some(direct(18, 23)));
    }

    #[test]
    fn centroid_examples() {
        let at = |hours: &[usize]| {
            series(
                (0..48)
                    .map(|i| if hours.contains(&(i % 24)) { 1.0 } else { 0.0 })
                    .collect(),
            )
        };
        assert_eq!(activity_centroid(&at(&[12])), Some(12.0));
        assert_eq!(activity_centroid(&at(&[0, 2])), Some(1.0));
        assert_eq!(activity_centroid(&series(vec![1.0; 24])), Some(11.5));
        assert_eq!(activity_centroid(&series(vec![0.0; 24])), None);
    }

    #[test]
    fn span_examples() {
        let day: Vec<f64> = (0..24).map(|h| if (8..=20).contains(&h) { 0.7 } else { 0.0 }).collect();
        assert_eq!(active_span(&series([day.clone(), day].concat())), Some(12.0));
        let single: Vec<f64> = (0..24).map(|h| if h == 9 { 0.7 } else { 0.0 }).collect();
        assert_eq!(active_span(&series(single)), Some(0.0));
        assert_eq!(span_between(22, 2), 4);
        assert_eq!(active_span(&series(vec![0.0; 24])), None);
    }

    #[test]
    fn weekday_weekend_examples() {
        let week = |f: fn(u8) -> f64| {
            let s = HourlySeries::consecutive(vec![0.0; 168], 0, 0).unwrap();
            let values = s.weekday.iter().map(|&d| f(d)).collect();
            HourlySeries::new(values, s.hour_of_day, s.weekday).unwrap()
        };
        assert_eq!(weekday_weekend_diff(&week(|_| 0.5)), Some(0.0));
        assert_eq!(
            weekday_weekend_diff(&week(|d| if d < 5 { 1.0 } else { 0.0 })),
            Some(1.0)
        );
        let weekdays_only = HourlySeries::consecutive(vec![1.0; 48], 0, 0).unwrap();
        assert_eq!(weekday_weekend_diff(&weekdays_only), None);
    }

    #[test]
    fn consecutive_labels_roll_over() {
        let s = HourlySeries::consecutive(vec![0.0; 30], 22, 6).unwrap();
        assert_eq!(&s.hour_of_day[..3], &[22, 23, 0]);
        assert_eq!(&s.weekday[..3], &[6, 6, 0]);
    }

    proptest! {
        #[test]
        fn bounded_and_scale_invariant(
            days in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 24), 1..6),
            c in 0.1f64..50.0,
        ) {
            let v = days.concat();
            let s = series(v.clone());
            let scaled = series(v.iter().map(|x| x * c).collect());
            if let Some(is) = interdaily_stability(&s) {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&is));
                let is2 = interdaily_stability(&scaled).unwrap();
                prop_assert!((is - is2).abs() <= 1e-9 * is.abs().max(1.0));
            }
            if let Some(ra) = relative_amplitude(&s) {
                prop_assert!((0.0..=1.0).contains(&ra));
                let ra2 = relative_amplitude(&scaled).unwrap();
                prop_assert!((ra - ra2).abs() <= 1e-9);
            }
            if let Some(iv) = intradaily_variability(&s) {
                let iv2 = intradaily_variability(&scaled).unwrap();
                prop_assert!((iv - iv2).abs() <= 1e-9 * iv.abs().max(1.0));
            }
            if let Some(span) = active_span(&s) {
                prop_assert!((0.0..=24.0).contains(&span));
            }
        }
    }
}
