//! Local-time hour labels.
//!
//! A run uses one fixed UTC offset. DST transitions are not modeled: every
//! timestamp is shifted by the same number of minutes.

use chrono::DateTime;
use serde::{Deserialize, Serialize};

pub const MS_PER_HOUR: i64 = 3_600_000;
pub const MS_PER_MINUTE: i64 = 60_000;
pub const HOURS_PER_WEEK: i64 = 168;

/// Maximum accepted |offset| in minutes (UTC-14:00 .. UTC+14:00).
pub const MAX_TZ_OFFSET_MINUTES: i32 = 14 * 60;

/// Hours since the Unix epoch, measured in local time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LocalHour(pub i64);

impl LocalHour {
    pub fn from_utc_ms(ts_ms: i64, tz_offset_minutes: i32) -> Self {
        let local = ts_ms + i64::from(tz_offset_minutes) * MS_PER_MINUTE;
        LocalHour(local.div_euclid(MS_PER_HOUR))
    }

    pub fn hour_of_day(self) -> u8 {
        self.0.rem_euclid(24) as u8
    }

    pub fn day_index(self) -> i64 {
        self.0.div_euclid(24)
    }

    /// 0 = Monday .. 6 = Sunday. Epoch day 0 (1970-01-01) was a Thursday.
    pub fn weekday(self) -> u8 {
        (self.day_index() + 3).rem_euclid(7) as u8
    }

    /// Monday-based calendar week index.
    pub fn week_index(self) -> i64 {
        (self.day_index() + 3).div_euclid(7)
    }

    pub fn start_ms(self) -> i64 {
        self.0 * MS_PER_HOUR
    }

    pub fn shift(self, tz_offset_minutes: i32) -> Option<Self> {
        let delta = i64::from(tz_offset_minutes) * MS_PER_MINUTE;
        if delta % MS_PER_HOUR != 0 {
            return None;
        }
        Some(LocalHour(self.0 + delta / MS_PER_HOUR))
    }

    pub fn next(self) -> Self {
        LocalHour(self.0 + 1)
    }

    /// `YYYY-MM-DDTHH:00` in local time.
    pub fn format(self) -> String {
        DateTime::from_timestamp_millis(self.start_ms())
            .map(|d| d.naive_utc().format("%Y-%m-%dT%H:00").to_string())
            .unwrap_or_default()
    }
}

/// Local hours whose start lies in `[survey - 168h, survey)`.
pub fn preceding_week(survey_ts_ms: i64, tz_offset_minutes: i32) -> (LocalHour, LocalHour) {
    let local = survey_ts_ms + i64::from(tz_offset_minutes) * MS_PER_MINUTE;
    // first hour whose start is >= local - 168h
    let lo = (local - HOURS_PER_WEEK * MS_PER_HOUR + MS_PER_HOUR - 1).div_euclid(MS_PER_HOUR);
    // first hour whose start is >= local (exclusive bound)
    let hi = (local + MS_PER_HOUR - 1).div_euclid(MS_PER_HOUR);
    (LocalHour(lo), LocalHour(hi))
}

pub fn validate_tz_offset(minutes: i32) -> Result<(), String> {
    if minutes.abs() > MAX_TZ_OFFSET_MINUTES {
        Err(format!(
            "timezone offset {minutes} min outside ±{MAX_TZ_OFFSET_MINUTES} min"
        ))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_offset_rolls_back_a_day() {
        // 1970-01-02T04:30Z at UTC-5 is 1970-01-01T23:30 local
        let ts = (24 + 4) * MS_PER_HOUR + 30 * MS_PER_MINUTE;
        let h = LocalHour::from_utc_ms(ts, -300);
        assert_eq!(h.hour_of_day(), 23);
        assert_eq!(h.day_index(), 0);
        assert_eq!(h.format(), "1970-01-01T23:00");
    }

    #[test]
    fn weekday_of_epoch_is_thursday() {
        assert_eq!(LocalHour(0).weekday(), 3);
        // 1970-01-05 was a Monday
        assert_eq!(LocalHour(4 * 24).weekday(), 0);
    }

    #[test]
    fn preceding_week_bounds() {
        let survey = 1000 * MS_PER_HOUR;
        let (lo, hi) = preceding_week(survey, 0);
        assert_eq!(hi.0 - lo.0, 168);
        assert_eq!(hi, LocalHour(1000));
        let (lo, hi) = preceding_week(survey + 1, 0);
        assert_eq!((lo.0, hi.0), (833, 1001));
    }

    #[test]
    fn offset_out_of_range() {
        assert!(validate_tz_offset(14 * 60).is_ok());
        assert!(validate_tz_offset(-14 * 60 - 1).is_err());
    }
}
