use crate::time::{preceding_week, LocalHour};

/// Minimum valid pre-survey hours for an observation to be kept.
pub const MIN_PRESURVEY_HOURS: usize = 48;

/// Hours of `sorted_hours` falling in the 7 days before the survey.
pub fn week_slice<T>(sorted: &[(LocalHour, T)], survey_ts_ms: i64, tz_offset_minutes: i32) -> &[(LocalHour, T)] {
    let (lo, hi) = preceding_week(survey_ts_ms, tz_offset_minutes);
    let a = sorted.partition_point(|(h, _)| *h < lo);
    let b = sorted.partition_point(|(h, _)| *h < hi);
    &sorted[a..b]
}

/// Mean over the observed hours of the week preceding the survey; hours
/// without a value are excluded, not zeroed.
pub fn weekly_mean(sorted: &[(LocalHour, f64)], survey_ts_ms: i64, tz_offset_minutes: i32) -> Option<f64> {
    let week = week_slice(sorted, survey_ts_ms, tz_offset_minutes);
    (!week.is_empty()).then(|| week.iter().map(|(_, v)| v).sum::<f64>() / week.len() as f64)
}

pub fn has_presurvey_coverage(valid_hours: &[(LocalHour, ())], survey_ts_ms: i64, tz_offset_minutes: i32) -> bool {
    week_slice(valid_hours, survey_ts_ms, tz_offset_minutes).len() >= MIN_PRESURVEY_HOURS
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::MS_PER_HOUR;

    const SURVEY: i64 = 1000 * MS_PER_HOUR;

    #[test]
    fn constant_value() {
        let hours: Vec<_> = (832..1000).map(|h| (LocalHour(h), 2.5)).collect();
        assert!((weekly_mean(&hours, SURVEY, 0).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn coverage_boundary() {
        let covered = |n: i64| -> Vec<(LocalHour, ())> { (1000 - n..1000).map(|h| (LocalHour(h), ())).collect() };
        assert!(!has_presurvey_coverage(&covered(47), SURVEY, 0));
        assert!(has_presurvey_coverage(&covered(48), SURVEY, 0));
    }

    #[test]
    fn masked_mean_over_present_hours() {
        // 60 of 168 hours present, plus hours outside the window that must be ignored
        let mut hours: Vec<(LocalHour, f64)> = vec![(LocalHour(800), 100.0)];
        let present: Vec<i64> = (832..1000).step_by(2).take(60).collect();
        hours.extend(present.iter().map(|&h| (LocalHour(h), h as f64)));
        hours.push((LocalHour(1000), -100.0));
        let expected = present.iter().map(|&h| h as f64).sum::<f64>() / 60.0;
        assert!((weekly_mean(&hours, SURVEY, 0).unwrap() - expected).abs() < 1e-9);
    }
}
