//! Person-week panel assembly and the per-(predictor, outcome) analysis:
//! Mundlak GEE, FDR per effect type, ablation verdicts and LOUO.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::LocalHour;

use super::fdr::bh_fdr;
use super::gee::{fit_gee, mundlak_design, GeeOptions};
use super::louo::{louo_resample, LouoSummary};
use super::mundlak::mundlak_decompose;
use super::survey::{score_surveys, Outcome, Outcomes, RawSurvey};
use super::verdict::{
    ablation_metrics, classify, verdict_threshold_sweep, SignConsistency, Verdict, VerdictThresholds, DELTA_GRID,
    SIGN_GRID,
};
use super::weekly::{week_slice, MIN_PRESURVEY_HOURS};

#[derive(Debug, Clone, Serialize)]
pub struct PersonWeek {
    pub user_id: String,
    pub survey_ts_ms: i64,
    pub outcomes: Outcomes,
    pub predictors: Vec<Option<f64>>,
    pub presurvey_hours: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Panel {
    pub predictor_names: Vec<String>,
    pub rows: Vec<PersonWeek>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExcludedSurvey {
    pub user_id: String,
    pub survey_ts_ms: i64,
    pub presurvey_hours: usize,
}

/// Build person-weeks from surveys. `valid_hours` holds each user's sorted
/// observed hours; `weekly` returns the predictor vector for one survey
/// given the user and the valid hours in its preceding week.
pub fn build_panel<F>(
    surveys: &[RawSurvey],
    valid_hours: &BTreeMap<String, Vec<LocalHour>>,
    predictor_names: Vec<String>,
    tz_offset_minutes: i32,
    weekly: F,
) -> (Panel, Vec<ExcludedSurvey>)
where
    F: Fn(&str, i64, &[LocalHour]) -> Vec<Option<f64>>,
{
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    let empty = Vec::new();
    for s in surveys {
        let hours = valid_hours.get(&s.user_id).unwrap_or(&empty);
        let keyed: Vec<(LocalHour, ())> = hours.iter().map(|&h| (h, ())).collect();
        let week: Vec<LocalHour> = week_slice(&keyed, s.survey_ts_ms, tz_offset_minutes)
            .iter()
            .map(|(h, _)| *h)
            .collect();
        if week.len() < MIN_PRESURVEY_HOURS {
            log::info!(
                "excluding survey of {} at {}: {} pre-survey hours",
                s.user_id,
                s.survey_ts_ms,
                week.len()
            );
            excluded.push(ExcludedSurvey {
                user_id: s.user_id.clone(),
                survey_ts_ms: s.survey_ts_ms,
                presurvey_hours: week.len(),
            });
            continue;
        }
        let predictors = weekly(&s.user_id, s.survey_ts_ms, &week);
        debug_assert_eq!(predictors.len(), predictor_names.len());
        rows.push(PersonWeek {
            user_id: s.user_id.clone(),
            survey_ts_ms: s.survey_ts_ms,
            outcomes: score_surveys(s),
            predictors,
            presurvey_hours: week.len(),
        });
    }
    (Panel { predictor_names, rows }, excluded)
}

/// Weekly means of per-hour predictor vectors; `hourly` must be sorted by hour.
pub fn weekly_means(hourly: &[(LocalHour, Vec<f64>)], week: &[LocalHour], dim: usize) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for h in week {
        if let Ok(i) = hourly.binary_search_by_key(h, |(k, _)| *k) {
            for (s, v) in sum.iter_mut().zip(&hourly[i].1) {
                *s += v;
            }
            n += 1;
        }
    }
    if n == 0 {
        return vec![None; dim];
    }
    sum.into_iter().map(|s| Some(s / n as f64)).collect()
}

impl Panel {
    /// Append the columns of `other`, matching rows on (user, survey time).
    pub fn merge_columns(&mut self, other: &Panel) -> Result<()> {
        let index: BTreeMap<(&str, i64), &PersonWeek> = other
            .rows
            .iter()
            .map(|r| ((r.user_id.as_str(), r.survey_ts_ms), r))
            .collect();
        for row in &mut self.rows {
            match index.get(&(row.user_id.as_str(), row.survey_ts_ms)) {
                Some(o) => row.predictors.extend(o.predictors.iter().copied()),
                None => row
                    .predictors
                    .extend(std::iter::repeat_n(None, other.predictor_names.len())),
            }
        }
        self.predictor_names.extend(other.predictor_names.iter().cloned());
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        let mut ids: Vec<&str> = self.rows.iter().map(|r| r.user_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Complete-case (x, y, dense cluster ids) for one pair.
    pub fn pair_data(&self, predictor: usize, outcome: Outcome) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        let (mut x, mut y, mut c) = (Vec::new(), Vec::new(), Vec::new());
        for r in &self.rows {
            if let (Some(xv), Some(yv)) = (r.predictors[predictor], r.outcomes.get(outcome)) {
                if !xv.is_finite() {
                    continue;
                }
                let next = ids.len();
                c.push(*ids.entry(r.user_id.as_str()).or_insert(next));
                x.push(xv);
                y.push(yv);
            }
        }
        (x, y, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisOptions {
    pub gee: GeeOptions,
    pub thresholds: VerdictThresholds,
    pub sign_mode: SignConsistency,
    pub louo: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            gee: GeeOptions::default(),
            thresholds: VerdictThresholds::default(),
            sign_mode: SignConsistency::default(),
            louo: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PairResult {
    pub predictor: String,
    pub outcome: Outcome,
    pub n_obs: usize,
    pub n_users: usize,
    pub beta0: f64,
    pub beta_b: f64,
    pub beta_w: f64,
    pub se_b: f64,
    pub se_w: f64,
    pub p_b: f64,
    pub p_w: f64,
    pub q_b: f64,
    pub q_w: f64,
    pub alpha: f64,
    pub converged: bool,
    pub delta_rmse_pct: Option<f64>,
    pub sign_pct: Option<f64>,
    /// `None` when the fit did not converge or the outcome is constant.
    pub verdict: Option<Verdict>,
    pub louo: Option<LouoSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SkippedPair {
    pub predictor: String,
    pub outcome: Outcome,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisResults {
    pub pairs: Vec<PairResult>,
    pub skipped: Vec<SkippedPair>,
    pub robust_grid: Vec<Vec<usize>>,
}

impl AnalysisResults {
    pub fn find(&self, predictor: &str, outcome: Outcome) -> Option<&PairResult> {
        self.pairs
            .iter()
            .find(|p| p.predictor == predictor && p.outcome == outcome)
    }

    pub fn robust_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.verdict == Some(Verdict::Robust)).count()
    }

    /// Robust counts over custom threshold axes.
    pub fn robust_grid_for(&self, deltas: &[f64], signs: &[f64]) -> Vec<Vec<usize>> {
        let inputs: Vec<(f64, f64)> = self
            .pairs
            .iter()
            .filter_map(|p| Some((p.delta_rmse_pct?, p.sign_pct?)))
            .collect();
        verdict_threshold_sweep(&inputs, deltas, signs)
    }
}

fn analyze_pair(panel: &Panel, j: usize, outcome: Outcome, opts: &AnalysisOptions) -> Result<PairResult> {
    let (x, y, c) = panel.pair_data(j, outcome);
    let n_users = c.iter().max().map_or(0, |m| m + 1);
    if n_users < 2 || x.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "{} observations from {} users",
            x.len(),
            n_users
        )));
    }
    let m = mundlak_decompose(&x, &c)?;
    let fit = fit_gee(&y, &m.between, &m.within, &c, opts.gee)?;
    let fitted = fit.predict(&mundlak_design(&m.between, &m.within));
    let ablation = if fit.converged {
        match ablation_metrics(&y, &fitted, opts.sign_mode) {
            Ok(a) => Some(a),
            Err(e) => {
                log::warn!(
                    "{} ~ {}: verdict undefined ({e})",
                    outcome.name(),
                    panel.predictor_names[j]
                );
                None
            }
        }
    } else {
        log::warn!(
            "{} ~ {}: GEE did not converge",
            outcome.name(),
            panel.predictor_names[j]
        );
        None
    };
    let louo = if opts.louo && n_users >= 3 {
        Some(louo_resample(&x, &y, &c, fit.coef[1], fit.coef[2], opts.gee)?)
    } else {
        None
    };
    Ok(PairResult {
        predictor: panel.predictor_names[j].clone(),
        outcome,
        n_obs: x.len(),
        n_users,
        beta0: fit.coef[0],
        beta_b: fit.coef[1],
        beta_w: fit.coef[2],
        se_b: fit.robust_se[1],
        se_w: fit.robust_se[2],
        p_b: fit.p[1],
        p_w: fit.p[2],
        q_b: f64::NAN,
        q_w: f64::NAN,
        alpha: fit.alpha,
        converged: fit.converged,
        delta_rmse_pct: ablation.map(|a| a.delta_rmse_pct),
        sign_pct: ablation.map(|a| a.sign_pct),
        verdict: ablation.map(|a| classify(a.delta_rmse_pct, a.sign_pct, opts.thresholds)),
        louo,
    })
}

/// Fit every (predictor, outcome) pair; q values are pooled across all
/// fitted pairs, separately for the between and within effects.
pub fn analyze_panel(panel: &Panel, outcomes: &[Outcome], opts: &AnalysisOptions) -> AnalysisResults {
    let jobs: Vec<(usize, Outcome)> = (0..panel.predictor_names.len())
        .flat_map(|j| outcomes.iter().map(move |&o| (j, o)))
        .collect();
    let fits: Vec<(usize, Outcome, Result<PairResult>)> = jobs
        .par_iter()
        .map(|&(j, o)| (j, o, analyze_pair(panel, j, o, opts)))
        .collect();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (j, o, r) in fits {
        match r {
            Ok(p) => pairs.push(p),
            Err(e) => {
                log::info!("dropping {} ~ {}: {e}", o.name(), panel.predictor_names[j]);
                skipped.push(SkippedPair {
                    predictor: panel.predictor_names[j].clone(),
                    outcome: o,
                    reason: e.to_string(),
                });
            }
        }
    }
    let qb = bh_fdr(&pairs.iter().map(|p| p.p_b).collect::<Vec<_>>());
    let qw = bh_fdr(&pairs.iter().map(|p| p.p_w).collect::<Vec<_>>());
    for (p, (b, w)) in pairs.iter_mut().zip(qb.into_iter().zip(qw)) {
        p.q_b = b;
        p.q_w = w;
    }
    let inputs: Vec<(f64, f64)> = pairs
        .iter()
        .filter_map(|p| Some((p.delta_rmse_pct?, p.sign_pct?)))
        .collect();
    let robust_grid = verdict_threshold_sweep(&inputs, &DELTA_GRID, &SIGN_GRID);
    AnalysisResults {
        pairs,
        skipped,
        robust_grid,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub const RESULTS_COLUMNS: [&str; 25] = [
    "predictor",
    "outcome",
    "n_obs",
    "n_users",
    "beta0",
    "beta_b",
    "beta_w",
    "se_b",
    "se_w",
    "p_b",
    "p_w",
    "q_b",
    "q_w",
    "alpha",
    "converged",
    "delta_rmse_pct",
    "sign_pct",
    "verdict",
    "louo_folds",
    "louo_skipped",
    "louo_sign_b",
    "louo_sign_w",
    "louo_sig_b",
    "louo_sig_w",
    "n_clusters",
];

pub fn write_results_csv<W: Write>(out: W, results: &AnalysisResults) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_COLUMNS)?;
    for p in &results.pairs {
        let l = p.louo.as_ref();
        let lc = |f: fn(&LouoSummary) -> usize| l.map_or_else(String::new, |s| f(s).to_string());
        w.write_record([
            p.predictor.clone(),
            p.outcome.name().to_string(),
            p.n_obs.to_string(),
            p.n_users.to_string(),
            p.beta0.to_string(),
            p.beta_b.to_string(),
            p.beta_w.to_string(),
            p.se_b.to_string(),
            p.se_w.to_string(),
            p.p_b.to_string(),
            p.p_w.to_string(),
            p.q_b.to_string(),
            p.q_w.to_string(),
            p.alpha.to_string(),
            p.converged.to_string(),
            opt(p.delta_rmse_pct),
            opt(p.sign_pct),
            p.verdict.map_or("", |v| v.name()).to_string(),
            lc(|s| s.folds.len()),
            lc(|s| s.skipped.len()),
            lc(|s| s.sign_preserved_b()),
            lc(|s| s.sign_preserved_w()),
            lc(|s| s.significant_b()),
            lc(|s| s.significant_w()),
            lc(|s| s.n_clusters),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Rows follow `deltas`, columns follow `signs`.
pub fn write_grid_csv<W: Write>(out: W, grid: &[Vec<usize>], deltas: &[f64], signs: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["delta_rmse_pct".to_string()];
    header.extend(signs.iter().map(|s| format!("sign_{s}")));
    w.write_record(&header)?;
    for (d, row) in deltas.iter().zip(grid) {
        let mut rec = vec![d.to_string()];
        rec.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::MS_PER_HOUR;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn survey(user: &str, ts: i64, stress: u8) -> RawSurvey {
        RawSurvey {
            user_id: user.into(),
            survey_ts_ms: ts,
            sleep: [Some(3); 4],
            stress: [Some(stress), Some(3), Some(3), Some(stress)],
            loneliness: [Some(2); 3],
        }
    }

    #[test]
    fn panel_excludes_short_coverage() {
        let ts = 1000 * MS_PER_HOUR;
        let mut hours = BTreeMap::new();
        hours.insert("a".to_string(), (953..1000).map(LocalHour).collect::<Vec<_>>());
        hours.insert("b".to_string(), (952..1000).map(LocalHour).collect::<Vec<_>>());
        let (panel, excl) = build_panel(
            &[survey("a", ts, 3), survey("b", ts, 3)],
            &hours,
            vec!["x".into()],
            0,
            |_, _, w| vec![Some(w.len() as f64)],
        );
        assert_eq!(excl.len(), 1);
        assert_eq!(excl[0].presurvey_hours, 47);
        assert_eq!(panel.rows.len(), 1);
        assert_eq!(panel.rows[0].predictors, vec![Some(48.0)]);
    }

    #[test]
    fn weekly_means_masked() {
        let hourly: Vec<(LocalHour, Vec<f64>)> = (0..10).map(|h| (LocalHour(h), vec![h as f64, 1.0])).collect();
        let week: Vec<LocalHour> = [2, 4, 50].into_iter().map(LocalHour).collect();
        assert_eq!(weekly_means(&hourly, &week, 2), vec![Some(3.0), Some(1.0)]);
    }

    #[test]
    fn planted_stress_effect_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        for u in 0..30 {
            let base: f64 = nrm.sample(&mut rng);
            for w in 0..6 {
                let x = base + 0.3 * nrm.sample(&mut rng);
                let stress = (12.0 + 3.0 * base + nrm.sample(&mut rng)).round().clamp(4.0, 20.0);
                rows.push(PersonWeek {
                    user_id: format!("u{u}"),
                    survey_ts_ms: w,
                    outcomes: Outcomes {
                        sleep: Some(10.0),
                        stress: Some(stress),
                        loneliness: None,
                    },
                    predictors: vec![Some(x), Some(nrm.sample(&mut rng))],
                    presurvey_hours: 168,
                });
            }
        }
        let panel = Panel {
            predictor_names: vec!["signal".into(), "noise".into()],
            rows,
        };
        let res = analyze_panel(&panel, &Outcome::ALL, &AnalysisOptions::default());
        // sleep is constant, loneliness missing: both dropped or undefined
        let sig = res.find("signal", Outcome::Stress).unwrap();
        assert!(sig.beta_b > 0.0 && sig.q_b < 0.05);
        assert_eq!(sig.verdict, Some(Verdict::Robust));
        assert_eq!(sig.louo.as_ref().unwrap().sign_preserved_b(), 30);
        assert!(res.find("signal", Outcome::Loneliness).is_none());
        assert!(res.find("signal", Outcome::Sleep).is_none_or(|p| p.verdict.is_none()));
        assert_eq!(res.robust_grid[0][2], res.robust_count());
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &res).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), res.pairs.len() + 1);
    }
}
