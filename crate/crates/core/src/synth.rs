//! Deterministic synthetic cohorts: flow records, weekly surveys and a
//! ground-truth manifest with planted diurnal patterns and known
//! between-person and within-person outcome effects.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_flow_records, Dictionary, FlowRecord, MODEL_CATEGORIES, SYSTEM_CATEGORY};
use crate::interpret::TimeBand;
use crate::stats::{backfill_items, write_surveys_csv, Outcome, RawSurvey};
use crate::time::{LocalHour, MS_PER_HOUR, MS_PER_MINUTE};

pub const TRUTH_VERSION: u32 = 1;

const STREAM_PROFILES: u64 = 1;
const STREAM_PATTERNS: u64 = 2;
const STREAM_OUTCOME_NOISE: u64 = 3;
/// Per-user flow streams start here.
const STREAM_FLOWS: u64 = 1000;

/// (hostname, app, category) of the sample dictionary.
pub const SAMPLE_HOSTS: [(&str, &str, &str); 22] = [
    ("web.whatsapp.com", "WhatsApp", "communication"),
    ("mmg.whatsapp.net", "WhatsApp", "communication"),
    ("api.telegram.org", "Telegram", "communication"),
    ("outlook.office365.com", "Outlook", "communication"),
    ("i.instagram.com", "Instagram", "social_media"),
    ("scontent.cdninstagram.com", "Instagram", "social_media"),
    ("api.tiktokv.com", "TikTok", "social_media"),
    ("www.reddit.com", "Reddit", "social_media"),
    ("rr3.googlevideo.com", "YouTube", "streaming"),
    ("www.youtube.com", "YouTube", "streaming"),
    ("ipv4-c001.nflxvideo.net", "Netflix", "streaming"),
    ("audio-fa.scdn.co", "Spotify", "streaming"),
    ("docs.google.com", "Google Docs", "productivity"),
    ("github.com", "GitHub", "productivity"),
    ("canvas.instructure.com", "Canvas", "productivity"),
    ("www.notion.so", "Notion", "productivity"),
    ("swscan.apple.com", "Apple OS", "system"),
    ("gateway.icloud.com", "iCloud", "system"),
    ("connectivitycheck.gstatic.com", "Android OS", "system"),
    ("time.android.com", "Android OS", "system"),
    ("mtalk.google.com", "Google Services", "system"),
    ("settings-win.data.microsoft.com", "Windows", "system"),
];

/// Hosts absent from the sample dictionary.
pub const UNMAPPED_HOSTS: [&str; 3] = ["cdn-7f3a.edgecache.net", "tracker.adnet.io", ""];

/// Median bytes of one flow per model category.
const MEDIAN_FLOW_BYTES: [f64; 5] = [40_000.0, 250_000.0, 1_500_000.0, 120_000.0, 8_000.0];
/// Mean weight of each category in a user's app mix.
const BASE_MIX: [f64; 5] = [0.30, 0.20, 0.15, 0.25, 0.10];

pub fn sample_dictionary() -> Dictionary {
    let hosts = SAMPLE_HOSTS.iter().map(|(h, a, _)| (h.to_string(), a.to_string()));
    let apps = SAMPLE_HOSTS.iter().map(|(_, a, c)| (a.to_string(), c.to_string()));
    Dictionary::new(hosts, apps).expect("sample dictionary is consistent")
}

fn hosts_of(category: &str) -> Vec<&'static str> {
    SAMPLE_HOSTS
        .iter()
        .filter(|(_, _, c)| *c == category)
        .map(|(h, _, _)| *h)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedPattern {
    pub name: String,
    pub category: String,
    pub band: TimeBand,
    /// Probability that an hour of the band carries the pattern.
    pub prevalence: f64,
    /// Shift of the probability per SD of the person-level intensity.
    pub between_sd: f64,
    /// Shift of the probability per SD of the week-level intensity.
    pub within_sd: f64,
    /// Minimum byte share of the category in a planted hour.
    pub share: f64,
    pub outcome: Outcome,
    pub beta_between: f64,
    pub beta_within: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub weeks: usize,
    pub seed: u64,
    /// Local midnight of the first day as `YYYY-MM-DD`; should be a Monday.
    pub start_date: String,
    pub tz_offset_minutes: i32,
    /// Mean flows per hour at the user's activity peak.
    pub peak_flows: f64,
    /// Gamma concentration of per-user app mixes (larger = closer to the base mix).
    pub mix_concentration: f64,
    /// Fraction of flows to hosts missing from the dictionary.
    pub unmapped_rate: f64,
    /// Probability that a day contains a coverage gap.
    pub dropout_rate: f64,
    pub gap_hours: usize,
    /// SD of the per-user outcome offset.
    pub user_sd: f64,
    pub noise_sd: f64,
    pub patterns: Vec<PlantedPattern>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 10,
            weeks: 3,
            seed: 42,
            start_date: "2024-01-01".into(),
            tz_offset_minutes: 0,
            peak_flows: 20.0,
            mix_concentration: 4.0,
            unmapped_rate: 0.03,
            dropout_rate: 0.0,
            gap_hours: 8,
            user_sd: 0.5,
            noise_sd: 1.0,
            patterns: vec![
                PlantedPattern {
                    name: "evening_social".into(),
                    category: "social_media".into(),
                    band: TimeBand::Evening,
                    prevalence: 0.45,
                    between_sd: 0.15,
                    within_sd: 0.0,
                    share: 0.6,
                    outcome: Outcome::Stress,
                    beta_between: 2.0,
                    beta_within: 0.0,
                },
                PlantedPattern {
                    name: "night_streaming".into(),
                    category: "streaming".into(),
                    band: TimeBand::Night,
                    prevalence: 0.45,
                    between_sd: 0.0,
                    within_sd: 0.15,
                    share: 0.6,
                    outcome: Outcome::Sleep,
                    beta_between: 0.0,
                    beta_within: 2.0,
                },
            ],
        }
    }
}

impl SynthConfig {
    /// All violations, or `Ok` when the configuration is feasible.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_users == 0 {
            errs.push("n_users must be positive".to_string());
        }
        if self.weeks == 0 {
            errs.push("weeks must be positive".to_string());
        }
        if self.start_ms_local().is_err() {
            errs.push(format!("start_date `{}` is not YYYY-MM-DD", self.start_date));
        }
        if self.tz_offset_minutes.abs() > crate::time::MAX_TZ_OFFSET_MINUTES {
            errs.push(format!("tz_offset_minutes {} outside ±14h", self.tz_offset_minutes));
        }
        for (name, p) in [
            ("unmapped_rate", self.unmapped_rate),
            ("dropout_rate", self.dropout_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.peak_flows <= 0.0 || self.mix_concentration <= 0.0 {
            errs.push("peak_flows and mix_concentration must be positive".to_string());
        }
        if self.gap_hours == 0 || self.gap_hours > 24 {
            errs.push("gap_hours must be in 1..=24".to_string());
        }
        if self.user_sd < 0.0 || self.noise_sd < 0.0 {
            errs.push("user_sd and noise_sd must be non-negative".to_string());
        }
        if self.patterns.is_empty() {
            errs.push("at least one planted pattern is required".to_string());
        }
        for p in &self.patterns {
            if !MODEL_CATEGORIES.contains(&p.category.as_str()) || p.category == SYSTEM_CATEGORY {
                errs.push(format!(
                    "pattern `{}`: category `{}` is not a non-system model category",
                    p.name, p.category
                ));
            }
            if !(0.0..1.0).contains(&p.share) {
                errs.push(format!("pattern `{}`: share {} outside [0, 1)", p.name, p.share));
            }
            if p.between_sd < 0.0 || p.within_sd < 0.0 {
                errs.push(format!("pattern `{}`: negative spread", p.name));
            }
            let reach = 2.5 * (p.between_sd + p.within_sd);
            if p.prevalence - reach < 0.0 || p.prevalence + reach > 1.0 {
                errs.push(format!(
                    "pattern `{}`: prevalence {} ± {reach} leaves [0, 1]",
                    p.name, p.prevalence
                ));
            }
        }
        for o in Outcome::ALL {
            let (lo, hi) = o.range();
            let spread: f64 = self
                .patterns
                .iter()
                .filter(|p| p.outcome == o)
                .map(|p| p.beta_between.abs() + p.beta_within.abs())
                .sum::<f64>()
                + self.user_sd
                + self.noise_sd;
            if 2.0 * spread > (hi - lo) / 2.0 {
                errs.push(format!(
                    "{} range {lo}–{hi} too tight for effects and noise (2·spread = {:.2})",
                    o.name(),
                    2.0 * spread
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn start_ms_local(&self) -> Result<i64> {
        let d = chrono::NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .map_err(|e| Error::Config(format!("start_date: {e}")))?;
        Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp_millis())
    }

    pub fn first_hour(&self) -> Result<LocalHour> {
        Ok(LocalHour(self.start_ms_local()?.div_euclid(MS_PER_HOUR)))
    }

    /// Survey of week `w` (0-based) is taken at local midnight closing the week.
    pub fn survey_ts_ms(&self, w: usize) -> Result<i64> {
        let local = self.start_ms_local()? + (w as i64 + 1) * 168 * MS_PER_HOUR;
        Ok(local - i64::from(self.tz_offset_minutes) * MS_PER_MINUTE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: String,
    pub wake_hour: u8,
    /// May exceed 23 (after midnight).
    pub bed_hour: u8,
    pub peak_flows: f64,
    pub category_mix: [f64; 5],
    /// Offset per outcome in `Outcome::ALL` order.
    pub outcome_offsets: [f64; 3],
    /// Standardized person-level intensity per pattern.
    pub pattern_between: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTruth {
    pub outcome: Outcome,
    pub noiseless: f64,
    pub noise: f64,
    pub emitted: u32,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekTruth {
    pub user_id: String,
    pub week: usize,
    pub survey_ts_ms: i64,
    /// Standardized week-level intensity per pattern (zero mean per user).
    pub pattern_within: Vec<f64>,
    /// Realized planting probability per pattern.
    pub probability: Vec<f64>,
    pub planted_hours: Vec<usize>,
    pub outcomes: Vec<OutcomeTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedHour {
    pub user_id: String,
    pub local_hour: LocalHour,
    pub pattern: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageGap {
    pub user_id: String,
    pub start: LocalHour,
    pub hours: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub version: u32,
    pub config: SynthConfig,
    pub users: Vec<UserTruth>,
    pub weeks: Vec<WeekTruth>,
    pub planted: Vec<PlantedHour>,
    pub gaps: Vec<CoverageGap>,
}

pub struct Cohort {
    pub flows: Vec<FlowRecord>,
    pub surveys: Vec<RawSurvey>,
    pub dictionary: Dictionary,
    pub truth: GroundTruth,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    if v.len() < 2 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    for x in v.iter_mut() {
        *x = if sd > 0.0 { (*x - mean) / sd } else { 0.0 };
    }
}

fn user_id(i: usize) -> String {
    format!("P{:03}", i + 1)
}

fn draw_users(cfg: &SynthConfig) -> Vec<UserTruth> {
    let mut rng = rng_stream(cfg.seed, STREAM_PROFILES);
    let offset = Normal::new(0.0, cfg.user_sd.max(f64::MIN_POSITIVE)).expect("finite sd");
    let mut users: Vec<UserTruth> = (0..cfg.n_users)
        .map(|i| {
            let mut mix = [0.0; 5];
            for (m, base) in mix.iter_mut().zip(BASE_MIX) {
                *m = Gamma::new(cfg.mix_concentration * base * 5.0, 1.0)
                    .expect("positive shape")
                    .sample(&mut rng);
            }
            let total: f64 = mix.iter().sum();
            mix.iter_mut().for_each(|m| *m /= total);
            let mut offsets = [0.0; 3];
            for o in offsets.iter_mut() {
                *o = if cfg.user_sd > 0.0 {
                    offset.sample(&mut rng)
                } else {
                    0.0
                };
            }
            UserTruth {
                user_id: user_id(i),
                wake_hour: rng.random_range(5..=9),
                bed_hour: rng.random_range(21..=25),
                peak_flows: cfg.peak_flows * rng.random_range(0.5..1.5),
                category_mix: mix,
                outcome_offsets: offsets,
                pattern_between: Vec::new(),
            }
        })
        .collect();
    let mut prng = rng_stream(cfg.seed, STREAM_PATTERNS);
    for _ in &cfg.patterns {
        let mut z: Vec<f64> = (0..cfg.n_users)
            .map(|_| prng.sample(rand_distr::StandardNormal))
            .collect();
        standardize(&mut z);
        for (u, v) in users.iter_mut().zip(z) {
            u.pattern_between.push(v);
        }
    }
    users
}

/// Week-level intensities per (user, pattern): zero mean within each user,
/// unit pooled SD.
#[allow(clippy::needless_range_loop)]
fn draw_within(cfg: &SynthConfig) -> Vec<Vec<Vec<f64>>> {
    let mut rng = rng_stream(cfg.seed, STREAM_PATTERNS + 100);
    let mut out = vec![vec![vec![0.0; cfg.patterns.len()]; cfg.weeks]; cfg.n_users];
    for k in 0..cfg.patterns.len() {
        let mut all = Vec::new();
        for _ in 0..cfg.n_users {
            let mut z: Vec<f64> = (0..cfg.weeks).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let m = z.iter().sum::<f64>() / z.len() as f64;
            z.iter_mut().for_each(|x| *x -= m);
            all.push(z);
        }
        let n: usize = all.iter().map(Vec::len).sum();
        let dof = n.saturating_sub(cfg.n_users).max(1) as f64;
        let sd = (all.iter().flatten().map(|x| x * x).sum::<f64>() / dof).sqrt();
        for (u, z) in all.into_iter().enumerate() {
            for (w, v) in z.into_iter().enumerate() {
                out[u][w][k] = if sd > 0.0 { v / sd } else { 0.0 };
            }
        }
    }
    out
}

/// Expected flows in an hour of day for a user: a waking plateau shaped
/// by a sine bump and a low sleeping floor.
fn hourly_rate(u: &UserTruth, hour: u8) -> f64 {
    let h = f64::from(hour);
    let wake = f64::from(u.wake_hour);
    let bed = f64::from(u.bed_hour);
    let t = if h < wake && h + 24.0 < bed { h + 24.0 } else { h };
    if t >= wake && t < bed {
        let phase = (t - wake) / (bed - wake);
        u.peak_flows * (0.45 + 0.55 * (std::f64::consts::PI * phase).sin())
    } else {
        0.4
    }
}

fn pick_category(rng: &mut ChaCha8Rng, mix: &[f64; 5]) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, m) in mix.iter().enumerate() {
        acc += m;
        if x < acc {
            return i;
        }
    }
    mix.len() - 1
}

fn flow(rng: &mut ChaCha8Rng, user: &str, hour_start_utc: i64, host: &str, bytes: u64) -> FlowRecord {
    let up = (bytes / 10).max(1);
    let down = bytes.saturating_sub(up);
    FlowRecord {
        user_id: user.to_string(),
        start_ts_ms: hour_start_utc + rng.random_range(0..MS_PER_HOUR),
        hostname: host.to_string(),
        up_bytes: up,
        down_bytes: down,
        up_pkts: up / 1200 + 1,
        down_pkts: down / 1200 + 1,
    }
}

fn flow_bytes(rng: &mut ChaCha8Rng, category: usize) -> u64 {
    let d = LogNormal::new(MEDIAN_FLOW_BYTES[category].ln(), 0.6).expect("finite");
    d.sample(rng).round().max(64.0) as u64
}

#[allow(clippy::needless_range_loop)]
pub fn generate_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let tz_ms = i64::from(cfg.tz_offset_minutes) * MS_PER_MINUTE;
    let first = cfg.first_hour()?;
    let mut users = draw_users(cfg);
    let within = draw_within(cfg);
    let cat_hosts: Vec<Vec<&str>> = MODEL_CATEGORIES.iter().map(|c| hosts_of(c)).collect();
    let pattern_cat: Vec<usize> = cfg
        .patterns
        .iter()
        .map(|p| {
            MODEL_CATEGORIES
                .iter()
                .position(|c| *c == p.category)
                .expect("validated")
        })
        .collect();

    let mut flows = Vec::new();
    let mut weeks = Vec::new();
    let mut planted = Vec::new();
    let mut gaps = Vec::new();
    for (ui, u) in users.iter_mut().enumerate() {
        let mut rng = rng_stream(cfg.seed, STREAM_FLOWS + ui as u64);
        let mut gap_hours: Vec<bool> = vec![false; cfg.weeks * 168];
        for day in 0..cfg.weeks * 7 {
            if cfg.dropout_rate > 0.0 && rng.random_bool(cfg.dropout_rate) {
                let start = day * 24 + rng.random_range(0..24);
                let end = (start + cfg.gap_hours).min(gap_hours.len());
                gap_hours[start..end].iter_mut().for_each(|g| *g = true);
                gaps.push(CoverageGap {
                    user_id: u.user_id.clone(),
                    start: LocalHour(first.0 + start as i64),
                    hours: end - start,
                });
            }
        }
        for w in 0..cfg.weeks {
            let probs: Vec<f64> = cfg
                .patterns
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    (p.prevalence + p.between_sd * u.pattern_between[k] + p.within_sd * within[ui][w][k])
                        .clamp(0.0, 1.0)
                })
                .collect();
            let mut counts = vec![0usize; cfg.patterns.len()];
            for hw in 0..168 {
                let idx = w * 168 + hw;
                let hour = LocalHour(first.0 + idx as i64);
                let hod = hour.hour_of_day();
                // draws happen even in gaps so coverage does not shift the stream
                let n_flows = Poisson::new(hourly_rate(u, hod))
                    .expect("positive rate")
                    .sample(&mut rng) as usize
                    + 1;
                let mut hour_flows = Vec::with_capacity(n_flows + 8);
                let start_utc = hour.start_ms() - tz_ms;
                for i in 0..n_flows {
                    // the first flow of every hour is background system traffic
                    let (host, cat) = if i == 0 {
                        (cat_hosts[4][rng.random_range(0..cat_hosts[4].len())], 4)
                    } else if rng.random_bool(cfg.unmapped_rate) {
                        (UNMAPPED_HOSTS[rng.random_range(0..UNMAPPED_HOSTS.len())], 4)
                    } else {
                        let c = pick_category(&mut rng, &u.category_mix);
                        (cat_hosts[c][rng.random_range(0..cat_hosts[c].len())], c)
                    };
                    let bytes = flow_bytes(&mut rng, cat);
                    hour_flows.push((flow(&mut rng, &u.user_id, start_utc, host, bytes), cat));
                }
                for (k, p) in cfg.patterns.iter().enumerate() {
                    let hit = rng.random_bool(probs[k]);
                    if !hit || TimeBand::of_hour(hod) != p.band {
                        continue;
                    }
                    let c = pattern_cat[k];
                    let extra = 3 + Poisson::new(4.0).expect("rate").sample(&mut rng) as usize;
                    let mut added: Vec<FlowRecord> = (0..extra)
                        .map(|_| {
                            let bytes = flow_bytes(&mut rng, c);
                            let host = cat_hosts[c][rng.random_range(0..cat_hosts[c].len())];
                            flow(&mut rng, &u.user_id, start_utc, host, bytes)
                        })
                        .collect();
                    let cat_bytes: u64 = hour_flows
                        .iter()
                        .filter(|(_, fc)| *fc == c)
                        .map(|(f, _)| f.bytes())
                        .sum();
                    let other: u64 = hour_flows
                        .iter()
                        .filter(|(_, fc)| *fc != c)
                        .map(|(f, _)| f.bytes())
                        .sum();
                    let new_bytes: u64 = added.iter().map(FlowRecord::bytes).sum();
                    let need = p.share / (1.0 - p.share) * other as f64 - cat_bytes as f64;
                    if (new_bytes as f64) < need {
                        let scale = need / new_bytes as f64 * 1.01;
                        for f in &mut added {
                            f.up_bytes = (f.up_bytes as f64 * scale).ceil() as u64;
                            f.down_bytes = (f.down_bytes as f64 * scale).ceil() as u64;
                            f.up_pkts = f.up_bytes / 1200 + 1;
                            f.down_pkts = f.down_bytes / 1200 + 1;
                        }
                    }
                    if !gap_hours[idx] {
                        counts[k] += 1;
                        planted.push(PlantedHour {
                            user_id: u.user_id.clone(),
                            local_hour: hour,
                            pattern: k,
                        });
                    }
                    hour_flows.extend(added.into_iter().map(|f| (f, c)));
                }
                if !gap_hours[idx] {
                    flows.extend(hour_flows.into_iter().map(|(f, _)| f));
                }
            }
            weeks.push(WeekTruth {
                user_id: u.user_id.clone(),
                week: w,
                survey_ts_ms: cfg.survey_ts_ms(w)?,
                pattern_within: within[ui][w].clone(),
                probability: probs,
                planted_hours: counts,
                outcomes: Vec::new(),
            });
        }
    }
    flows.sort_by(|a, b| {
        a.user_id
            .cmp(&b.user_id)
            .then(a.start_ts_ms.cmp(&b.start_ts_ms))
            .then(a.hostname.cmp(&b.hostname))
    });

    let mut truth = GroundTruth {
        version: TRUTH_VERSION,
        config: cfg.clone(),
        users,
        weeks,
        planted,
        gaps,
    };
    fill_outcomes(&mut truth);
    let surveys = surveys_from_truth(&truth);
    Ok(Cohort {
        flows,
        surveys,
        dictionary: sample_dictionary(),
        truth,
    })
}

/// Noiseless outcome of one person-week from the manifest.
pub fn noiseless_outcome(truth: &GroundTruth, user: &UserTruth, week: &WeekTruth, o: Outcome) -> f64 {
    let (lo, hi) = o.range();
    let oi = Outcome::ALL.iter().position(|x| *x == o).expect("known outcome");
    let mut y = (lo + hi) / 2.0 + user.outcome_offsets[oi];
    for (k, p) in truth.config.patterns.iter().enumerate() {
        if p.outcome == o {
            y += p.beta_between * user.pattern_between[k] + p.beta_within * week.pattern_within[k];
        }
    }
    y
}

/// Recompute noiseless outcomes and noise from the manifest and seed.
pub fn fill_outcomes(truth: &mut GroundTruth) {
    let cfg = &truth.config;
    let mut rng = rng_stream(cfg.seed, STREAM_OUTCOME_NOISE);
    let noise = Normal::new(0.0, cfg.noise_sd.max(f64::MIN_POSITIVE)).expect("finite sd");
    let by_user: BTreeMap<&str, &UserTruth> = truth.users.iter().map(|u| (u.user_id.as_str(), u)).collect();
    let mut filled = Vec::with_capacity(truth.weeks.len());
    for wk in &truth.weeks {
        let u = by_user[wk.user_id.as_str()];
        let outcomes = Outcome::ALL
            .iter()
            .map(|&o| {
                let (lo, hi) = o.range();
                let noiseless = noiseless_outcome(truth, u, wk, o);
                let e = if cfg.noise_sd > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                let raw = (noiseless + e).round();
                OutcomeTruth {
                    outcome: o,
                    noiseless,
                    noise: e,
                    emitted: raw.clamp(lo, hi) as u32,
                    clipped: raw < lo || raw > hi,
                }
            })
            .collect();
        filled.push(outcomes);
    }
    for (wk, o) in truth.weeks.iter_mut().zip(filled) {
        wk.outcomes = o;
    }
}

/// Surveys with items back-filled from the emitted totals.
pub fn surveys_from_truth(truth: &GroundTruth) -> Vec<RawSurvey> {
    truth
        .weeks
        .iter()
        .map(|wk| {
            let items = |o: Outcome| {
                let t = wk.outcomes.iter().find(|x| x.outcome == o).expect("all outcomes");
                backfill_items(o, t.emitted)
            };
            let s = items(Outcome::Sleep);
            let p = items(Outcome::Stress);
            let l = items(Outcome::Loneliness);
            RawSurvey {
                user_id: wk.user_id.clone(),
                survey_ts_ms: wk.survey_ts_ms,
                sleep: [Some(s[0]), Some(s[1]), Some(s[2]), Some(s[3])],
                stress: [Some(p[0]), Some(p[1]), Some(p[2]), Some(p[3])],
                loneliness: [Some(l[0]), Some(l[1]), Some(l[2])],
            }
        })
        .collect()
}

pub const FLOWS_FILE: &str = "flows.csv";
pub const SURVEYS_FILE: &str = "surveys.csv";
pub const HOSTS_FILE: &str = "hosts.csv";
pub const APPS_FILE: &str = "apps.csv";
pub const TRUTH_FILE: &str = "truth.json";

/// Write the cohort files into `dir`; returns the written paths.
pub fn write_cohort(dir: &Path, cohort: &Cohort) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let paths: Vec<_> = [FLOWS_FILE, SURVEYS_FILE, HOSTS_FILE, APPS_FILE, TRUTH_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_flow_records(BufWriter::new(File::create(&paths[0])?), &cohort.flows)?;
    write_surveys_csv(BufWriter::new(File::create(&paths[1])?), &cohort.surveys)?;
    cohort.dictionary.write(
        BufWriter::new(File::create(&paths[2])?),
        BufWriter::new(File::create(&paths[3])?),
    )?;
    let mut w = BufWriter::new(File::create(&paths[4])?);
    serde_json::to_writer_pretty(&mut w, &cohort.truth)?;
    w.flush()?;
    Ok(paths)
}

pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    let truth: GroundTruth = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
    if truth.version != TRUTH_VERSION {
        return Err(Error::Config(format!(
            "truth manifest version {} unsupported",
            truth.version
        )));
    }
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::{build_features, build_windows, is_eligible};
    use crate::ingest::aggregate_hourly_from_flows;
    use crate::stats::score_surveys;

    fn small() -> SynthConfig {
        SynthConfig {
            n_users: 4,
            weeks: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_cohort(&small()).unwrap();
        let b = generate_cohort(&small()).unwrap();
        assert_eq!(a.flows, b.flows);
        assert_eq!(a.surveys, b.surveys);
        let dir = tempfile::tempdir().unwrap();
        let pa = write_cohort(&dir.path().join("a"), &a).unwrap();
        let pb = write_cohort(&dir.path().join("b"), &b).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let c = generate_cohort(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.flows, c.flows);
    }

    #[test]
    fn full_coverage_without_dropout() {
        let cfg = small();
        let cohort = generate_cohort(&cfg).unwrap();
        let hourly = aggregate_hourly_from_flows(&cohort.flows, &cohort.dictionary, cfg.tz_offset_minutes);
        assert_eq!(hourly.len(), cfg.n_users * cfg.weeks * 168);
        for u in build_features(&hourly) {
            assert!(is_eligible(&build_windows(&u)));
        }
    }

    #[test]
    fn dropout_creates_gaps() {
        let cfg = SynthConfig {
            dropout_rate: 0.3,
            ..small()
        };
        let cohort = generate_cohort(&cfg).unwrap();
        let hourly = aggregate_hourly_from_flows(&cohort.flows, &cohort.dictionary, cfg.tz_offset_minutes);
        assert!(!cohort.truth.gaps.is_empty());
        assert!(hourly.len() < cfg.n_users * cfg.weeks * 168);
    }

    #[test]
    fn manifest_reproduces_surveys() {
        let cohort = generate_cohort(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_cohort(dir.path(), &cohort).unwrap();
        let mut truth = read_truth(&dir.path().join(TRUTH_FILE)).unwrap();
        for w in &mut truth.weeks {
            w.outcomes.clear();
        }
        fill_outcomes(&mut truth);
        assert_eq!(surveys_from_truth(&truth), cohort.surveys);
        for (s, w) in cohort.surveys.iter().zip(&cohort.truth.weeks) {
            let scored = score_surveys(s);
            for o in &w.outcomes {
                assert_eq!(scored.get(o.outcome), Some(f64::from(o.emitted)));
            }
        }
    }

    #[test]
    fn noiseless_within_effect_is_monotone() {
        let mut cfg = small();
        cfg.noise_sd = 0.0;
        cfg.user_sd = 0.0;
        cfg.weeks = 5;
        cfg.patterns.truncate(1);
        cfg.patterns[0].between_sd = 0.0;
        cfg.patterns[0].within_sd = 0.1;
        cfg.patterns[0].beta_between = 0.0;
        cfg.patterns[0].beta_within = 1.0;
        let truth = generate_cohort(&cfg).unwrap().truth;
        for u in &truth.users {
            let mut wk: Vec<&WeekTruth> = truth.weeks.iter().filter(|w| w.user_id == u.user_id).collect();
            wk.sort_by(|a, b| a.pattern_within[0].total_cmp(&b.pattern_within[0]));
            for pair in wk.windows(2) {
                let y = |w: &WeekTruth| {
                    w.outcomes
                        .iter()
                        .find(|o| o.outcome == Outcome::Stress)
                        .unwrap()
                        .clone()
                };
                assert!(y(pair[0]).noiseless < y(pair[1]).noiseless);
                assert!(y(pair[0]).emitted <= y(pair[1]).emitted);
            }
        }
    }

    #[test]
    fn planted_category_is_visible() {
        let cfg = small();
        let cohort = generate_cohort(&cfg).unwrap();
        let hourly = aggregate_hourly_from_flows(&cohort.flows, &cohort.dictionary, cfg.tz_offset_minutes);
        let frac: BTreeMap<(String, LocalHour), [f64; 5]> = hourly
            .iter()
            .map(|h| {
                (
                    (h.user_id.clone(), h.local_hour),
                    crate::featurize::category_fractions(h),
                )
            })
            .collect();
        for (k, p) in cfg.patterns.iter().enumerate() {
            let c = MODEL_CATEGORIES.iter().position(|x| *x == p.category).unwrap();
            let population = frac.values().map(|f| f[c]).sum::<f64>() / frac.len() as f64;
            let hits: Vec<f64> = cohort
                .truth
                .planted
                .iter()
                .filter(|h| h.pattern == k)
                .map(|h| frac[&(h.user_id.clone(), h.local_hour)][c])
                .collect();
            assert!(!hits.is_empty());
            let planted_mean = hits.iter().sum::<f64>() / hits.len() as f64;
            assert!(hits.iter().all(|&f| f >= p.share - 0.02), "{}", p.name);
            assert!(
                planted_mean > 1.5 * population,
                "{}: {planted_mean} vs {population}",
                p.name
            );
        }
    }

    #[test]
    fn intensities_are_standardized() {
        let truth = generate_cohort(&SynthConfig {
            n_users: 6,
            weeks: 4,
            ..SynthConfig::default()
        })
        .unwrap()
        .truth;
        let z: Vec<f64> = truth.users.iter().map(|u| u.pattern_between[0]).collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 1e-12);
        for u in &truth.users {
            let s: f64 = truth
                .weeks
                .iter()
                .filter(|w| w.user_id == u.user_id)
                .map(|w| w.pattern_within[1])
                .sum();
            assert!(s.abs() < 1e-9);
        }
    }

    #[test]
    fn infeasible_configs_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.patterns[0].beta_between = 6.0;
        assert!(generate_cohort(&cfg).is_err());
        let mut cfg = SynthConfig::default();
        cfg.patterns.clear();
        cfg.dropout_rate = 1.5;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("planted pattern") && err.contains("dropout_rate"));
        let mut cfg = SynthConfig::default();
        cfg.patterns[0].category = "system".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn surveys_close_each_week() {
        let cfg = small();
        let cohort = generate_cohort(&cfg).unwrap();
        let first = cfg.first_hour().unwrap();
        assert_eq!(first.weekday(), 0);
        let ts = cohort.surveys[0].survey_ts_ms;
        assert_eq!(LocalHour::from_utc_ms(ts, cfg.tz_offset_minutes).0 - first.0, 168);
    }
}
