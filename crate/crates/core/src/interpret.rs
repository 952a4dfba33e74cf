//! Feature selection and labeling: cross-user generality, category and
//! time-band labels, threshold stability, foreground composition and
//! perturbation checks through the SAE decoder and prediction head.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ingest::{Dictionary, HourlyTraffic, MODEL_CATEGORIES, SYSTEM_CATEGORY};
use crate::sae::{ActivationTable, SaeParams, SparseCode};
use crate::time::LocalHour;

pub const N_CATEGORIES: usize = MODEL_CATEGORIES.len();
pub const HI_GRID: [f64; 7] = [1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 2.0];
pub const LO_GRID: [f64; 5] = [0.60, 0.65, 0.70, 0.75, 0.80];
/// Top-N sets smaller than this are flagged as noisy.
pub const MIN_TOP_WARN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpretConfig {
    pub generality_top_n: usize,
    pub participant_fraction: f64,
    pub label_top_n: usize,
    pub hi: f64,
    pub lo: f64,
    pub perturb_sigmas: f64,
    pub reference_codes: usize,
    pub seed: u64,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        InterpretConfig {
            generality_top_n: 50,
            participant_fraction: 0.40,
            label_top_n: 100,
            hi: 1.5,
            lo: 0.7,
            perturb_sigmas: 5.0,
            reference_codes: 256,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    High,
    Low,
    Neutral,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::High => "high",
            Label::Low => "low",
            Label::Neutral => "neutral",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeBand {
    Night,
    Morning,
    Midday,
    Afternoon,
    Evening,
}

impl TimeBand {
    pub const ALL: [TimeBand; 5] = [
        TimeBand::Night,
        TimeBand::Morning,
        TimeBand::Midday,
        TimeBand::Afternoon,
        TimeBand::Evening,
    ];

    /// night 23–04, morning 05–09, midday 10–13, afternoon 14–17, evening 18–22
    pub fn of_hour(hour: u8) -> TimeBand {
        match hour {
            5..=9 => TimeBand::Morning,
            10..=13 => TimeBand::Midday,
            14..=17 => TimeBand::Afternoon,
            18..=22 => TimeBand::Evening,
            _ => TimeBand::Night,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TimeBand::Night => "night",
            TimeBand::Morning => "morning",
            TimeBand::Midday => "midday",
            TimeBand::Afternoon => "afternoon",
            TimeBand::Evening => "evening",
        }
    }
}

/// One activation of a feature at a (user, hour).
#[derive(Debug, Clone, PartialEq)]
pub struct TopHour {
    pub user_id: String,
    pub local_hour: LocalHour,
    pub value: f32,
}

/// Activations of every feature sorted by value (descending), ties by
/// (user, hour) ascending.
pub fn ranked_activations(table: &ActivationTable) -> Vec<Vec<TopHour>> {
    let mut per: Vec<Vec<TopHour>> = vec![Vec::new(); table.n_features];
    for r in &table.rows {
        if r.value > 0.0 {
            per[r.feature as usize].push(TopHour {
                user_id: r.user_id.clone(),
                local_hour: r.local_hour,
                value: r.value,
            });
        }
    }
    for list in &mut per {
        list.sort_by(|a, b| {
            b.value
                .total_cmp(&a.value)
                .then_with(|| a.user_id.cmp(&b.user_id))
                .then(a.local_hour.cmp(&b.local_hour))
        });
    }
    per
}

/// Smallest participant count satisfying the fraction, i.e. ceil(fraction·P).
pub fn participant_threshold(fraction: f64, n_participants: usize) -> usize {
    ((fraction * n_participants as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Features whose top-N hours span at least ceil(fraction·P) participants.
pub fn generality_filter(ranked: &[Vec<TopHour>], n_participants: usize, top_n: usize, fraction: f64) -> Vec<usize> {
    let need = participant_threshold(fraction, n_participants).max(1);
    ranked
        .iter()
        .enumerate()
        .filter(|(_, list)| {
            let users: BTreeSet<&str> = list.iter().take(top_n).map(|t| t.user_id.as_str()).collect();
            users.len() >= need
        })
        .map(|(f, _)| f)
        .collect()
}

/// Per-hour context used for labeling and foreground composition.
#[derive(Debug, Clone, Default)]
pub struct HourContext {
    pub frac: BTreeMap<(String, LocalHour), [f64; N_CATEGORIES]>,
    pub traffic: BTreeMap<(String, LocalHour), HourlyTraffic>,
}

impl HourContext {
    pub fn from_traffic(hourly: &[HourlyTraffic]) -> Self {
        let mut c = HourContext::default();
        for h in hourly {
            let key = (h.user_id.clone(), h.local_hour);
            c.frac.insert(key.clone(), crate::featurize::category_fractions(h));
            c.traffic.insert(key, h.clone());
        }
        c
    }

    /// Corpus-wide mean category fractions over all hours.
    pub fn population_means(&self) -> [f64; N_CATEGORIES] {
        let mut m = [0.0; N_CATEGORIES];
        for f in self.frac.values() {
            for (a, b) in m.iter_mut().zip(f) {
                *a += b;
            }
        }
        let n = self.frac.len().max(1) as f64;
        m.map(|v| v / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub hi: f64,
    pub lo: f64,
}

pub fn label_value(mean: f64, population: f64, t: Thresholds) -> Label {
    if population <= 0.0 {
        Label::Neutral
    } else if mean > t.hi * population {
        Label::High
    } else if mean < t.lo * population {
        Label::Low
    } else {
        Label::Neutral
    }
}

/// System is never labeled.
pub fn label_categories(
    means: &[f64; N_CATEGORIES],
    population: &[f64; N_CATEGORIES],
    t: Thresholds,
) -> [Label; N_CATEGORIES] {
    let mut out = [Label::Neutral; N_CATEGORIES];
    for (i, cat) in MODEL_CATEGORIES.iter().enumerate() {
        if *cat != SYSTEM_CATEGORY {
            out[i] = label_value(means[i], population[i], t);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct FeatureLabels {
    pub category_means: [f64; N_CATEGORIES],
    pub labels: [Label; N_CATEGORIES],
    /// Categories left neutral because their population mean is 0.
    pub zero_population: Vec<String>,
    pub band: TimeBand,
    pub band_counts: [usize; 5],
    pub n_top: usize,
    pub few_activations: bool,
}

/// Band with the most top hours; ties go to the earlier band in
/// night, morning, midday, afternoon, evening order.
pub fn dominant_band(hours: impl IntoIterator<Item = u8>) -> (TimeBand, [usize; 5]) {
    let mut counts = [0usize; 5];
    for h in hours {
        counts[TimeBand::of_hour(h) as usize] += 1;
    }
    let mut best = 0;
    for i in 1..5 {
        if counts[i] > counts[best] {
            best = i;
        }
    }
    (TimeBand::ALL[best], counts)
}

pub fn label_feature(
    top: &[TopHour],
    ctx: &HourContext,
    population: &[f64; N_CATEGORIES],
    t: Thresholds,
) -> FeatureLabels {
    let mut means = [0.0; N_CATEGORIES];
    let mut n = 0usize;
    for h in top {
        if let Some(f) = ctx.frac.get(&(h.user_id.clone(), h.local_hour)) {
            for (a, b) in means.iter_mut().zip(f) {
                *a += b;
            }
            n += 1;
        }
    }
    if n > 0 {
        means.iter_mut().for_each(|m| *m /= n as f64);
    }
    let zero_population = MODEL_CATEGORIES
        .iter()
        .zip(population)
        .filter(|(c, &p)| **c != SYSTEM_CATEGORY && p <= 0.0)
        .map(|(c, _)| c.to_string())
        .collect();
    let (band, band_counts) = dominant_band(top.iter().map(|h| h.local_hour.hour_of_day()));
    FeatureLabels {
        category_means: means,
        labels: label_categories(&means, population, t),
        zero_population,
        band,
        band_counts,
        n_top: top.len(),
        few_activations: top.len() < MIN_TOP_WARN,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub hi: f64,
    pub lo: f64,
    pub unchanged: usize,
    pub changed: usize,
    pub total: usize,
    pub fraction_unchanged: f64,
    /// Cells whose label went directly between high and low.
    pub flips: usize,
}

/// Stability of (feature, category) labels relative to `canonical`,
/// counting all five categories per feature (system is always neutral).
pub fn label_threshold_sweep(
    features: &[FeatureLabels],
    population: &[f64; N_CATEGORIES],
    canonical: Thresholds,
    his: &[f64],
    los: &[f64],
) -> Vec<SweepRow> {
    let base: Vec<[Label; N_CATEGORIES]> = features
        .iter()
        .map(|f| label_categories(&f.category_means, population, canonical))
        .collect();
    let mut rows = Vec::new();
    for &hi in his {
        for &lo in los {
            let t = Thresholds { hi, lo };
            let (mut unchanged, mut flips, mut total) = (0, 0, 0);
            for (f, b) in features.iter().zip(&base) {
                let l = label_categories(&f.category_means, population, t);
                for (x, y) in l.iter().zip(b) {
                    total += 1;
                    if x == y {
                        unchanged += 1;
                    } else if matches!((x, y), (Label::High, Label::Low) | (Label::Low, Label::High)) {
                        flips += 1;
                    }
                }
            }
            rows.push(SweepRow {
                hi,
                lo,
                unchanged,
                changed: total - unchanged,
                total,
                fraction_unchanged: if total == 0 {
                    1.0
                } else {
                    unchanged as f64 / total as f64
                },
                flips,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Foreground {
    pub total_bytes: u64,
    pub foreground_bytes: u64,
    pub foreground_pct: f64,
    /// (application, share of foreground bytes), largest first.
    pub apps: Vec<(String, f64)>,
}

fn is_foreground(category: &str) -> bool {
    category != SYSTEM_CATEGORY && MODEL_CATEGORIES.contains(&category)
}

/// Foreground = bytes of applications in non-system model categories.
pub fn foreground_composition(top: &[TopHour], ctx: &HourContext, dict: &Dictionary) -> Foreground {
    let mut total = 0u64;
    let mut apps: BTreeMap<String, u64> = BTreeMap::new();
    for h in top {
        let Some(t) = ctx.traffic.get(&(h.user_id.clone(), h.local_hour)) else {
            continue;
        };
        total += t.total_bytes;
        for (app, &b) in &t.app_bytes {
            if dict.category_of_app(app).is_some_and(is_foreground) {
                *apps.entry(app.clone()).or_default() += b;
            }
        }
    }
    let fg: u64 = apps.values().sum();
    let mut ranked: Vec<(String, f64)> = apps.into_iter().map(|(a, b)| (a, b as f64 / fg as f64)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Foreground {
        total_bytes: total,
        foreground_bytes: fg,
        foreground_pct: if total == 0 {
            0.0
        } else {
            100.0 * fg as f64 / total as f64
        },
        apps: if fg == 0 { Vec::new() } else { ranked },
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Perturbation {
    pub sigma: f64,
    /// Mean change of each head output dimension.
    pub delta: Vec<f64>,
    /// `None` when σ = 0 or no category is labeled high or low.
    pub pass: Option<bool>,
}

/// Raise feature `f` by `multiplier·σ` in each reference code, decode and
/// map through the head; compare category directions with the labels.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_test(
    f: usize,
    sigma: f64,
    multiplier: f64,
    sae: &SaeParams,
    w_head: &Array2<f32>,
    b_head: &Array1<f32>,
    reference: &[SparseCode],
    labels: &[Label; N_CATEGORIES],
) -> Perturbation {
    let out_dim = w_head.ncols();
    let mut delta = vec![0.0f64; out_dim];
    let bump = (multiplier * sigma) as f32;
    for code in reference {
        let base = sae.decode(code).dot(w_head) + b_head;
        let mut raised = code.clone();
        match raised.indices.iter().position(|&i| i as usize == f) {
            Some(pos) => raised.values[pos] += bump,
            None => {
                raised.indices.push(f as u32);
                raised.values.push(bump);
            }
        }
        let moved = sae.decode(&raised).dot(w_head) + b_head;
        for (d, (a, b)) in delta.iter_mut().zip(moved.iter().zip(base.iter())) {
            *d += (*a - *b) as f64;
        }
    }
    let n = reference.len().max(1) as f64;
    delta.iter_mut().for_each(|d| *d /= n);
    let labeled = labels.iter().any(|l| *l != Label::Neutral);
    let pass = (sigma > 0.0 && labeled && !reference.is_empty()).then(|| {
        labels.iter().enumerate().all(|(i, l)| match l {
            Label::High => delta[i] > 0.0,
            Label::Low => delta[i] < 0.0,
            Label::Neutral => true,
        })
    });
    Perturbation { sigma, delta, pass }
}

/// Sample SD of a feature's activation over all `n_hours` corpus hours
/// (hours where it is inactive count as 0).
pub fn activation_sd(values: &[f32], n_hours: usize) -> f64 {
    if n_hours < 2 {
        return 0.0;
    }
    let n = n_hours as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let ss: f64 =
        values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() + (n - values.len() as f64) * mean * mean;
    (ss / (n - 1.0)).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct FeatureReport {
    pub feature: usize,
    pub n_active_hours: usize,
    pub participants_in_top: usize,
    pub labels: FeatureLabels,
    pub foreground: Foreground,
    pub perturbation: Perturbation,
}

#[derive(Debug, Clone, Serialize)]
pub struct InterpretResult {
    pub n_participants: usize,
    pub participant_threshold: usize,
    pub active_features: usize,
    pub retained: Vec<usize>,
    pub population_means: [f64; N_CATEGORIES],
    pub reports: Vec<FeatureReport>,
    pub sweep: Vec<SweepRow>,
}

/// Group the table into one code per (user, hour) of the context.
fn codes_by_hour(table: &ActivationTable, ctx: &HourContext) -> Vec<SparseCode> {
    let mut map: BTreeMap<(&str, LocalHour), SparseCode> = BTreeMap::new();
    for (u, h) in ctx.frac.keys() {
        map.insert((u.as_str(), *h), SparseCode::default());
    }
    for r in &table.rows {
        if let Some(c) = map.get_mut(&(r.user_id.as_str(), r.local_hour)) {
            c.indices.push(r.feature);
            c.values.push(r.value);
        }
    }
    map.into_values()
        .map(|mut c| {
            let mut pairs: Vec<(u32, f32)> = c.indices.iter().copied().zip(c.values.iter().copied()).collect();
            pairs.sort_by_key(|p| p.0);
            c.indices = pairs.iter().map(|p| p.0).collect();
            c.values = pairs.iter().map(|p| p.1).collect();
            c
        })
        .collect()
}

/// Full interpretation pass. `ctx` must cover the hours of `table`.
pub fn interpret(
    table: &ActivationTable,
    ctx: &HourContext,
    dict: &Dictionary,
    sae: &SaeParams,
    w_head: &Array2<f32>,
    b_head: &Array1<f32>,
    cfg: &InterpretConfig,
) -> InterpretResult {
    let ranked = ranked_activations(table);
    let participants: BTreeSet<&str> = ctx.frac.keys().map(|(u, _)| u.as_str()).collect();
    let n_participants = participants.len();
    let retained = generality_filter(&ranked, n_participants, cfg.generality_top_n, cfg.participant_fraction);
    let population = ctx.population_means();
    let t = Thresholds { hi: cfg.hi, lo: cfg.lo };
    let all_codes = codes_by_hour(table, ctx);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let reference: Vec<SparseCode> = all_codes
        .choose_multiple(&mut rng, cfg.reference_codes)
        .cloned()
        .collect();
    let n_hours = ctx.frac.len();
    let reports: Vec<FeatureReport> = retained
        .iter()
        .map(|&f| {
            let top: Vec<TopHour> = ranked[f].iter().take(cfg.label_top_n).cloned().collect();
            let labels = label_feature(&top, ctx, &population, t);
            let values: Vec<f32> = ranked[f].iter().map(|h| h.value).collect();
            let sigma = activation_sd(&values, n_hours);
            let perturbation = perturbation_test(
                f,
                sigma,
                cfg.perturb_sigmas,
                sae,
                w_head,
                b_head,
                &reference,
                &labels.labels,
            );
            let users: BTreeSet<&str> = ranked[f]
                .iter()
                .take(cfg.generality_top_n)
                .map(|h| h.user_id.as_str())
                .collect();
            FeatureReport {
                feature: f,
                n_active_hours: ranked[f].len(),
                participants_in_top: users.len(),
                foreground: foreground_composition(&top, ctx, dict),
                labels,
                perturbation,
            }
        })
        .collect();
    let labels: Vec<FeatureLabels> = reports.iter().map(|r| r.labels.clone()).collect();
    let sweep = label_threshold_sweep(&labels, &population, t, &HI_GRID, &LO_GRID);
    InterpretResult {
        n_participants,
        participant_threshold: participant_threshold(cfg.participant_fraction, n_participants),
        active_features: ranked.iter().filter(|l| !l.is_empty()).count(),
        retained,
        population_means: population,
        reports,
        sweep,
    }
}

pub fn write_report_csv<W: Write>(out: W, res: &InterpretResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = vec![
        "feature".into(),
        "n_active_hours".into(),
        "participants_in_top".into(),
        "n_top".into(),
    ];
    for c in MODEL_CATEGORIES {
        header.push(format!("mean_{c}"));
        header.push(format!("label_{c}"));
    }
    header.extend(["band", "foreground_pct", "top_apps", "sigma", "perturbation_pass"].map(String::from));
    w.write_record(&header)?;
    for r in &res.reports {
        let mut rec = vec![
            r.feature.to_string(),
            r.n_active_hours.to_string(),
            r.participants_in_top.to_string(),
            r.labels.n_top.to_string(),
        ];
        for (m, l) in r.labels.category_means.iter().zip(&r.labels.labels) {
            rec.push(m.to_string());
            rec.push(l.name().to_string());
        }
        rec.push(r.labels.band.name().to_string());
        rec.push(r.foreground.foreground_pct.to_string());
        rec.push(
            r.foreground
                .apps
                .iter()
                .take(5)
                .map(|(a, s)| format!("{a}:{:.3}", s))
                .collect::<Vec<_>>()
                .join(";"),
        );
        rec.push(r.perturbation.sigma.to_string());
        rec.push(
            r.perturbation
                .pass
                .map_or("inconclusive".to_string(), |p| p.to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "hi",
        "lo",
        "unchanged",
        "changed",
        "total",
        "fraction_unchanged",
        "flips",
    ])?;
    for r in rows {
        w.write_record([
            r.hi.to_string(),
            r.lo.to_string(),
            r.unchanged.to_string(),
            r.changed.to_string(),
            r.total.to_string(),
            r.fraction_unchanged.to_string(),
            r.flips.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn render_text(res: &InterpretResult) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} active features, {} retained (top-hour sets spanning ≥{} of {} participants)\n",
        res.active_features,
        res.retained.len(),
        res.participant_threshold,
        res.n_participants
    );
    for r in &res.reports {
        let labeled: Vec<String> = MODEL_CATEGORIES
            .iter()
            .zip(&r.labels.labels)
            .filter(|(_, l)| **l != Label::Neutral)
            .map(|(c, l)| format!("{c} {}", l.name()))
            .collect();
        let _ = writeln!(
            s,
            "feature {:>4}  band {:<9}  {}",
            r.feature,
            r.labels.band.name(),
            if labeled.is_empty() {
                "no category labels".to_string()
            } else {
                labeled.join(", ")
            }
        );
        let apps: Vec<String> = r
            .foreground
            .apps
            .iter()
            .take(3)
            .map(|(a, v)| format!("{a} {:.0}%", 100.0 * v))
            .collect();
        let _ = writeln!(
            s,
            "              foreground {:.1}%  {}",
            r.foreground.foreground_pct,
            apps.join(", ")
        );
        let verdict = match r.perturbation.pass {
            Some(true) => "consistent",
            Some(false) => "inconsistent",
            None => "inconclusive",
        };
        let _ = writeln!(
            s,
            "              perturbation {verdict} (σ = {:.4})",
            r.perturbation.sigma
        );
        if r.labels.few_activations {
            let _ = writeln!(s, "              note: only {} activating hours", r.labels.n_top);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::ActivationRow;
    use proptest::prelude::*;

    fn row(u: &str, h: i64, f: u32, v: f32) -> ActivationRow {
        ActivationRow {
            user_id: u.into(),
            local_hour: LocalHour(h),
            feature: f,
            value: v,
        }
    }

    #[test]
    fn threshold_for_25_participants() {
        assert_eq!(participant_threshold(0.4, 25), 10);
        assert_eq!(participant_threshold(0.4, 10), 4);
        assert_eq!(participant_threshold(0.4, 11), 5);
    }

    #[test]
    fn generality_examples() {
        let mut rows = Vec::new();
        for h in 0..60 {
            rows.push(row("a", h, 0, 1.0 + h as f32));
            rows.push(row(["a", "b", "c", "d", "e"][h as usize % 5], h, 1, 1.0));
        }
        let table = ActivationTable { n_features: 3, rows };
        let ranked = ranked_activations(&table);
        assert_eq!(generality_filter(&ranked, 5, 50, 0.4), vec![1]);
    }

    proptest! {
        #[test]
        fn generality_monotone(users in proptest::collection::vec(0usize..8, 1..120), lo in 0.05f64..0.5) {
            let rows: Vec<_> = users.iter().enumerate().map(|(i, &u)| row(&format!("u{u}"), i as i64, (i % 4) as u32, 1.0 + (i % 7) as f32)).collect();
            let ranked = ranked_activations(&ActivationTable { n_features: 4, rows });
            let strict = generality_filter(&ranked, 8, 50, lo + 0.3);
            let loose = generality_filter(&ranked, 8, 50, lo);
            for f in strict {
                prop_assert!(loose.contains(&f));
            }
        }

        #[test]
        fn sweep_has_no_direct_flips(means in proptest::collection::vec(proptest::array::uniform5(0.0f64..1.0), 1..30), pop in proptest::array::uniform5(0.01f64..0.5)) {
            let feats: Vec<FeatureLabels> = means.iter().map(|m| FeatureLabels {
                category_means: *m,
                labels: [Label::Neutral; 5],
                zero_population: vec![],
                band: TimeBand::Night,
                band_counts: [0; 5],
                n_top: 100,
                few_activations: false,
            }).collect();
            let rows = label_threshold_sweep(&feats, &pop, Thresholds { hi: 1.5, lo: 0.7 }, &HI_GRID, &LO_GRID);
            prop_assert_eq!(rows.len(), 35);
            for r in &rows {
                prop_assert_eq!(r.flips, 0);
                prop_assert_eq!(r.unchanged + r.changed, r.total);
                prop_assert_eq!(r.total, feats.len() * 5);
            }
            let canon = rows.iter().find(|r| r.hi == 1.5 && r.lo == 0.7).unwrap();
            prop_assert_eq!(canon.fraction_unchanged, 1.0);
        }
    }

    #[test]
    fn labeling_examples() {
        let t = Thresholds { hi: 1.5, lo: 0.7 };
        assert_eq!(label_value(1.0, 0.2, t), Label::High);
        assert_eq!(label_value(0.2, 0.2, t), Label::Neutral);
        assert_eq!(label_value(0.1, 0.2, t), Label::Low);
        assert_eq!(label_value(0.5, 0.0, t), Label::Neutral);
        let labels = label_categories(&[1.0, 0.0, 0.2, 0.2, 1.0], &[0.2; 5], t);
        assert_eq!(
            labels,
            [Label::High, Label::Low, Label::Neutral, Label::Neutral, Label::Neutral]
        );
    }

    #[test]
    fn midday_band() {
        let (band, counts) = dominant_band([10u8, 11, 12, 13, 10]);
        assert_eq!(band, TimeBand::Midday);
        assert_eq!(counts[2], 5);
        assert_eq!(TimeBand::of_hour(23), TimeBand::Night);
        assert_eq!(TimeBand::of_hour(4), TimeBand::Night);
        assert_eq!(TimeBand::of_hour(5), TimeBand::Morning);
        assert_eq!(TimeBand::of_hour(22), TimeBand::Evening);
        // tie between night and evening resolves to night
        assert_eq!(dominant_band([0u8, 20]).0, TimeBand::Night);
    }

    fn dict() -> Dictionary {
        Dictionary::new(
            [("a.com", "AppA"), ("b.com", "AppB"), ("os.com", "OS")].map(|(h, a)| (h.to_string(), a.to_string())),
            [("AppA", "communication"), ("AppB", "streaming"), ("OS", "system")]
                .map(|(a, c)| (a.to_string(), c.to_string())),
        )
        .unwrap()
    }

    fn traffic(user: &str, h: i64, apps: &[(&str, &str, u64)], unmapped: u64) -> HourlyTraffic {
        let mut t = HourlyTraffic {
            user_id: user.into(),
            local_hour: LocalHour(h),
            category_bytes: BTreeMap::new(),
            unmapped_bytes: unmapped,
            total_bytes: unmapped,
            flow_count: 1,
            app_bytes: BTreeMap::new(),
        };
        for (app, cat, b) in apps {
            *t.app_bytes.entry(app.to_string()).or_default() += b;
            *t.category_bytes.entry(cat.to_string()).or_default() += b;
            t.total_bytes += b;
        }
        t
    }

    fn tops(keys: &[(&str, i64)]) -> Vec<TopHour> {
        keys.iter()
            .map(|(u, h)| TopHour {
                user_id: u.to_string(),
                local_hour: LocalHour(*h),
                value: 1.0,
            })
            .collect()
    }

    #[test]
    fn foreground_examples() {
        let d = dict();
        let ctx = HourContext::from_traffic(&[
            traffic("u", 1, &[], 500),
            traffic("u", 2, &[("AppA", "communication", 300), ("AppB", "streaming", 100)], 0),
            traffic("u", 3, &[("AppB", "streaming", 50), ("OS", "system", 50)], 0),
        ]);
        let none = foreground_composition(&tops(&[("u", 1)]), &ctx, &d);
        assert_eq!(none.foreground_pct, 0.0);
        assert!(none.apps.is_empty());
        let two = foreground_composition(&tops(&[("u", 2)]), &ctx, &d);
        assert_eq!(two.apps, vec![("AppA".to_string(), 0.75), ("AppB".to_string(), 0.25)]);
        assert_eq!(two.foreground_pct, 100.0);
        let single = foreground_composition(&tops(&[("u", 3)]), &ctx, &d);
        assert_eq!(single.apps, vec![("AppB".to_string(), 1.0)]);
        assert_eq!(single.foreground_pct, 50.0);
        assert_eq!(foreground_composition(&tops(&[("x", 9)]), &ctx, &d).foreground_pct, 0.0);
    }

    fn linear_fixture() -> (SaeParams, Array2<f32>, Array1<f32>) {
        let d = 4;
        let mut w_d = Array2::zeros((d, 3));
        w_d[(0, 0)] = 1.0;
        w_d[(1, 1)] = 1.0;
        w_d[(2, 2)] = 1.0;
        let sae = SaeParams {
            w_e: w_d.t().as_standard_layout().into_owned(),
            w_d,
            b_pre: Array1::zeros(d),
            b_post: Array1::from_vec(vec![0.1, 0.2, 0.3, 0.4]),
            k: 2,
        };
        // latent dim 0 drives communication up and streaming down
        let mut w_head = Array2::zeros((d, 8));
        w_head[(0, 0)] = 2.0;
        w_head[(0, 2)] = -1.0;
        (sae, w_head, Array1::from_elem(8, 0.5))
    }

    #[test]
    fn perturbation_examples() {
        let (sae, w, b) = linear_fixture();
        let reference = vec![
            SparseCode::default(),
            SparseCode {
                indices: vec![0, 2],
                values: vec![0.5, 1.0],
            },
        ];
        let mut labels = [Label::Neutral; 5];
        labels[0] = Label::High;
        labels[2] = Label::Low;
        let p = perturbation_test(0, 0.2, 5.0, &sae, &w, &b, &reference, &labels);
        assert!((p.delta[0] - 2.0).abs() < 1e-6);
        assert!((p.delta[2] + 1.0).abs() < 1e-6);
        assert_eq!(p.pass, Some(true));
        let zero = perturbation_test(0, 0.2, 0.0, &sae, &w, &b, &reference, &labels);
        assert!(zero.delta.iter().all(|&d| d == 0.0));
        let double = perturbation_test(0, 0.2, 10.0, &sae, &w, &b, &reference, &labels);
        for (a, b) in double.delta.iter().zip(&p.delta) {
            assert!((a - 2.0 * b).abs() < 1e-6);
        }
        assert_eq!(
            perturbation_test(0, 0.0, 5.0, &sae, &w, &b, &reference, &labels).pass,
            None
        );
        labels[0] = Label::Low;
        assert_eq!(
            perturbation_test(0, 0.2, 5.0, &sae, &w, &b, &reference, &labels).pass,
            Some(false)
        );
    }

    #[test]
    fn activation_sd_counts_inactive_hours() {
        let sd = activation_sd(&[2.0, 2.0], 4);
        // values 2,2,0,0: mean 1, sample var 4/3
        assert!((sd - (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_labels() {
        let d = dict();
        let mut hourly = Vec::new();
        let mut rows = Vec::new();
        for u in 0..5 {
            for h in 0..48i64 {
                let user = format!("u{u}");
                let comm = if h % 24 >= 10 && h % 24 <= 13 { 900 } else { 100 };
                hourly.push(traffic(
                    &user,
                    h,
                    &[("AppA", "communication", comm), ("AppB", "streaming", 100)],
                    0,
                ));
                if comm == 900 {
                    rows.push(row(&user, h, 1, 1.0 + (h as f32) * 0.01));
                }
                rows.push(row(&user, h, 0, 0.5));
            }
        }
        let ctx = HourContext::from_traffic(&hourly);
        let table = ActivationTable { n_features: 3, rows };
        let (sae, w, b) = linear_fixture();
        let res = interpret(&table, &ctx, &d, &sae, &w, &b, &InterpretConfig::default());
        assert_eq!(res.retained, vec![0, 1]);
        let f1 = res.reports.iter().find(|r| r.feature == 1).unwrap();
        assert_eq!(f1.labels.band, TimeBand::Midday);
        assert_eq!(f1.labels.labels[0], Label::High);
        assert_eq!(f1.labels.labels[2], Label::Low);
        assert_eq!(res.sweep.len(), 35);
        let text = render_text(&res);
        assert!(text.contains("feature    1"));
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &res).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
