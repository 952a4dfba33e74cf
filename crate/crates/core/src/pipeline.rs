//! File-based stage runner. Every stage reads its inputs from disk, writes
//! its outputs into the run's output directory and records a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::checkpoint::{read_container, write_container};
use crate::backbone::{
    adapter_delta_cosines, evaluate_adapters, extract_latents, load_backbone, param_checksum, save_adapters,
    save_backbone, train_phase1, train_phase2, Corpus,
};
use crate::classical::{write_metrics_csv, CircadianMetrics, HourlySeries, METRIC_NAMES};
use crate::config::{Manifest, RunConfig};
use crate::error::{Error, Result};
use crate::featurize::{
    build_features, build_windows, chronological_split, is_eligible, read_features_csv, write_features_csv,
    write_windows_csv, UserFeatures, UserSplit, TRAIN_FRACTION,
};
use crate::ingest::{
    aggregate_hourly, bin_10s, category_selection_report, parse_flow_records, read_hourly_apps_csv, read_hourly_csv,
    write_hourly_apps_csv, write_hourly_csv, Dictionary, HourlyTraffic,
};
use crate::interpret::{interpret, render_text, write_report_csv, write_sweep_csv, HourContext, InterpretResult};
use crate::probe::{loso_probe, summarize_latents, write_probe_csv, ProbeResult};
use crate::sae::{activation_matrix, train_sae, ActivationTable, SaeParams};
use crate::stats::weekly::week_slice;
use crate::stats::{
    analyze_panel, build_panel, read_surveys_csv, weekly_means, write_grid_csv, write_results_csv, AnalysisResults,
    Panel, Verdict,
};
use crate::synth::{generate_cohort, write_cohort, APPS_FILE, FLOWS_FILE, HOSTS_FILE, SURVEYS_FILE};
use crate::time::LocalHour;

pub const STAGES: [&str; 8] = [
    "ingest",
    "featurize",
    "classical",
    "train",
    "sae",
    "interpret",
    "stats",
    "probe",
];

pub const HOURLY: &str = "hourly.csv";
pub const HOURLY_APPS: &str = "hourly_apps.csv";
pub const CATEGORY_SELECTION: &str = "category_selection.csv";
pub const INGEST_SUMMARY: &str = "ingest_summary.json";
pub const FEATURES: &str = "features.csv";
pub const WINDOWS: &str = "windows.csv";
pub const FEATURIZE_SUMMARY: &str = "featurize_summary.json";
pub const CLASSICAL: &str = "classical.csv";
pub const BACKBONE: &str = "backbone.fst";
pub const ADAPTERS: &str = "adapters.fst";
pub const LATENTS: &str = "latents.fst";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const ADAPTER_EVAL: &str = "adapter_eval.csv";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const SAE: &str = "sae.fst";
pub const SAE_REPORT: &str = "sae_report.json";
pub const ACTIVATIONS: &str = "activations.csv";
pub const INTERPRET_CSV: &str = "interpret.csv";
pub const INTERPRET_JSON: &str = "interpret.json";
pub const INTERPRET_TXT: &str = "interpret.txt";
pub const LABEL_SWEEP: &str = "label_sweep.csv";
pub const PANEL: &str = "panel.csv";
pub const RESULTS: &str = "results.csv";
pub const VERDICT_GRID: &str = "verdict_grid.csv";
pub const STATS_REPORT: &str = "stats_report.txt";
pub const PROBE: &str = "probe.csv";

/// Prefix of SAE feature predictors in the panel.
pub const SAE_PREFIX: &str = "sae_f";

#[derive(Debug, Clone, Default)]
pub struct StageReport {
    pub stage: String,
    pub outputs: Vec<PathBuf>,
    pub manifest: PathBuf,
    /// GEE fits that hit the iteration limit; results are still written.
    pub non_converged: usize,
}

/// Run `f` on a pool with the configured number of threads.
pub fn with_threads<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

struct Inputs {
    flows: PathBuf,
    hosts: PathBuf,
    apps: PathBuf,
    surveys: PathBuf,
    producer: &'static str,
}

fn inputs(cfg: &RunConfig) -> Inputs {
    if cfg.paths.synthetic {
        let d = synth_dir(cfg);
        Inputs {
            flows: d.join(FLOWS_FILE),
            hosts: d.join(HOSTS_FILE),
            apps: d.join(APPS_FILE),
            surveys: d.join(SURVEYS_FILE),
            producer: "synth",
        }
    } else {
        Inputs {
            flows: cfg.paths.flows.clone(),
            hosts: cfg.paths.hosts.clone(),
            apps: cfg.paths.apps.clone(),
            surveys: cfg.paths.surveys.clone(),
            producer: "[paths] input files",
        }
    }
}

pub fn synth_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.output_dir.join("synth")
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.paths.output_dir.join(name)
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingStageOutput {
            stage: stage.to_string(),
            path: path.display().to_string(),
        })
    }
}

fn stage_input(cfg: &RunConfig, name: &str, stage: &str) -> Result<PathBuf> {
    let p = out(cfg, name);
    require(&p, stage)?;
    Ok(p)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn finish(stage: &str, cfg: &RunConfig, inputs: &[PathBuf], outputs: Vec<PathBuf>) -> Result<StageReport> {
    let manifest = Manifest::build(stage, cfg, inputs, &outputs)?.write(&cfg.paths.output_dir)?;
    log::info!("{stage}: wrote {} outputs", outputs.len());
    Ok(StageReport {
        stage: stage.to_string(),
        outputs,
        manifest,
        non_converged: 0,
    })
}

/// Generate the synthetic cohort into `<output_dir>/synth`.
pub fn run_synth(cfg: &RunConfig) -> Result<StageReport> {
    let mut sc = cfg.synth.clone();
    sc.tz_offset_minutes = cfg.tz_offset_minutes;
    let dir = synth_dir(cfg);
    let cohort = generate_cohort(&sc)?;
    let outputs = write_cohort(&dir, &cohort)?;
    std::fs::create_dir_all(&cfg.paths.output_dir)?;
    finish("synth", cfg, &[], outputs)
}

#[derive(Debug, Serialize)]
struct IngestSummary {
    flows: usize,
    skipped_lines: usize,
    users: usize,
    hours: usize,
    bins: usize,
    unmapped_byte_share: f64,
}

pub fn run_ingest(cfg: &RunConfig) -> Result<StageReport> {
    let inp = inputs(cfg);
    for p in [&inp.flows, &inp.hosts, &inp.apps] {
        require(p, inp.producer)?;
    }
    std::fs::create_dir_all(&cfg.paths.output_dir)?;
    let parsed = parse_flow_records(open(&inp.flows)?)?;
    if parsed.skipped > 0 {
        log::warn!("ingest: skipped {} malformed flow lines", parsed.skipped);
    }
    let dict = Dictionary::from_files(&inp.hosts, &inp.apps)?;
    let bins = bin_10s(&parsed.records);
    let hourly = aggregate_hourly(&bins, &dict, cfg.tz_offset_minutes);
    if hourly.is_empty() {
        return Err(Error::InsufficientData("no flows to aggregate".into()));
    }
    let hourly_path = out(cfg, HOURLY);
    let apps_path = out(cfg, HOURLY_APPS);
    let sel_path = out(cfg, CATEGORY_SELECTION);
    let summary_path = out(cfg, INGEST_SUMMARY);
    write_hourly_csv(create(&hourly_path)?, &hourly, dict.categories())?;
    write_hourly_apps_csv(create(&apps_path)?, &hourly)?;
    let selection = category_selection_report(&hourly, dict.categories())?;
    let mut w = csv::Writer::from_writer(create(&sel_path)?);
    for s in &selection {
        w.serialize(s)?;
    }
    w.flush()?;
    let total: u64 = hourly.iter().map(|h| h.total_bytes).sum();
    let unmapped: u64 = hourly.iter().map(|h| h.unmapped_bytes).sum();
    let mut users: Vec<&str> = hourly.iter().map(|h| h.user_id.as_str()).collect();
    users.dedup();
    write_json(
        &summary_path,
        &IngestSummary {
            flows: parsed.records.len(),
            skipped_lines: parsed.skipped,
            users: users.len(),
            hours: hourly.len(),
            bins: bins.len(),
            unmapped_byte_share: unmapped as f64 / total.max(1) as f64,
        },
    )?;
    finish(
        "ingest",
        cfg,
        &[inp.flows, inp.hosts, inp.apps],
        vec![hourly_path, apps_path, sel_path, summary_path],
    )
}

fn load_hourly(cfg: &RunConfig, with_apps: bool) -> Result<(Vec<HourlyTraffic>, Vec<PathBuf>)> {
    let p = stage_input(cfg, HOURLY, "ingest")?;
    let (mut hourly, _) = read_hourly_csv(open(&p)?)?;
    let mut used = vec![p];
    if with_apps {
        let a = stage_input(cfg, HOURLY_APPS, "ingest")?;
        read_hourly_apps_csv(open(&a)?, &mut hourly)?;
        used.push(a);
    }
    Ok((hourly, used))
}

#[derive(Debug, Serialize)]
struct FeaturizeSummary {
    users: usize,
    eligible: usize,
    excluded: Vec<(String, usize)>,
    train_windows: usize,
    test_windows: usize,
}

pub fn run_featurize(cfg: &RunConfig) -> Result<StageReport> {
    let (hourly, used) = load_hourly(cfg, false)?;
    let users = build_features(&hourly);
    let n_users = users.len();
    let mut eligible = Vec::new();
    let mut splits = Vec::new();
    let mut excluded = Vec::new();
    for u in users {
        let windows = build_windows(&u);
        if is_eligible(&windows) {
            splits.push((u.user_id.clone(), chronological_split(&windows, TRAIN_FRACTION)));
            eligible.push(u);
        } else {
            log::info!("featurize: excluding {} ({} windows)", u.user_id, windows.len());
            excluded.push((u.user_id.clone(), windows.len()));
        }
    }
    if eligible.is_empty() {
        return Err(Error::InsufficientData("no user has enough windows".into()));
    }
    let fp = out(cfg, FEATURES);
    let wp = out(cfg, WINDOWS);
    let sp = out(cfg, FEATURIZE_SUMMARY);
    write_features_csv(create(&fp)?, &eligible)?;
    write_windows_csv(create(&wp)?, &splits)?;
    write_json(
        &sp,
        &FeaturizeSummary {
            users: n_users,
            eligible: eligible.len(),
            excluded,
            train_windows: splits.iter().map(|(_, s)| s.train.len()).sum(),
            test_windows: splits.iter().map(|(_, s)| s.test.len()).sum(),
        },
    )?;
    finish("featurize", cfg, &used, vec![fp, wp, sp])
}

fn load_features(cfg: &RunConfig) -> Result<(Vec<UserFeatures>, Vec<UserSplit>, PathBuf)> {
    let p = stage_input(cfg, FEATURES, "featurize")?;
    let users = read_features_csv(open(&p)?)?;
    let splits = users
        .iter()
        .map(|u| chronological_split(&build_windows(u), TRAIN_FRACTION))
        .collect();
    Ok((users, splits, p))
}

fn surveys_path(cfg: &RunConfig) -> Result<PathBuf> {
    let inp = inputs(cfg);
    require(&inp.surveys, inp.producer)?;
    Ok(inp.surveys)
}

/// Classical metrics of the week before each survey, from the
/// rank-normalized hourly flow count.
pub fn run_classical(cfg: &RunConfig) -> Result<StageReport> {
    let (users, _, fp) = load_features(cfg)?;
    let sp = surveys_path(cfg)?;
    let surveys = read_surveys_csv(open(&sp)?)?;
    let series: BTreeMap<&str, Vec<(LocalHour, f64)>> = users
        .iter()
        .map(|u| {
            (
                u.user_id.as_str(),
                u.hours.iter().map(|h| (h.local_hour, h.activity_pct)).collect(),
            )
        })
        .collect();
    let mut rows = Vec::new();
    for s in &surveys {
        let Some(hours) = series.get(s.user_id.as_str()) else {
            continue;
        };
        let week = week_slice(hours, s.survey_ts_ms, cfg.tz_offset_minutes);
        if week.len() < crate::stats::weekly::MIN_PRESURVEY_HOURS {
            continue;
        }
        let hs = HourlySeries::new(
            week.iter().map(|(_, v)| *v).collect(),
            week.iter().map(|(h, _)| h.hour_of_day()).collect(),
            week.iter().map(|(h, _)| h.weekday()).collect(),
        )?;
        rows.push((
            s.user_id.clone(),
            s.survey_ts_ms,
            CircadianMetrics::compute(&hs),
            Vec::new(),
        ));
    }
    let cp = out(cfg, CLASSICAL);
    write_metrics_csv(create(&cp)?, &[], &rows)?;
    finish("classical", cfg, &[fp, sp], vec![cp])
}

/// (user, survey time) → metric values in `METRIC_NAMES` order.
pub type MetricTable = BTreeMap<(String, i64), Vec<Option<f64>>>;

pub fn read_metrics_csv(path: &Path) -> Result<(Vec<String>, MetricTable)> {
    let mut rd = csv::Reader::from_reader(open(path)?);
    let names: Vec<String> = rd.headers()?.iter().skip(2).map(str::to_string).collect();
    let mut table = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec?;
        let ts: i64 = rec
            .get(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::InvalidInput("metrics file: bad survey_ts_ms".into()))?;
        let vals = rec.iter().skip(2).map(|v| v.parse::<f64>().ok()).collect();
        table.insert((rec[0].to_string(), ts), vals);
    }
    Ok((names, table))
}

/// Per-user latents with their local hours.
#[derive(Debug, Clone)]
pub struct LatentSet {
    pub users: Vec<(String, Vec<LocalHour>, Array2<f32>)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LatentUser {
    user_id: String,
    hours: Vec<i64>,
}

pub fn write_latents(path: &Path, set: &LatentSet, seed: u64) -> Result<()> {
    let meta: Vec<LatentUser> = set
        .users
        .iter()
        .map(|(u, h, _)| LatentUser {
            user_id: u.clone(),
            hours: h.iter().map(|x| x.0).collect(),
        })
        .collect();
    let std_layout: Vec<Array2<f32>> = set
        .users
        .iter()
        .map(|(_, _, m)| m.as_standard_layout().into_owned())
        .collect();
    let tensors = set
        .users
        .iter()
        .zip(&std_layout)
        .map(|((u, _, m), s)| (u.clone(), m.shape().to_vec(), s.as_slice().expect("standard layout")))
        .collect();
    write_container(
        create(path)?,
        "latents",
        serde_json::Value::Null,
        seed,
        serde_json::json!({ "users": meta }),
        tensors,
    )
}

pub fn read_latents(path: &Path) -> Result<LatentSet> {
    let c = read_container(open(path)?)?;
    if c.header.kind != "latents" {
        return Err(Error::Checkpoint(format!("{} is not a latent file", path.display())));
    }
    let meta: Vec<LatentUser> = serde_json::from_value(c.header.extra["users"].clone())?;
    let mut users = Vec::with_capacity(meta.len());
    for m in meta {
        let (shape, data) = c.tensor(&m.user_id)?;
        if shape.len() != 2 || shape[0] != m.hours.len() {
            return Err(Error::Checkpoint(format!("latents of {}: bad shape", m.user_id)));
        }
        let arr = Array2::from_shape_vec((shape[0], shape[1]), data.to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        users.push((m.user_id, m.hours.into_iter().map(LocalHour).collect(), arr));
    }
    Ok(LatentSet { users })
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    phase1_epoch_losses: Vec<f64>,
    backbone_sha256: String,
    adapters: usize,
    adapters_skipped: Vec<String>,
    users_improved_by_adapter: usize,
    users_evaluated: usize,
    adapter_delta_cosine_mean: Option<f64>,
    adapter_delta_cosine_max: Option<f64>,
    adapter_delta_cosine_frac_negative: Option<f64>,
    latent_hours: usize,
}

pub fn run_train(cfg: &RunConfig) -> Result<StageReport> {
    let (users, splits, fp) = load_features(cfg)?;
    let corpus = Corpus::new(&users, &splits);
    let p1 = train_phase1(&corpus, cfg.model, &cfg.training)?;
    let p2 = train_phase2(&p1.params, &corpus, &cfg.training)?;
    let evals = evaluate_adapters(&p1.params, &p2.adapters, &corpus);

    let bp = out(cfg, BACKBONE);
    let ap = out(cfg, ADAPTERS);
    let lp = out(cfg, TRAIN_LOG);
    let ep = out(cfg, ADAPTER_EVAL);
    let latp = out(cfg, LATENTS);
    let sp = out(cfg, TRAIN_SUMMARY);
    save_backbone(&bp, &p1.params, cfg.training.seed, serde_json::to_value(cfg.training)?)?;
    save_adapters(&ap, cfg.model, &p2.adapters, cfg.training.seed)?;

    let mut w = csv::Writer::from_writer(create(&lp)?);
    w.write_record(["phase", "user_id", "epoch", "mean_loss"])?;
    for (e, l) in p1.epoch_losses.iter().enumerate() {
        w.write_record(["1", "", &(e + 1).to_string(), &l.to_string()])?;
    }
    for l in &p2.logs {
        w.write_record([
            "2",
            l.user.as_deref().unwrap_or(""),
            &l.epoch.to_string(),
            &l.mean_loss.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(&ep)?);
    for e in &evals {
        w.serialize(e)?;
    }
    w.flush()?;

    let mut set = LatentSet { users: Vec::new() };
    for (u, user) in users.iter().enumerate() {
        let starts: Vec<usize> = corpus.train[u].iter().chain(&corpus.test[u]).copied().collect();
        if starts.is_empty() {
            continue;
        }
        let l = extract_latents(&p1.params, &user.user_id, &corpus.features[u], &starts)?;
        let hours = l.hour_index.iter().map(|&i| user.hours[i].local_hour).collect();
        set.users.push((user.user_id.clone(), hours, l.latents));
    }
    write_latents(&latp, &set, cfg.training.seed)?;

    // mean adapter deltas compared on a shared sample of latents
    let probe_rows: Vec<ndarray::ArrayView2<f32>> = set
        .users
        .iter()
        .map(|(_, _, m)| m.slice(ndarray::s![..m.nrows().min(64), ..]))
        .collect();
    let cos = if probe_rows.is_empty() {
        None
    } else {
        let probe =
            ndarray::concatenate(ndarray::Axis(0), &probe_rows).map_err(|e| Error::InvalidInput(e.to_string()))?;
        adapter_delta_cosines(&p2.adapters, &probe).ok()
    };
    write_json(
        &sp,
        &TrainSummary {
            phase1_epoch_losses: p1.epoch_losses.clone(),
            backbone_sha256: param_checksum(&p1.params),
            adapters: p2.adapters.len(),
            adapters_skipped: p2.skipped.clone(),
            users_improved_by_adapter: evals.iter().filter(|e| e.loss_adapted < e.loss_backbone).count(),
            users_evaluated: evals.len(),
            adapter_delta_cosine_mean: cos.as_ref().map(|c| c.mean),
            adapter_delta_cosine_max: cos.as_ref().map(|c| c.max),
            adapter_delta_cosine_frac_negative: cos.as_ref().map(|c| c.frac_negative),
            latent_hours: set.users.iter().map(|(_, h, _)| h.len()).sum(),
        },
    )?;
    finish("train", cfg, &[fp], vec![bp, ap, lp, ep, latp, sp])
}

pub fn run_sae(cfg: &RunConfig) -> Result<StageReport> {
    let latp = stage_input(cfg, LATENTS, "train")?;
    let set = read_latents(&latp)?;
    let by_user: Vec<(String, Array2<f32>)> = set.users.iter().map(|(u, _, m)| (u.clone(), m.clone())).collect();
    let (params, report) = train_sae(&by_user, &cfg.sae)?;
    let acts = activation_matrix(&params, &set.users);
    let sp = out(cfg, SAE);
    let rp = out(cfg, SAE_REPORT);
    let ap = out(cfg, ACTIVATIONS);
    params.save(&sp, &cfg.sae, serde_json::json!({ "best_epoch": report.best_epoch }))?;
    write_json(&rp, &report)?;
    acts.write_csv(create(&ap)?)?;
    finish("sae", cfg, &[latp], vec![sp, rp, ap])
}

fn load_activations(cfg: &RunConfig) -> Result<(ActivationTable, SaeParams, Vec<PathBuf>)> {
    let sp = stage_input(cfg, SAE, "sae")?;
    let ap = stage_input(cfg, ACTIVATIONS, "sae")?;
    let (params, _) = SaeParams::load(&sp)?;
    let table = ActivationTable::read_csv(open(&ap)?, params.n_features())?;
    Ok((table, params, vec![sp, ap]))
}

pub fn run_interpret(cfg: &RunConfig) -> Result<StageReport> {
    let (table, sae, mut used) = load_activations(cfg)?;
    let latp = stage_input(cfg, LATENTS, "train")?;
    let bp = stage_input(cfg, BACKBONE, "train")?;
    let set = read_latents(&latp)?;
    let (backbone, _) = load_backbone(&bp)?;
    let (hourly, hp) = load_hourly(cfg, true)?;
    let inp = inputs(cfg);
    require(&inp.hosts, inp.producer)?;
    require(&inp.apps, inp.producer)?;
    let dict = Dictionary::from_files(&inp.hosts, &inp.apps)?;
    let covered: std::collections::BTreeSet<(&str, LocalHour)> = set
        .users
        .iter()
        .flat_map(|(u, hs, _)| hs.iter().map(move |h| (u.as_str(), *h)))
        .collect();
    let corpus_hours: Vec<HourlyTraffic> = hourly
        .into_iter()
        .filter(|h| covered.contains(&(h.user_id.as_str(), h.local_hour)))
        .collect();
    let ctx = HourContext::from_traffic(&corpus_hours);
    let res = interpret(
        &table,
        &ctx,
        &dict,
        &sae,
        &backbone.w_head,
        &backbone.b_head,
        &cfg.interpret,
    );
    for r in &res.reports {
        if r.labels.few_activations {
            log::warn!("feature {}: only {} activating hours", r.feature, r.labels.n_top);
        }
    }
    let cp = out(cfg, INTERPRET_CSV);
    let jp = out(cfg, INTERPRET_JSON);
    let tp = out(cfg, INTERPRET_TXT);
    let swp = out(cfg, LABEL_SWEEP);
    write_report_csv(create(&cp)?, &res)?;
    write_json(&jp, &res)?;
    std::fs::write(&tp, render_text(&res))?;
    write_sweep_csv(create(&swp)?, &res.sweep)?;
    used.extend([latp, bp]);
    used.extend(hp);
    used.extend([inp.hosts, inp.apps]);
    finish("interpret", cfg, &used, vec![cp, jp, tp, swp])
}

#[derive(Debug, Deserialize)]
struct RetainedOnly {
    retained: Vec<usize>,
}

pub fn read_retained(path: &Path) -> Result<Vec<usize>> {
    let r: RetainedOnly = serde_json::from_reader(open(path)?)?;
    Ok(r.retained)
}

pub fn sae_predictor_name(feature: usize) -> String {
    format!("{SAE_PREFIX}{feature:03}")
}

fn valid_hours(hourly: &[HourlyTraffic]) -> BTreeMap<String, Vec<LocalHour>> {
    let mut m: BTreeMap<String, Vec<LocalHour>> = BTreeMap::new();
    for h in hourly {
        m.entry(h.user_id.clone()).or_default().push(h.local_hour);
    }
    for v in m.values_mut() {
        v.sort_unstable();
    }
    m
}

/// Person-week panel of retained SAE features (weekly mean activation,
/// inactive hours counting as 0) and optionally the classical metrics.
pub fn build_run_panel(cfg: &RunConfig) -> Result<(Panel, Vec<PathBuf>)> {
    let sp = surveys_path(cfg)?;
    let surveys = read_surveys_csv(open(&sp)?)?;
    let (hourly, mut used) = load_hourly(cfg, false)?;
    let (table, _, aused) = load_activations(cfg)?;
    let latp = stage_input(cfg, LATENTS, "train")?;
    let ip = stage_input(cfg, INTERPRET_JSON, "interpret")?;
    let retained = read_retained(&ip)?;
    let set = read_latents(&latp)?;
    let col: BTreeMap<usize, usize> = retained.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    let dim = retained.len();
    let mut dense: BTreeMap<String, Vec<(LocalHour, Vec<f64>)>> = set
        .users
        .iter()
        .map(|(u, hs, _)| (u.clone(), hs.iter().map(|h| (*h, vec![0.0; dim])).collect()))
        .collect();
    for r in &table.rows {
        if let (Some(&j), Some(rows)) = (col.get(&(r.feature as usize)), dense.get_mut(&r.user_id)) {
            if let Ok(i) = rows.binary_search_by_key(&r.local_hour, |(h, _)| *h) {
                rows[i].1[j] = f64::from(r.value);
            }
        }
    }
    let mut names: Vec<String> = retained.iter().map(|&f| sae_predictor_name(f)).collect();
    let classical = if cfg.stats.classical_predictors {
        let cp = stage_input(cfg, CLASSICAL, "classical")?;
        let (cn, ct) = read_metrics_csv(&cp)?;
        names.extend(cn);
        used.push(cp);
        Some(ct)
    } else {
        None
    };
    let n_classical = METRIC_NAMES.len();
    let empty = Vec::new();
    let (panel, excluded) = build_panel(
        &surveys,
        &valid_hours(&hourly),
        names,
        cfg.tz_offset_minutes,
        |u, ts, week| {
            let mut v = weekly_means(dense.get(u).unwrap_or(&empty), week, dim);
            if let Some(ct) = &classical {
                match ct.get(&(u.to_string(), ts)) {
                    Some(m) => v.extend(m.iter().copied()),
                    None => v.extend(std::iter::repeat_n(None, n_classical)),
                }
            }
            v
        },
    );
    if !excluded.is_empty() {
        log::info!("stats: {} surveys excluded for low pre-survey coverage", excluded.len());
    }
    used.push(sp);
    used.extend(aused);
    used.extend([latp, ip]);
    Ok((panel, used))
}

pub fn write_panel_csv<W: Write>(out: W, panel: &Panel) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = vec!["user_id".into(), "survey_ts_ms".into(), "presurvey_hours".into()];
    header.extend(crate::stats::Outcome::ALL.iter().map(|o| o.name().to_string()));
    header.extend(panel.predictor_names.iter().cloned());
    w.write_record(&header)?;
    let f = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in &panel.rows {
        let mut rec = vec![
            r.user_id.clone(),
            r.survey_ts_ms.to_string(),
            r.presurvey_hours.to_string(),
        ];
        rec.extend(crate::stats::Outcome::ALL.iter().map(|&o| f(r.outcomes.get(o))));
        rec.extend(r.predictors.iter().map(|&v| f(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn render_stats_report(res: &AnalysisResults, panel: &Panel, cfg: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} person-weeks from {} users; {} predictors; {} pairs fitted, {} skipped",
        panel.rows.len(),
        panel.n_users(),
        panel.predictor_names.len(),
        res.pairs.len(),
        res.skipped.len()
    );
    let t = cfg.stats.analysis.thresholds;
    let _ = writeln!(
        s,
        "verdict thresholds: ΔRMSE > {}%, sign consistency > {}%\n",
        t.delta_rmse_pct, t.sign_pct
    );
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &res.pairs {
        *counts.entry(p.verdict.map_or("undefined", Verdict::name)).or_default() += 1;
    }
    for (k, v) in &counts {
        let _ = writeln!(s, "  {k:<10} {v}");
    }
    let _ = writeln!(s, "\nsignificant effects (q < 0.05):");
    let mut any = false;
    for p in &res.pairs {
        for (kind, beta, q) in [("between", p.beta_b, p.q_b), ("within", p.beta_w, p.q_w)] {
            if q < 0.05 {
                any = true;
                let louo = p.louo.as_ref().map_or(String::from("n/a"), |l| {
                    let kept = if kind == "between" {
                        l.sign_preserved_b()
                    } else {
                        l.sign_preserved_w()
                    };
                    format!("sign kept in {kept}/{} folds", l.folds.len())
                });
                let _ = writeln!(
                    s,
                    "  {:<22} {:<10} {kind:<7} β = {beta:+.3}  q = {q:.2e}  verdict {}  LOUO {louo}",
                    p.predictor,
                    p.outcome.name(),
                    p.verdict.map_or("undefined", Verdict::name)
                );
            }
        }
    }
    if !any {
        let _ = writeln!(s, "  none");
    }
    let non_conv = res.pairs.iter().filter(|p| !p.converged).count();
    if non_conv > 0 {
        let _ = writeln!(s, "\n{non_conv} fits did not converge");
    }
    s
}

pub fn run_stats(cfg: &RunConfig) -> Result<StageReport> {
    let (panel, used) = build_run_panel(cfg)?;
    if panel.rows.is_empty() {
        return Err(Error::InsufficientData("no person-weeks with enough coverage".into()));
    }
    let res = analyze_panel(&panel, &cfg.stats.outcomes, &cfg.stats.analysis);
    let pp = out(cfg, PANEL);
    let rp = out(cfg, RESULTS);
    let gp = out(cfg, VERDICT_GRID);
    let tp = out(cfg, STATS_REPORT);
    write_panel_csv(create(&pp)?, &panel)?;
    write_results_csv(create(&rp)?, &res)?;
    let grid = res.robust_grid_for(&cfg.stats.delta_grid, &cfg.stats.sign_grid);
    write_grid_csv(create(&gp)?, &grid, &cfg.stats.delta_grid, &cfg.stats.sign_grid)?;
    std::fs::write(&tp, render_stats_report(&res, &panel, cfg))?;
    let mut rep = finish("stats", cfg, &used, vec![pp, rp, gp, tp])?;
    rep.non_converged = res.pairs.iter().filter(|p| !p.converged).count();
    Ok(rep)
}

/// Probe rows: one latent summary per person-week with its classical
/// targets and subject index.
pub struct ProbeData {
    pub x: Vec<Vec<f64>>,
    pub targets: Vec<Vec<Option<f64>>>,
    pub subjects: Vec<usize>,
    pub metric_names: Vec<String>,
}

pub fn probe_data(cfg: &RunConfig) -> Result<(ProbeData, Vec<PathBuf>)> {
    let latp = stage_input(cfg, LATENTS, "train")?;
    let cp = stage_input(cfg, CLASSICAL, "classical")?;
    let set = read_latents(&latp)?;
    let (names, table) = read_metrics_csv(&cp)?;
    let index: BTreeMap<&str, usize> = set
        .users
        .iter()
        .enumerate()
        .map(|(i, (u, _, _))| (u.as_str(), i))
        .collect();
    let mut d = ProbeData {
        x: Vec::new(),
        targets: Vec::new(),
        subjects: Vec::new(),
        metric_names: names,
    };
    for ((user, ts), vals) in &table {
        let Some(&ui) = index.get(user.as_str()) else {
            continue;
        };
        let (_, hours, lat) = &set.users[ui];
        let keyed: Vec<(LocalHour, usize)> = hours.iter().enumerate().map(|(i, h)| (*h, i)).collect();
        let week = week_slice(&keyed, *ts, cfg.tz_offset_minutes);
        if week.is_empty() {
            continue;
        }
        let rows: Vec<Vec<f64>> = week
            .iter()
            .map(|(_, i)| lat.row(*i).iter().map(|&v| f64::from(v)).collect())
            .collect();
        d.x.push(summarize_latents(&rows)?.values);
        d.targets.push(vals.clone());
        d.subjects.push(ui);
    }
    Ok((d, vec![latp, cp]))
}

pub fn run_probe(cfg: &RunConfig) -> Result<StageReport> {
    let (d, used) = probe_data(cfg)?;
    let wanted: Vec<usize> = if cfg.probe.metrics.is_empty() {
        (0..d.metric_names.len()).collect()
    } else {
        let mut v = Vec::new();
        for m in &cfg.probe.metrics {
            match d.metric_names.iter().position(|n| n == m) {
                Some(i) => v.push(i),
                None => return Err(Error::Config(format!("probe metric `{m}` not among classical metrics"))),
            }
        }
        v
    };
    let mut results: Vec<ProbeResult> = Vec::new();
    for j in wanted {
        let target: Vec<Option<f64>> = d.targets.iter().map(|t| t.get(j).copied().flatten()).collect();
        match loso_probe(&d.metric_names[j], &d.x, &target, &d.subjects) {
            Ok(r) => results.push(r),
            Err(e) => log::warn!("probe {}: skipped ({e})", d.metric_names[j]),
        }
    }
    if cfg.probe.noise_control {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let noise: Vec<Option<f64>> = d.x.iter().map(|_| Some(StandardNormal.sample(&mut rng))).collect();
        match loso_probe("noise_control", &d.x, &noise, &d.subjects) {
            Ok(r) => results.push(r),
            Err(e) => log::warn!("probe noise_control: skipped ({e})"),
        }
    }
    let pp = out(cfg, PROBE);
    write_probe_csv(create(&pp)?, &results)?;
    finish("probe", cfg, &used, vec![pp])
}

pub fn run_stage(stage: &str, cfg: &RunConfig) -> Result<StageReport> {
    cfg.validate()?;
    with_threads(cfg, || match stage {
        "synth" => run_synth(cfg),
        "ingest" => run_ingest(cfg),
        "featurize" => run_featurize(cfg),
        "classical" => run_classical(cfg),
        "train" => run_train(cfg),
        "sae" => run_sae(cfg),
        "interpret" => run_interpret(cfg),
        "stats" => run_stats(cfg),
        "probe" => run_probe(cfg),
        other => Err(Error::Config(format!("unknown stage `{other}`"))),
    })
}

/// All stages in order, generating the cohort first when configured.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Vec<StageReport>> {
    cfg.validate()?;
    let mut reports = Vec::new();
    if cfg.paths.synthetic {
        reports.push(run_stage("synth", cfg)?);
    }
    for s in STAGES {
        log::info!("stage {s}");
        reports.push(run_stage(s, cfg)?);
    }
    Ok(reports)
}

/// Load a finished run's interpret results.
pub fn read_interpret(cfg: &RunConfig) -> Result<serde_json::Value> {
    let p = stage_input(cfg, INTERPRET_JSON, "interpret")?;
    Ok(serde_json::from_reader(open(&p)?)?)
}

pub fn interpret_summary(res: &InterpretResult) -> (usize, usize) {
    (res.active_features, res.retained.len())
}
