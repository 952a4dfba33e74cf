//! Run configuration (TOML) and per-stage run manifests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::featurize::{FEATURE_DIM, WINDOW_LEN};
use crate::interpret::InterpretConfig;
use crate::sae::SaeConfig;
use crate::stats::verdict::{DELTA_GRID, SIGN_GRID};
use crate::stats::{AnalysisOptions, Outcome};
use crate::synth::SynthConfig;
use crate::time::MAX_TZ_OFFSET_MINUTES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Generate a synthetic cohort into `<output_dir>/synth` and read
    /// inputs from there instead of the paths below.
    pub synthetic: bool,
    pub flows: PathBuf,
    pub hosts: PathBuf,
    pub apps: PathBuf,
    pub surveys: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            synthetic: false,
            flows: "data/flows.csv".into(),
            hosts: "data/hosts.csv".into(),
            apps: "data/apps.csv".into(),
            surveys: "data/surveys.csv".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    pub outcomes: Vec<Outcome>,
    pub analysis: AnalysisOptions,
    pub delta_grid: Vec<f64>,
    pub sign_grid: Vec<f64>,
    /// Include the classical rest-activity metrics as predictors.
    pub classical_predictors: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            outcomes: Outcome::ALL.to_vec(),
            analysis: AnalysisOptions::default(),
            delta_grid: DELTA_GRID.to_vec(),
            sign_grid: SIGN_GRID.to_vec(),
            classical_predictors: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Classical metric columns used as probe targets; empty means all.
    pub metrics: Vec<String>,
    /// Add a seeded pure-noise target as a negative control.
    pub noise_control: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            metrics: Vec::new(),
            noise_control: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Seed for every stage; replaces the per-section seeds.
    pub seed: u64,
    /// Worker threads for within-stage parallelism.
    pub threads: usize,
    pub tz_offset_minutes: i32,
    pub paths: Paths,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub sae: SaeConfig,
    pub interpret: InterpretConfig,
    pub stats: StatsConfig,
    pub probe: ProbeConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            threads: 1,
            tz_offset_minutes: 0,
            paths: Paths::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            sae: SaeConfig::default(),
            interpret: InterpretConfig::default(),
            stats: StatsConfig::default(),
            probe: ProbeConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    /// Load and resolve relative paths against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.flows,
            &mut cfg.paths.hosts,
            &mut cfg.paths.apps,
            &mut cfg.paths.surveys,
            &mut cfg.paths.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.training.seed = seed;
        self.sae.seed = seed;
        self.interpret.seed = seed;
        self.synth.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Every violation, joined; `Ok` when valid.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        if self.tz_offset_minutes.abs() > MAX_TZ_OFFSET_MINUTES {
            errs.push(format!("tz_offset_minutes {} outside ±14h", self.tz_offset_minutes));
        }
        if self.threads == 0 {
            errs.push("threads must be ≥ 1".into());
        }
        if self.model.feature_dim != FEATURE_DIM || self.model.window_len != WINDOW_LEN {
            errs.push(format!(
                "model.feature_dim and model.window_len must be {FEATURE_DIM} and {WINDOW_LEN}"
            ));
        }
        let sub: [(&str, Result<()>); 3] = [
            ("model", self.model.validate()),
            ("training", self.training.validate()),
            ("sae", self.sae.validate()),
        ];
        for (name, r) in sub {
            if let Err(e) = r {
                errs.push(format!("[{name}] {e}"));
            }
        }
        let ic = &self.interpret;
        if !(0.0..=1.0).contains(&ic.participant_fraction) {
            errs.push("interpret.participant_fraction outside [0, 1]".into());
        }
        if ic.generality_top_n == 0 || ic.label_top_n == 0 {
            errs.push("interpret top-N sizes must be positive".into());
        }
        if !(ic.hi > 1.0 && ic.lo > 0.0 && ic.lo < 1.0) {
            errs.push("interpret thresholds need hi > 1 and 0 < lo < 1".into());
        }
        if self.stats.outcomes.is_empty() {
            errs.push("stats.outcomes is empty".into());
        }
        for (name, grid) in [
            ("delta_grid", &self.stats.delta_grid),
            ("sign_grid", &self.stats.sign_grid),
        ] {
            if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
                errs.push(format!("stats.{name} must be non-empty and strictly increasing"));
            }
        }
        if self.paths.synthetic {
            if let Err(e) = self.synth.validate() {
                errs.push(format!("[synth] {e}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("\n  ")))
        }
    }

    /// sha256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        sha256_bytes(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Dotted keys whose values differ from the defaults (paths excluded).
    pub fn overrides(&self) -> BTreeMap<String, serde_json::Value> {
        let mut out = BTreeMap::new();
        let a = serde_json::to_value(self).expect("serializes");
        let b = serde_json::to_value(RunConfig::default()).expect("serializes");
        diff_values("", &a, &b, &mut out);
        out.retain(|k, _| !k.starts_with("paths."));
        out
    }
}

fn diff_values(
    prefix: &str,
    a: &serde_json::Value,
    b: &serde_json::Value,
    out: &mut BTreeMap<String, serde_json::Value>,
) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, v) in x {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match y.get(k) {
                    Some(w) => diff_values(&key, v, w, out),
                    None => {
                        out.insert(key, v.clone());
                    }
                }
            }
        }
        _ if a != b => {
            out.insert(prefix.to_string(), a.clone());
        }
        _ => {}
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut r = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub overrides: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Effective configuration, enough to rerun the stage.
    pub config: RunConfig,
}

impl Manifest {
    pub fn path(output_dir: &Path, stage: &str) -> PathBuf {
        output_dir.join(format!("{stage}.manifest.json"))
    }

    pub fn build(stage: &str, cfg: &RunConfig, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<Self> {
        let digest = |ps: &[PathBuf]| ps.iter().map(|p| FileDigest::of(p)).collect::<Result<Vec<_>>>();
        Ok(Manifest {
            stage: stage.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            threads: cfg.threads,
            overrides: cfg.overrides(),
            inputs: digest(inputs)?,
            outputs: digest(outputs)?,
            config: cfg.clone(),
        })
    }

    pub fn write(&self, output_dir: &Path) -> Result<PathBuf> {
        let path = Self::path(output_dir, &self.stage);
        std::fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

/// Commented template written by `init`.
pub fn init_template() -> String {
    let body = RunConfig::default().to_toml();
    format!(
        "# flowsense run configuration.\n\
         # Section values below are the reference hyperparameters; any change\n\
         # is listed under `overrides` in each stage manifest.\n\
         # `seed` applies to every stage and replaces per-section seeds.\n\
         # Set paths.synthetic = true to run on a generated cohort ([synth]).\n\n{body}"
    )
}
