//! TopK sparse autoencoder over hourly backbone latents.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::checkpoint::{fill, write_container, Container};
use crate::backbone::params::{Adam, TensorMut, TensorRef};
use crate::error::{Error, Result};
use crate::time::LocalHour;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeConfig {
    pub n_features: usize,
    pub k: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub n_holdout: usize,
    pub seed: u64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        SaeConfig {
            n_features: 512,
            k: 16,
            lr: 3e-4,
            batch_size: 512,
            epochs: 500,
            n_holdout: 5,
            seed: 42,
        }
    }
}

impl SaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.n_features {
            return Err(Error::Config(format!(
                "k = {} must be in 1..={}",
                self.k, self.n_features
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("SAE batch size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("SAE learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// n_features × d
    pub w_e: Array2<f32>,
    /// d × n_features; columns are unit norm
    pub w_d: Array2<f32>,
    pub b_pre: Array1<f32>,
    pub b_post: Array1<f32>,
    pub k: usize,
}

/// Active feature indices (ascending) and their positive values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseCode {
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

impl SparseCode {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Keep the k largest positive entries; ties go to the lower index.
pub fn topk_positive(pre: ArrayView1<f32>, k: usize) -> SparseCode {
    let mut pos: Vec<(u32, f32)> = pre
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, &v)| (i as u32, v))
        .collect();
    let order = |a: &(u32, f32), b: &(u32, f32)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if pos.len() > k {
        pos.select_nth_unstable_by(k - 1, order);
        pos.truncate(k);
    }
    pos.sort_unstable_by_key(|p| p.0);
    SparseCode {
        indices: pos.iter().map(|p| p.0).collect(),
        values: pos.iter().map(|p| p.1).collect(),
    }
}

impl SaeParams {
    pub fn d(&self) -> usize {
        self.w_d.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.w_d.ncols()
    }

    /// Random unit-norm decoder columns, tied encoder, biases at `mean`.
    pub fn init(mean: &Array1<f32>, cfg: &SaeConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = mean.len();
        let mut w_d = Array2::from_shape_fn((d, cfg.n_features), |_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        });
        normalize_columns(&mut w_d);
        SaeParams {
            w_e: w_d.t().as_standard_layout().into_owned(),
            w_d,
            b_pre: mean.clone(),
            b_post: mean.clone(),
            k: cfg.k,
        }
    }

    pub fn pre_activations(&self, x: &Array2<f32>) -> Array2<f32> {
        (x - &self.b_pre).dot(&self.w_e.t())
    }

    pub fn encode(&self, x: ArrayView1<f32>) -> SparseCode {
        let pre = self.w_e.dot(&(&x - &self.b_pre));
        topk_positive(pre.view(), self.k)
    }

    pub fn encode_batch(&self, x: &Array2<f32>) -> Vec<SparseCode> {
        let pre = self.pre_activations(x);
        pre.rows().into_iter().map(|r| topk_positive(r, self.k)).collect()
    }

    pub fn decode(&self, z: &SparseCode) -> Array1<f32> {
        let mut out = self.b_post.clone();
        for (&i, &v) in z.indices.iter().zip(&z.values) {
            out.scaled_add(v, &self.w_d.column(i as usize));
        }
        out
    }

    /// Max |‖column‖₂ − 1| over decoder columns, computed in f64.
    pub fn max_norm_deviation(&self) -> f64 {
        self.w_d
            .columns()
            .into_iter()
            .map(|c| (c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, f32>> {
        let mut v = Vec::new();
        for (name, arr) in [("w_e", &self.w_e), ("w_d", &self.w_d)] {
            v.push(TensorRef {
                name: name.into(),
                shape: arr.shape().to_vec(),
                data: arr.as_slice().expect("standard layout"),
            });
        }
        for (name, arr) in [("b_pre", &self.b_pre), ("b_post", &self.b_post)] {
            v.push(TensorRef {
                name: name.into(),
                shape: arr.shape().to_vec(),
                data: arr.as_slice().expect("standard layout"),
            });
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, f32>> {
        vec![
            TensorMut {
                name: "w_e".into(),
                data: self.w_e.as_slice_mut().unwrap(),
            },
            TensorMut {
                name: "w_d".into(),
                data: self.w_d.as_slice_mut().unwrap(),
            },
            TensorMut {
                name: "b_pre".into(),
                data: self.b_pre.as_slice_mut().unwrap(),
            },
            TensorMut {
                name: "b_post".into(),
                data: self.b_post.as_slice_mut().unwrap(),
            },
        ]
    }

    pub fn save(&self, path: &Path, cfg: &SaeConfig, extra: serde_json::Value) -> Result<()> {
        let mut config = serde_json::to_value(cfg)?;
        config["d"] = self.d().into();
        let tensors = self.tensors().into_iter().map(|t| (t.name, t.shape, t.data)).collect();
        write_container(
            std::io::BufWriter::new(std::fs::File::create(path)?),
            "sae",
            config,
            cfg.seed,
            extra,
            tensors,
        )
    }

    pub fn load(path: &Path) -> Result<(Self, SaeConfig)> {
        let c = Container::open(path, "sae")?;
        let cfg: SaeConfig = c.config()?;
        let d = c
            .header
            .config
            .get("d")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("missing d".into()))? as usize;
        let mut p = SaeParams {
            w_e: Array2::zeros((cfg.n_features, d)),
            w_d: Array2::zeros((d, cfg.n_features)),
            b_pre: Array1::zeros(d),
            b_post: Array1::zeros(d),
            k: cfg.k,
        };
        let shapes: Vec<Vec<usize>> = p.tensors().into_iter().map(|t| t.shape).collect();
        for (t, shape) in p.tensors_mut().into_iter().zip(shapes) {
            fill(t.data, &shape, c.tensor(&t.name)?, &t.name)?;
        }
        Ok((p, cfg))
    }
}

pub fn normalize_columns(w: &mut Array2<f32>) {
    for mut col in w.columns_mut() {
        let n = col.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            col.mapv_inplace(|v| (v as f64 / n) as f32);
        }
    }
}

/// Dense n × F activation matrix from codes.
fn dense(codes: &[SparseCode], f: usize) -> Array2<f32> {
    let mut z = Array2::zeros((codes.len(), f));
    for (r, c) in codes.iter().enumerate() {
        for (&i, &v) in c.indices.iter().zip(&c.values) {
            z[(r, i as usize)] = v;
        }
    }
    z
}

/// Mean squared reconstruction error per element.
pub fn reconstruction_mse(p: &SaeParams, x: &Array2<f32>) -> f64 {
    if x.nrows() == 0 {
        return f64::NAN;
    }
    let mut total = 0.0f64;
    for start in (0..x.nrows()).step_by(4096) {
        let xb = x.slice(s![start..(start + 4096).min(x.nrows()), ..]).to_owned();
        let z = dense(&p.encode_batch(&xb), p.n_features());
        let xhat = z.dot(&p.w_d.t()) + &p.b_post;
        total += (&xhat - &xb).iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
    }
    total / (x.len() as f64)
}

/// Corpus variance: mean squared deviation from the mean latent, per element.
pub fn corpus_variance(x: &Array2<f32>) -> f64 {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    (x - &mean).iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64
}

fn step_grads(p: &SaeParams, x: &Array2<f32>) -> (SaeParams, f64) {
    let n = x.nrows();
    let centered = x - &p.b_pre;
    let pre = centered.dot(&p.w_e.t());
    let codes: Vec<SparseCode> = pre.rows().into_iter().map(|r| topk_positive(r, p.k)).collect();
    let z = dense(&codes, p.n_features());
    let xhat = z.dot(&p.w_d.t()) + &p.b_post;
    let diff = &xhat - x;
    let loss = diff.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / diff.len() as f64;
    let dxhat = diff * (2.0 / (n * p.d()) as f32);
    let g_wd = dxhat.t().dot(&z);
    let g_bpost = dxhat.sum_axis(Axis(0));
    let mut dpre = dxhat.dot(&p.w_d);
    // gradient flows only through the selected (positive) units
    for (mut row, code) in dpre.rows_mut().into_iter().zip(&codes) {
        let mut keep = vec![false; row.len()];
        for &i in &code.indices {
            keep[i as usize] = true;
        }
        for (v, k) in row.iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
    let g_we = dpre.t().dot(&centered);
    let g_bpre = -dpre.dot(&p.w_e).sum_axis(Axis(0));
    (
        SaeParams {
            w_e: g_we,
            w_d: g_wd,
            b_pre: g_bpre,
            b_post: g_bpost,
            k: p.k,
        },
        loss,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct SaeTrainReport {
    pub holdout_users: Vec<String>,
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub best_epoch: usize,
    pub steps: usize,
    /// Largest decoder-norm deviation seen after any optimizer step.
    pub max_norm_deviation: f64,
}

/// Train on latents grouped by user; `cfg.n_holdout` users are drawn with
/// the seeded RNG for validation and the best-validation parameters are
/// returned.
pub fn train_sae(users: &[(String, Array2<f32>)], cfg: &SaeConfig) -> Result<(SaeParams, SaeTrainReport)> {
    cfg.validate()?;
    if users.len() < cfg.n_holdout + 1 {
        return Err(Error::InsufficientData(format!(
            "{} users; need at least {} to hold out {}",
            users.len(),
            cfg.n_holdout + 1,
            cfg.n_holdout
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..users.len()).collect();
    order.sort_by(|&a, &b| users[a].0.cmp(&users[b].0));
    order.shuffle(&mut rng);
    let mut holdout: Vec<usize> = order[..cfg.n_holdout].to_vec();
    holdout.sort_by(|&a, &b| users[a].0.cmp(&users[b].0));
    let stack = |idx: &[usize]| -> Result<Array2<f32>> {
        let views: Vec<_> = idx.iter().map(|&i| users[i].1.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::InvalidInput(format!("latent shapes: {e}")))
    };
    let mut train_idx: Vec<usize> = order[cfg.n_holdout..].to_vec();
    train_idx.sort_unstable();
    let train = stack(&train_idx)?;
    let val = stack(&holdout)?;
    if train.nrows() == 0 {
        return Err(Error::InsufficientData("no training latents".into()));
    }
    if train.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SAE training latents".into()));
    }
    let mean = train.mean_axis(Axis(0)).expect("non-empty");
    let mut params = SaeParams::init(&mean, cfg, &mut rng);
    let mut opt = Adam::new(cfg.lr);
    let mut report = SaeTrainReport {
        holdout_users: holdout.iter().map(|&i| users[i].0.clone()).collect(),
        train_mse: Vec::new(),
        val_mse: Vec::new(),
        best_epoch: 0,
        steps: 0,
        max_norm_deviation: params.max_norm_deviation(),
    };
    let mut best: Option<(f64, SaeParams)> = None;
    let mut rows: Vec<usize> = (0..train.nrows()).collect();
    for epoch in 0..cfg.epochs {
        opt.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        rows.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in rows.chunks(cfg.batch_size) {
            let xb = train.select(Axis(0), chunk);
            let (g, loss) = step_grads(&params, &xb);
            total += loss * chunk.len() as f64;
            opt.update(params.tensors_mut(), g.tensors());
            normalize_columns(&mut params.w_d);
            report.max_norm_deviation = report.max_norm_deviation.max(params.max_norm_deviation());
            report.steps += 1;
        }
        let train_mse = total / train.nrows() as f64;
        if !train_mse.is_finite() {
            return Err(Error::NonFinite(format!("SAE loss at epoch {}", epoch + 1)));
        }
        let val_mse = if val.nrows() > 0 {
            reconstruction_mse(&params, &val)
        } else {
            train_mse
        };
        log::debug!("sae epoch {}: train {train_mse:.6} val {val_mse:.6}", epoch + 1);
        report.train_mse.push(train_mse);
        report.val_mse.push(val_mse);
        if best.as_ref().is_none_or(|(b, _)| val_mse < *b) {
            best = Some((val_mse, params.clone()));
            report.best_epoch = epoch + 1;
        }
    }
    let (_, params) = best.expect("at least one epoch");
    Ok((params, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRow {
    pub user_id: String,
    pub local_hour: LocalHour,
    pub feature: u32,
    pub value: f32,
}

/// Sparse (user, hour, feature, value) triplets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationTable {
    pub n_features: usize,
    pub rows: Vec<ActivationRow>,
}

impl ActivationTable {
    pub fn active_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_features];
        for r in &self.rows {
            if r.value > 0.0 {
                counts[r.feature as usize] += 1;
            }
        }
        counts
    }

    pub fn active_features(&self) -> Vec<usize> {
        self.active_counts()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Per user, sorted (hour, dense activation vector).
    pub fn by_user(&self) -> BTreeMap<String, Vec<(LocalHour, Vec<f64>)>> {
        let mut map: BTreeMap<String, BTreeMap<LocalHour, Vec<f64>>> = BTreeMap::new();
        for r in &self.rows {
            map.entry(r.user_id.clone())
                .or_default()
                .entry(r.local_hour)
                .or_insert_with(|| vec![0.0; self.n_features])[r.feature as usize] = r.value as f64;
        }
        map.into_iter().map(|(u, m)| (u, m.into_iter().collect())).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["user_id", "local_hour", "feature_id", "value"])?;
        for r in &self.rows {
            w.write_record([
                r.user_id.clone(),
                r.local_hour.0.to_string(),
                r.feature.to_string(),
                r.value.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, n_features: usize) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse_err = |c: &str| Error::InvalidInput(format!("activation table: bad {c}"));
            let feature: u32 = rec
                .get(2)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err("feature_id"))?;
            if feature as usize >= n_features {
                return Err(Error::InvalidInput(format!("feature {feature} ≥ {n_features}")));
            }
            rows.push(ActivationRow {
                user_id: rec.get(0).ok_or_else(|| parse_err("user_id"))?.to_string(),
                local_hour: LocalHour(
                    rec.get(1)
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| parse_err("local_hour"))?,
                ),
                feature,
                value: rec
                    .get(3)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| parse_err("value"))?,
            });
        }
        Ok(ActivationTable { n_features, rows })
    }
}

/// Encode every (user, hour) latent; `hours[i]` labels row i of `latents`.
pub fn activation_matrix(p: &SaeParams, users: &[(String, Vec<LocalHour>, Array2<f32>)]) -> ActivationTable {
    let mut rows = Vec::new();
    for (user, hours, latents) in users {
        for (h, code) in hours.iter().zip(p.encode_batch(latents)) {
            for (&i, &v) in code.indices.iter().zip(&code.values) {
                rows.push(ActivationRow {
                    user_id: user.clone(),
                    local_hour: *h,
                    feature: i,
                    value: v,
                });
            }
        }
    }
    ActivationTable {
        n_features: p.n_features(),
        rows,
    }
}
