use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featurize::{UserFeatures, UserSplit};

use super::model::{adapter_delta, encoder_forward, head_loss, loss_and_grad, predict_masked, MaskedBatch, Rows};
use super::params::{Adam, AdapterParams, BackboneParams, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 64,
            phase1_epochs: 30,
            phase2_epochs: 15,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.phase1_epochs == 0 || self.phase2_epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Feature matrices and window starts for every user.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub user_ids: Vec<String>,
    /// Per user: hours × features, rows in chronological order.
    pub features: Vec<Array2<f32>>,
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn new(users: &[UserFeatures], splits: &[UserSplit]) -> Self {
        let mut c = Corpus::default();
        for (u, s) in users.iter().zip(splits) {
            c.user_ids.push(u.user_id.clone());
            c.features.push(user_matrix(u));
            c.train.push(s.train.iter().map(|w| w.first).collect());
            c.test.push(s.test.iter().map(|w| w.first).collect());
        }
        c
    }

    pub fn train_windows(&self) -> Vec<(usize, usize)> {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(u, ws)| ws.iter().map(move |&f| (u, f)))
            .collect()
    }

    fn stack(&self, windows: &[(usize, usize)], len: usize) -> Array2<f32> {
        let dim = self.features.first().map_or(0, |f| f.ncols());
        let mut x = Array2::zeros((windows.len() * len, dim));
        for (i, &(u, first)) in windows.iter().enumerate() {
            x.slice_mut(s![i * len..(i + 1) * len, ..])
                .assign(&self.features[u].slice(s![first..first + len, ..]));
        }
        x
    }

    pub fn batch(&self, windows: &[(usize, usize)], mask: Vec<usize>, len: usize) -> MaskedBatch<f32> {
        MaskedBatch::new(self.stack(windows, len), mask, len)
    }
}

pub fn user_matrix(u: &UserFeatures) -> Array2<f32> {
    let dim = crate::featurize::FEATURE_DIM;
    let mut m = Array2::zeros((u.hours.len(), dim));
    for (i, h) in u.hours.iter().enumerate() {
        for (j, v) in h.to_array().into_iter().enumerate() {
            m[(i, j)] = v as f32;
        }
    }
    m
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub phase: u8,
    pub user: Option<String>,
    pub epoch: usize,
    pub mean_loss: f64,
}

pub struct Phase1Output {
    pub params: BackboneParams<f32>,
    pub epoch_losses: Vec<f64>,
}

fn check_finite(loss: f32, phase: u8, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "phase-{phase} loss diverged at epoch {epoch}"
        )))
    }
}

/// Joint training of backbone and head with adapters disabled.
pub fn train_phase1(corpus: &Corpus, model: ModelConfig, cfg: &TrainConfig) -> Result<Phase1Output> {
    model.validate()?;
    cfg.validate()?;
    let mut windows = corpus.train_windows();
    if windows.is_empty() {
        return Err(Error::InsufficientData("no training windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = BackboneParams::<f32>::init(model, &mut rng);
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.phase1_epochs);
    let len = model.window_len;
    for epoch in 1..=cfg.phase1_epochs {
        windows.shuffle(&mut rng);
        let masks: Vec<usize> = (0..windows.len()).map(|_| rng.random_range(0..len)).collect();
        let mut total = 0.0f64;
        for (chunk, mchunk) in windows.chunks(cfg.batch_size).zip(masks.chunks(cfg.batch_size)) {
            let batch = corpus.batch(chunk, mchunk.to_vec(), len);
            let mut grads = BackboneParams::<f32>::zeros(model);
            let out = loss_and_grad(&params, None, &batch, Some(&mut grads), None);
            check_finite(out.loss, 1, epoch)?;
            total += out.per_window_loss.iter().map(|&l| l as f64).sum::<f64>();
            opt.update(params.tensors_mut(), grads.tensors());
        }
        let mean = total / windows.len() as f64;
        log::info!("phase 1 epoch {epoch}: loss {mean:.6}");
        losses.push(mean);
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("phase-1 parameters".into()));
    }
    Ok(Phase1Output {
        params,
        epoch_losses: losses,
    })
}

/// SHA-256 over the backbone and head parameter bytes.
pub fn param_checksum(p: &BackboneParams<f32>) -> String {
    let mut h = Sha256::new();
    for t in p.tensors() {
        h.update(t.name.as_bytes());
        for v in t.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub struct Phase2Output {
    pub adapters: BTreeMap<String, AdapterParams<f32>>,
    pub logs: Vec<EpochLog>,
    /// Users without training windows.
    pub skipped: Vec<String>,
}

fn train_adapter(
    params: &BackboneParams<f32>,
    corpus: &Corpus,
    user: usize,
    cfg: &TrainConfig,
) -> Result<(AdapterParams<f32>, Vec<f64>)> {
    let len = params.cfg.window_len;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(user as u64 + 1);
    let mut adapter = AdapterParams::<f32>::init(params.cfg.d_model, &mut rng);
    let mut opt = Adam::new(cfg.lr);
    let mut windows: Vec<(usize, usize)> = corpus.train[user].iter().map(|&f| (user, f)).collect();
    let mut losses = Vec::with_capacity(cfg.phase2_epochs);
    for epoch in 1..=cfg.phase2_epochs {
        windows.shuffle(&mut rng);
        let masks: Vec<usize> = (0..windows.len()).map(|_| rng.random_range(0..len)).collect();
        let mut total = 0.0f64;
        for (chunk, mchunk) in windows.chunks(cfg.batch_size).zip(masks.chunks(cfg.batch_size)) {
            let batch = corpus.batch(chunk, mchunk.to_vec(), len);
            let mut grads = AdapterParams::<f32>::zeros(params.cfg.d_model);
            let out = loss_and_grad(params, Some(&adapter), &batch, None, Some(&mut grads));
            check_finite(out.loss, 2, epoch)?;
            total += out.per_window_loss.iter().map(|&l| l as f64).sum::<f64>();
            opt.update(adapter.tensors_mut(), grads.tensors());
        }
        losses.push(total / windows.len() as f64);
    }
    Ok((adapter, losses))
}

/// Trained adapter with its per-epoch mean losses.
type AdapterRun = (AdapterParams<f32>, Vec<f64>);

/// Independent per-user adapter training against a frozen backbone.
pub fn train_phase2(params: &BackboneParams<f32>, corpus: &Corpus, cfg: &TrainConfig) -> Result<Phase2Output> {
    cfg.validate()?;
    let before = param_checksum(params);
    let users: Vec<usize> = (0..corpus.user_ids.len()).collect();
    let results: Vec<(usize, Option<Result<AdapterRun>>)> = users
        .par_iter()
        .map(|&u| {
            if corpus.train[u].is_empty() {
                (u, None)
            } else {
                (u, Some(train_adapter(params, corpus, u, cfg)))
            }
        })
        .collect();
    let mut adapters = BTreeMap::new();
    let mut logs = Vec::new();
    let mut skipped = Vec::new();
    for (u, r) in results {
        let id = corpus.user_ids[u].clone();
        match r {
            None => {
                log::warn!("user {id}: no training windows, adapter skipped");
                skipped.push(id);
            }
            Some(r) => {
                let (a, losses) = r?;
                logs.extend(losses.into_iter().enumerate().map(|(e, l)| EpochLog {
                    phase: 2,
                    user: Some(id.clone()),
                    epoch: e + 1,
                    mean_loss: l,
                }));
                adapters.insert(id, a);
            }
        }
    }
    let after = param_checksum(params);
    assert_eq!(before, after, "phase 2 modified backbone parameters");
    Ok(Phase2Output {
        adapters,
        logs,
        skipped,
    })
}

/// Mask positions used to score a window deterministically: eight
/// positions spread evenly over the window.
pub fn eval_masks(window_index: usize, len: usize) -> Vec<usize> {
    let stride = (len / 8).max(1);
    (0..len.min(8))
        .map(|j| (j * stride + window_index % stride) % len)
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct AdapterEval {
    pub user: String,
    pub loss_backbone: f64,
    pub loss_adapted: f64,
    pub n_windows: usize,
}

/// Test-window loss with and without the user's adapter, on identical masks.
pub fn evaluate_adapters(
    params: &BackboneParams<f32>,
    adapters: &BTreeMap<String, AdapterParams<f32>>,
    corpus: &Corpus,
) -> Vec<AdapterEval> {
    let len = params.cfg.window_len;
    (0..corpus.user_ids.len())
        .into_par_iter()
        .filter_map(|u| {
            let a = adapters.get(&corpus.user_ids[u])?;
            if corpus.test[u].is_empty() {
                return None;
            }
            let mut items = Vec::new();
            for (i, &f) in corpus.test[u].iter().enumerate() {
                for m in eval_masks(i, len) {
                    items.push(((u, f), m));
                }
            }
            let (mut sb, mut sa) = (0.0f64, 0.0f64);
            for chunk in items.chunks(256) {
                let wins: Vec<(usize, usize)> = chunk.iter().map(|x| x.0).collect();
                let batch = corpus.batch(&wins, chunk.iter().map(|x| x.1).collect(), len);
                let (h, _) = encoder_forward(params, &batch.x, batch.len(), Rows::One(batch.mask.clone()));
                let base = h.dot(&params.w_head) + &params.b_head;
                let adapted = (&h + &adapter_delta(a, &h)).dot(&params.w_head) + &params.b_head;
                sb += head_loss(&base, &batch.targets)
                    .0
                    .iter()
                    .map(|&l| l as f64)
                    .sum::<f64>();
                sa += head_loss(&adapted, &batch.targets)
                    .0
                    .iter()
                    .map(|&l| l as f64)
                    .sum::<f64>();
            }
            Some(AdapterEval {
                user: corpus.user_ids[u].clone(),
                loss_backbone: sb / items.len() as f64,
                loss_adapted: sa / items.len() as f64,
                n_windows: corpus.test[u].len(),
            })
        })
        .collect()
}

/// Mean masked loss of the backbone over the given windows.
pub fn evaluate_loss(params: &BackboneParams<f32>, corpus: &Corpus, windows: &[(usize, usize)]) -> f64 {
    let len = params.cfg.window_len;
    let mut items = Vec::new();
    for (i, &w) in windows.iter().enumerate() {
        for m in eval_masks(i, len) {
            items.push((w, m));
        }
    }
    let mut total = 0.0;
    for chunk in items.chunks(256) {
        let wins: Vec<(usize, usize)> = chunk.iter().map(|x| x.0).collect();
        let batch = corpus.batch(&wins, chunk.iter().map(|x| x.1).collect(), len);
        let pred = predict_masked(params, None, &batch);
        total += head_loss(&pred, &batch.targets)
            .0
            .iter()
            .map(|&l| l as f64)
            .sum::<f64>();
    }
    total / items.len().max(1) as f64
}

/// Unmasked encoding of one window: L × d latents.
pub fn encode(params: &BackboneParams<f32>, window: &Array2<f32>) -> Result<Array2<f32>> {
    if !params.all_finite() {
        return Err(Error::NonFinite("backbone parameters".into()));
    }
    if window.nrows() != params.cfg.window_len || window.ncols() != params.cfg.feature_dim {
        return Err(Error::InvalidInput(format!("window shape {:?}", window.shape())));
    }
    Ok(encoder_forward(params, window, 1, Rows::All).0)
}

/// Residual adapter applied row-wise; identity when no adapter exists.
pub fn adapt(latents: &Array2<f32>, adapter: Option<&AdapterParams<f32>>) -> Array2<f32> {
    match adapter {
        Some(a) => latents + &adapter_delta(a, latents),
        None => {
            log::debug!("adapter missing: identity pass-through");
            latents.clone()
        }
    }
}

/// One canonical backbone latent per hour covered by some window.
#[derive(Debug, Clone)]
pub struct UserLatents {
    pub user_id: String,
    /// Indices into the user's feature rows.
    pub hour_index: Vec<usize>,
    pub latents: Array2<f32>,
}

/// Canonical latent per hour: from the window where the hour is the final
/// position, else from the earliest window containing it. `window_starts`
/// are the user's window start rows in any order.
pub fn extract_latents(
    params: &BackboneParams<f32>,
    user_id: &str,
    features: &Array2<f32>,
    window_starts: &[usize],
) -> Result<UserLatents> {
    if !params.all_finite() {
        return Err(Error::NonFinite("backbone parameters".into()));
    }
    let len = params.cfg.window_len;
    let mut starts = window_starts.to_vec();
    starts.sort_unstable();
    starts.dedup();
    let covered_by_final: std::collections::BTreeSet<usize> = starts.iter().map(|s| s + len - 1).collect();
    let mut rows: BTreeMap<usize, Array1<f32>> = BTreeMap::new();
    // hours that are never a final position take the earliest covering window
    let mut fallback: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut claimed = std::collections::BTreeSet::new();
    for &s in &starts {
        for pos in 0..len - 1 {
            let h = s + pos;
            if !covered_by_final.contains(&h) && claimed.insert(h) {
                fallback.entry(s).or_default().push(pos);
            }
        }
    }
    for (&s, positions) in &fallback {
        let x = features.slice(s![s..s + len, ..]).to_owned();
        let (h, _) = encoder_forward(params, &x, 1, Rows::All);
        for &pos in positions {
            rows.insert(s + pos, h.row(pos).to_owned());
        }
    }
    for chunk in starts.chunks(128) {
        let x = stack_from(features, chunk, len);
        let (h, _) = encoder_forward(params, &x, chunk.len(), Rows::One(vec![len - 1; chunk.len()]));
        for (i, &s) in chunk.iter().enumerate() {
            rows.insert(s + len - 1, h.row(i).to_owned());
        }
    }
    let d = params.cfg.d_model;
    let mut latents = Array2::zeros((rows.len(), d));
    let mut hour_index = Vec::with_capacity(rows.len());
    for (i, (h, r)) in rows.into_iter().enumerate() {
        latents.row_mut(i).assign(&r);
        hour_index.push(h);
    }
    Ok(UserLatents {
        user_id: user_id.to_string(),
        hour_index,
        latents,
    })
}

fn stack_from(features: &Array2<f32>, starts: &[usize], len: usize) -> Array2<f32> {
    let mut x = Array2::zeros((starts.len() * len, features.ncols()));
    for (i, &first) in starts.iter().enumerate() {
        x.slice_mut(s![i * len..(i + 1) * len, ..])
            .assign(&features.slice(s![first..first + len, ..]));
    }
    x
}

#[derive(Debug, Clone, Serialize)]
pub struct CosineSummary {
    pub users: Vec<String>,
    /// Symmetric; NaN where a user's mean delta has zero norm.
    pub matrix: Vec<Vec<f64>>,
    pub mean: f64,
    pub max: f64,
    pub frac_negative: f64,
    pub n_pairs: usize,
    pub skipped_pairs: usize,
}

/// Cosine similarity between users' mean adapter deltas over `probe`.
pub fn adapter_delta_cosines(
    adapters: &BTreeMap<String, AdapterParams<f32>>,
    probe: &Array2<f32>,
) -> Result<CosineSummary> {
    if adapters.len() < 2 {
        return Err(Error::InsufficientData("need ≥2 adapters".into()));
    }
    let users: Vec<String> = adapters.keys().cloned().collect();
    let means: Vec<Array1<f64>> = adapters
        .values()
        .map(|a| {
            adapter_delta(a, probe)
                .mapv(f64::from)
                .mean_axis(Axis(0))
                .expect("non-empty probe")
        })
        .collect();
    let norms: Vec<f64> = means.iter().map(|m| m.dot(m).sqrt()).collect();
    let n = users.len();
    let mut matrix = vec![vec![f64::NAN; n]; n];
    let (mut sum, mut max, mut neg, mut pairs, mut skipped) = (0.0, f64::NEG_INFINITY, 0usize, 0usize, 0usize);
    for i in 0..n {
        if norms[i] > 0.0 {
            matrix[i][i] = 1.0;
        }
        for j in i + 1..n {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                skipped += 1;
                continue;
            }
            let cs = (means[i].dot(&means[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            matrix[i][j] = cs;
            matrix[j][i] = cs;
            sum += cs;
            max = f64::max(max, cs);
            neg += usize::from(cs < 0.0);
            pairs += 1;
        }
    }
    let denom = pairs.max(1) as f64;
    Ok(CosineSummary {
        users,
        matrix,
        mean: sum / denom,
        max,
        frac_negative: neg as f64 / denom,
        n_pairs: pairs,
        skipped_pairs: skipped,
    })
}
