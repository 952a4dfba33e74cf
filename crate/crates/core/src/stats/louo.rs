use serde::Serialize;

use crate::error::{Error, Result};

use super::gee::{fit_gee, GeeOptions};
use super::mundlak::mundlak_decompose;

pub const LOUO_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Serialize)]
pub struct LouoFold {
    pub held_out: usize,
    pub beta_b: f64,
    pub beta_w: f64,
    pub p_b: f64,
    pub p_w: f64,
    pub sign_b_preserved: bool,
    pub sign_w_preserved: bool,
    pub significant_b: bool,
    pub significant_w: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LouoSummary {
    pub folds: Vec<LouoFold>,
    /// Held-out clusters whose refit failed, with the reason.
    pub skipped: Vec<(usize, String)>,
    pub n_clusters: usize,
}

impl LouoSummary {
    pub fn sign_preserved_b(&self) -> usize {
        self.folds.iter().filter(|f| f.sign_b_preserved).count()
    }

    pub fn sign_preserved_w(&self) -> usize {
        self.folds.iter().filter(|f| f.sign_w_preserved).count()
    }

    pub fn significant_b(&self) -> usize {
        self.folds.iter().filter(|f| f.significant_b).count()
    }

    pub fn significant_w(&self) -> usize {
        self.folds.iter().filter(|f| f.significant_w).count()
    }
}

fn densify(clusters: &[usize]) -> Vec<usize> {
    let mut ids: Vec<usize> = clusters.to_vec();
    ids.sort_unstable();
    ids.dedup();
    clusters.iter().map(|c| ids.binary_search(c).unwrap()).collect()
}

/// Refit the Mundlak GEE once per held-out cluster. Signs are compared to
/// the full-panel estimates `full_b` and `full_w`.
pub fn louo_resample(
    x: &[f64],
    y: &[f64],
    clusters: &[usize],
    full_b: f64,
    full_w: f64,
    opts: GeeOptions,
) -> Result<LouoSummary> {
    let mut ids: Vec<usize> = clusters.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 3 {
        return Err(Error::InsufficientData("LOUO needs ≥3 clusters".into()));
    }
    let mut folds = Vec::new();
    let mut skipped = Vec::new();
    for &held in &ids {
        let keep: Vec<usize> = (0..x.len()).filter(|&i| clusters[i] != held).collect();
        let xs: Vec<f64> = keep.iter().map(|&i| x[i]).collect();
        let ys: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
        let cs = densify(&keep.iter().map(|&i| clusters[i]).collect::<Vec<_>>());
        let fit = mundlak_decompose(&xs, &cs).and_then(|m| fit_gee(&ys, &m.between, &m.within, &cs, opts));
        match fit {
            Ok(f) => folds.push(LouoFold {
                held_out: held,
                beta_b: f.coef[1],
                beta_w: f.coef[2],
                p_b: f.p[1],
                p_w: f.p[2],
                sign_b_preserved: f.coef[1].signum() == full_b.signum(),
                sign_w_preserved: f.coef[2].signum() == full_w.signum(),
                significant_b: f.p[1] < LOUO_ALPHA,
                significant_w: f.p[2] < LOUO_ALPHA,
            }),
            Err(e) => skipped.push((held, e.to_string())),
        }
    }
    Ok(LouoSummary {
        folds,
        skipped,
        n_clusters: ids.len(),
    })
}
