//! Leave-one-subject-out linear probes on summarized latents.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::linalg::spd_solve;

pub const ENCODED_ALPHA: f64 = 0.05;
/// Fraction of rows that must carry a defined target.
pub const MIN_DEFINED_FRACTION: f64 = 0.8;
pub const RIDGE_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentSummary {
    /// Per-dimension means followed by per-dimension sample SDs.
    pub values: Vec<f64>,
    pub n_hours: usize,
    /// Set when only one hour was available and the SD half is zero.
    pub single_hour: bool,
}

/// Mean and sample SD (N−1) of each latent dimension.
pub fn summarize_latents<V: AsRef<[f64]>>(latents: &[V]) -> Result<LatentSummary> {
    let n = latents.len();
    if n == 0 {
        return Err(Error::InsufficientData("no latents to summarize".into()));
    }
    let d = latents[0].as_ref().len();
    let mut mean = vec![0.0; d];
    for l in latents {
        let l = l.as_ref();
        if l.len() != d {
            return Err(Error::InvalidInput("latent dimension mismatch".into()));
        }
        for (m, v) in mean.iter_mut().zip(l) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut sd = vec![0.0; d];
    if n > 1 {
        for l in latents {
            for ((s, v), m) in sd.iter_mut().zip(l.as_ref()).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        sd.iter_mut().for_each(|s| *s = (*s / (n - 1) as f64).sqrt());
    }
    mean.extend(sd);
    Ok(LatentSummary {
        values: mean,
        n_hours: n,
        single_hour: n == 1,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    pub metric: String,
    pub r: f64,
    pub r2: f64,
    pub p: f64,
    pub encoded: bool,
    pub n: usize,
    pub folds: usize,
    /// Folds whose normal matrix needed the ridge fallback.
    pub ridge_folds: usize,
}

/// Least squares with an unpenalized intercept on standardized columns.
/// Returns weights for the raw columns plus intercept, and whether the
/// ridge fallback was used.
pub struct LinearFit {
    pub intercept: f64,
    pub weights: Vec<f64>,
    pub ridge: bool,
}

impl LinearFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

pub fn fit_linear(x: &[&[f64]], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n == 0 || n != y.len() {
        return Err(Error::InvalidInput("probe fit: empty or mismatched rows".into()));
    }
    let d = x[0].len();
    let mut mu = vec![0.0; d];
    for row in x {
        for (m, v) in mu.iter_mut().zip(row.iter()) {
            *m += v / n as f64;
        }
    }
    let mut sd = vec![0.0; d];
    for row in x {
        for ((s, v), m) in sd.iter_mut().zip(row.iter()).zip(&mu) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    sd.iter_mut().for_each(|s| *s = s.sqrt());
    let ybar = y.iter().sum::<f64>() / n as f64;
    // Centered design: the intercept separates out exactly.
    let z = DMatrix::from_fn(n, d, |i, j| if sd[j] > 0.0 { (x[i][j] - mu[j]) / sd[j] } else { 0.0 });
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - ybar));
    let mut xtx = z.transpose() * &z;
    let xty = z.transpose() * yc;
    let active: Vec<usize> = (0..d).filter(|&j| sd[j] > 0.0).collect();
    for j in 0..d {
        if sd[j] == 0.0 {
            xtx[(j, j)] = 1.0;
        }
    }
    let (beta, ridge) = match (n > active.len()).then(|| spd_solve(&xtx, &xty)).flatten() {
        Some(b) => (b, false),
        None => {
            let trace: f64 = active.iter().map(|&j| xtx[(j, j)]).sum();
            let lambda = RIDGE_SCALE * trace / active.len().max(1) as f64;
            for &j in &active {
                xtx[(j, j)] += lambda;
            }
            let b = spd_solve(&xtx, &xty).ok_or_else(|| Error::Singular("probe ridge system".into()))?;
            (b, true)
        }
    };
    let weights: Vec<f64> = (0..d)
        .map(|j| if sd[j] > 0.0 { beta[j] / sd[j] } else { 0.0 })
        .collect();
    let intercept = ybar - weights.iter().zip(&mu).map(|(w, m)| w * m).sum::<f64>();
    Ok(LinearFit {
        intercept,
        weights,
        ridge,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Two-sided p for a Pearson r via the t transform with n−2 df.
pub fn pearson_p(r: f64, n: usize) -> f64 {
    if n < 3 {
        return 1.0;
    }
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// Leave-one-subject-out probe. Rows with an undefined target are dropped.
pub fn loso_probe(metric: &str, x: &[Vec<f64>], target: &[Option<f64>], subjects: &[usize]) -> Result<ProbeResult> {
    if x.len() != target.len() || x.len() != subjects.len() {
        return Err(Error::InvalidInput("probe: row count mismatch".into()));
    }
    let defined: Vec<usize> = (0..x.len())
        .filter(|&i| target[i].is_some_and(f64::is_finite))
        .collect();
    if defined.is_empty() {
        return Err(Error::InsufficientData(format!("{metric} undefined everywhere")));
    }
    if (defined.len() as f64) < MIN_DEFINED_FRACTION * x.len() as f64 {
        return Err(Error::InsufficientData(format!(
            "{metric} defined for {} of {} rows",
            defined.len(),
            x.len()
        )));
    }
    let mut subj: Vec<usize> = defined.iter().map(|&i| subjects[i]).collect();
    subj.sort_unstable();
    subj.dedup();
    if subj.len() < 3 {
        return Err(Error::InsufficientData("probe needs ≥3 subjects".into()));
    }
    let mut truth = Vec::with_capacity(defined.len());
    let mut pred = Vec::with_capacity(defined.len());
    let mut ridge_folds = 0;
    for &s in &subj {
        let train: Vec<usize> = defined.iter().copied().filter(|&i| subjects[i] != s).collect();
        let test: Vec<usize> = defined.iter().copied().filter(|&i| subjects[i] == s).collect();
        let xs: Vec<&[f64]> = train.iter().map(|&i| x[i].as_slice()).collect();
        let ys: Vec<f64> = train.iter().map(|&i| target[i].unwrap()).collect();
        let fit = fit_linear(&xs, &ys)?;
        ridge_folds += usize::from(fit.ridge);
        for &i in &test {
            truth.push(target[i].unwrap());
            pred.push(fit.predict(&x[i]));
        }
    }
    let n = truth.len();
    let mean = truth.iter().sum::<f64>() / n as f64;
    let sst: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let sse: f64 = truth.iter().zip(&pred).map(|(t, p)| (t - p).powi(2)).sum();
    let r2 = if sst > 0.0 { 1.0 - sse / sst } else { f64::NEG_INFINITY };
    let r = pearson(&truth, &pred);
    // Predictions within a fold share one fit, so the effective sample for
    // the correlation test is the number of held-out subjects.
    let p = pearson_p(r, subj.len());
    Ok(ProbeResult {
        metric: metric.to_string(),
        r,
        r2,
        p,
        encoded: p < ENCODED_ALPHA,
        n,
        folds: subj.len(),
        ridge_folds,
    })
}

pub fn write_probe_csv<W: Write>(out: W, results: &[ProbeResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "r", "r2", "p", "encoded", "n", "folds", "ridge_folds"])?;
    for r in results {
        w.write_record([
            r.metric.clone(),
            r.r.to_string(),
            r.r2.to_string(),
            r.p.to_string(),
            r.encoded.to_string(),
            r.n.to_string(),
            r.folds.to_string(),
            r.ridge_folds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
