//! Gaussian identity-link GEE with an exchangeable working correlation
//! and robust (sandwich) covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, spd_solve};

pub const MAX_ALPHA: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkingCorrelation {
    Exchangeable,
    Independence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeeOptions {
    pub correlation: WorkingCorrelation,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GeeOptions {
    fn default() -> Self {
        GeeOptions {
            correlation: WorkingCorrelation::Exchangeable,
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GeeFit {
    pub coef: Vec<f64>,
    pub robust_se: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    #[serde(skip)]
    pub cov: DMatrix<f64>,
    /// Working correlation; 0 when no within-cluster pairs exist.
    pub alpha: f64,
    pub scale: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl GeeFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (x * DVector::from_column_slice(&self.coef)).iter().copied().collect()
    }
}

/// Two-sided p-value from the standard normal.
pub fn normal_two_sided_p(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

struct Cluster {
    rows: Vec<usize>,
}

fn group(clusters: &[usize]) -> Vec<Cluster> {
    let k = clusters.iter().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Cluster> = (0..k).map(|_| Cluster { rows: Vec::new() }).collect();
    for (i, &c) in clusters.iter().enumerate() {
        groups[c].rows.push(i);
    }
    groups.retain(|g| !g.rows.is_empty());
    groups
}

/// Applies R_i^{-1} for exchangeable R_i = (1-α)I + α11ᵀ to each column of
/// `m` (rows of cluster i only).
fn apply_rinv(m: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    if alpha == 0.0 {
        return m.clone();
    }
    let n = m.nrows() as f64;
    let c = alpha / (1.0 + (n - 1.0) * alpha);
    let col_sums = m.row_sum();
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        row -= &col_sums * c;
    }
    out / (1.0 - alpha)
}

fn rows_of(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    x.select_rows(rows)
}

/// Fit `y ~ X` with clusters given as dense indices.
pub fn fit_gee_design(y: &[f64], x: &DMatrix<f64>, clusters: &[usize], opts: GeeOptions) -> Result<GeeFit> {
    let n = y.len();
    let p = x.ncols();
    if x.nrows() != n || clusters.len() != n {
        return Err(Error::InvalidInput("GEE: dimension mismatch".into()));
    }
    let groups = group(clusters);
    if groups.len() < 2 {
        return Err(Error::InsufficientData("GEE needs ≥2 clusters".into()));
    }
    if n <= p {
        return Err(Error::InsufficientData(
            "GEE needs more observations than coefficients".into(),
        ));
    }
    let yv = DVector::from_column_slice(y);
    let xs: Vec<DMatrix<f64>> = groups.iter().map(|g| rows_of(x, &g.rows)).collect();
    let ys: Vec<DVector<f64>> = groups
        .iter()
        .map(|g| DVector::from_iterator(g.rows.len(), g.rows.iter().map(|&i| y[i])))
        .collect();

    let xtx = x.transpose() * x;
    let mut beta = spd_solve(&xtx, &(x.transpose() * &yv))
        .ok_or_else(|| Error::Singular("GEE design matrix is rank deficient".into()))?;

    let n_pairs: f64 = groups
        .iter()
        .map(|g| (g.rows.len() * (g.rows.len() - 1)) as f64 / 2.0)
        .sum();

    let moments = |beta: &DVector<f64>| -> (f64, f64) {
        let r = &yv - x * beta;
        let phi = r.norm_squared() / (n - p) as f64;
        let alpha = match opts.correlation {
            WorkingCorrelation::Independence => 0.0,
            WorkingCorrelation::Exchangeable if n_pairs - p as f64 <= 0.0 || phi <= 0.0 => 0.0,
            WorkingCorrelation::Exchangeable => {
                let cross: f64 = groups
                    .iter()
                    .map(|g| {
                        let s: f64 = g.rows.iter().map(|&i| r[i]).sum();
                        let ss: f64 = g.rows.iter().map(|&i| r[i] * r[i]).sum();
                        (s * s - ss) / 2.0
                    })
                    .sum();
                (cross / ((n_pairs - p as f64) * phi)).clamp(0.0, MAX_ALPHA)
            }
        };
        (phi, alpha)
    };

    let mut converged = false;
    let mut iterations = 0;
    let (mut phi, mut alpha) = moments(&beta);
    while iterations < opts.max_iter {
        iterations += 1;
        let mut b = DMatrix::<f64>::zeros(p, p);
        let mut u = DVector::<f64>::zeros(p);
        for (xi, yi) in xs.iter().zip(&ys) {
            let rinv_x = apply_rinv(xi, alpha);
            b += rinv_x.transpose() * xi;
            u += rinv_x.transpose() * yi;
        }
        let next = spd_solve(&b, &u).ok_or_else(|| Error::Singular("GEE information matrix is singular".into()))?;
        let delta = (&next - &beta).amax();
        beta = next;
        (phi, alpha) = moments(&beta);
        if delta < opts.tol {
            converged = true;
            break;
        }
    }

    // sandwich: B⁻¹ M B⁻¹ with B = Σ XᵀV⁻¹X, M = Σ XᵀV⁻¹ r rᵀ V⁻¹X, V = φR
    let phi_eff = if phi > 0.0 { phi } else { 1.0 };
    let mut bread = DMatrix::<f64>::zeros(p, p);
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for (xi, yi) in xs.iter().zip(&ys) {
        let vinv_x = apply_rinv(xi, alpha) / phi_eff;
        bread += vinv_x.transpose() * xi;
        let ri = yi - xi * &beta;
        let score = vinv_x.transpose() * ri;
        meat += &score * score.transpose();
    }
    let bread_inv = spd_inverse(&bread).ok_or_else(|| Error::Singular("GEE bread matrix is singular".into()))?;
    let cov = &bread_inv * meat * &bread_inv;
    let cov = (&cov + cov.transpose()) * 0.5;
    let robust_se: Vec<f64> = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let coef: Vec<f64> = beta.iter().copied().collect();
    let z: Vec<f64> = coef.iter().zip(&robust_se).map(|(b, s)| b / s).collect();
    let pv = z
        .iter()
        .map(|&z| if z.is_finite() { normal_two_sided_p(z) } else { f64::NAN })
        .collect();
    Ok(GeeFit {
        coef,
        robust_se,
        z,
        p: pv,
        cov,
        alpha,
        scale: phi,
        iterations,
        converged,
    })
}

/// Design `[1, between, within]`.
pub fn mundlak_design(between: &[f64], within: &[f64]) -> DMatrix<f64> {
    let n = between.len();
    DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => between[i],
        _ => within[i],
    })
}

/// Fit Y = β0 + β_B X_B + β_W X_W with exchangeable correlation.
pub fn fit_gee(y: &[f64], between: &[f64], within: &[f64], clusters: &[usize], opts: GeeOptions) -> Result<GeeFit> {
    fit_gee_design(y, &mundlak_design(between, within), clusters, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn ols(y: &[f64], x: &DMatrix<f64>) -> DVector<f64> {
        let xt = x.transpose();
        (&xt * x).lu().solve(&(xt * DVector::from_column_slice(y))).unwrap()
    }

    fn panel(seed: u64, users: usize, weeks: usize) -> (Vec<f64>, DMatrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let mut y = Vec::new();
        let mut rows = Vec::new();
        let mut cl = Vec::new();
        for u in 0..users {
            let re = nrm.sample(&mut rng);
            for _ in 0..weeks {
                let x1 = nrm.sample(&mut rng);
                let x2 = nrm.sample(&mut rng) + re;
                y.push(1.0 + 0.5 * x1 - 0.3 * x2 + re + nrm.sample(&mut rng));
                rows.extend([1.0, x1, x2]);
                cl.push(u);
            }
        }
        let n = y.len();
        (y, DMatrix::from_row_slice(n, 3, &rows), cl)
    }

    #[test]
    fn singleton_clusters_reduce_to_ols() {
        let (y, x, _) = panel(1, 40, 1);
        let cl: Vec<usize> = (0..y.len()).collect();
        let fit = fit_gee_design(&y, &x, &cl, GeeOptions::default()).unwrap();
        assert_eq!(fit.alpha, 0.0);
        let b = ols(&y, &x);
        for j in 0..3 {
            assert!((fit.coef[j] - b[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn independence_equals_ols() {
        let (y, x, cl) = panel(2, 30, 6);
        let opts = GeeOptions {
            correlation: WorkingCorrelation::Independence,
            ..Default::default()
        };
        let fit = fit_gee_design(&y, &x, &cl, opts).unwrap();
        let b = ols(&y, &x);
        for j in 0..3 {
            assert!((fit.coef[j] - b[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn exchangeable_picks_up_cluster_correlation() {
        let (y, x, cl) = panel(3, 60, 6);
        let fit = fit_gee_design(&y, &x, &cl, GeeOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.alpha > 0.2 && fit.alpha < 0.8, "alpha = {}", fit.alpha);
        assert!(fit.robust_se.iter().all(|&s| s > 0.0));
        let eig = SymmetricEigen::new(fit.cov.clone());
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-12));
        assert_eq!(fit.cov, fit.cov.transpose());
    }

    #[test]
    fn rinv_matches_dense_inverse() {
        let alpha = 0.37;
        let n = 4;
        let r = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { alpha });
        let m = DMatrix::from_fn(n, 2, |i, j| (i * 3 + j) as f64 - 2.5);
        let dense = r.try_inverse().unwrap() * &m;
        assert!((apply_rinv(&m, alpha) - dense).amax() < 1e-12);
    }

    #[test]
    fn singular_design_errors() {
        let y = vec![1.0, 2.0, 3.0, 4.0];
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(
            fit_gee_design(&y, &x, &[0, 0, 1, 1], GeeOptions::default()),
            Err(Error::Singular(_))
        ));
        assert!(fit_gee_design(&y, &x, &[0, 0, 0, 0], GeeOptions::default()).is_err());
    }

    #[test]
    fn p_value_reference() {
        let p = normal_two_sided_p(1.959963984540054);
        assert!((p - 0.05).abs() < 1e-12, "{p}");
        assert_eq!(normal_two_sided_p(0.0), 1.0);
    }
}
