//! Ablation verdicts (ΔRMSE% and sign consistency against an
//! intercept-only model) and the threshold sweep grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DELTA_GRID: [f64; 7] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 5.0];
pub const SIGN_GRID: [f64; 6] = [50.0, 55.0, 60.0, 65.0, 70.0, 75.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Robust,
    Unstable,
    Redundant,
    Noise,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Robust => "Robust",
            Verdict::Unstable => "Unstable",
            Verdict::Redundant => "Redundant",
            Verdict::Noise => "Noise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerdictThresholds {
    /// ΔRMSE must exceed this many percent.
    pub delta_rmse_pct: f64,
    /// Sign consistency must exceed this many percent.
    pub sign_pct: f64,
}

impl Default for VerdictThresholds {
    fn default() -> Self {
        VerdictThresholds {
            delta_rmse_pct: 0.5,
            sign_pct: 60.0,
        }
    }
}

/// How sign consistency is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConsistency {
    /// Fraction of observations where sign(Ŷ - Ȳ) = sign(Y - Ȳ); observations
    /// with Y = Ȳ are left out of the denominator.
    #[default]
    OutcomeAgreement,
    /// Fraction of nonzero prediction deviations sharing the majority sign.
    PredictionMajority,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationMetrics {
    pub rmse_model: f64,
    pub rmse_null: f64,
    pub delta_rmse_pct: f64,
    pub sign_pct: f64,
}

pub fn classify(delta_rmse_pct: f64, sign_pct: f64, t: VerdictThresholds) -> Verdict {
    match (delta_rmse_pct > t.delta_rmse_pct, sign_pct > t.sign_pct) {
        (true, true) => Verdict::Robust,
        (true, false) => Verdict::Unstable,
        (false, true) => Verdict::Redundant,
        (false, false) => Verdict::Noise,
    }
}

fn rmse(y: &[f64], pred: impl Iterator<Item = f64>) -> f64 {
    let sse: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    (sse / y.len() as f64).sqrt()
}

/// In-sample comparison of fitted predictions against the grand mean.
pub fn ablation_metrics(y: &[f64], fitted: &[f64], mode: SignConsistency) -> Result<AblationMetrics> {
    if y.is_empty() || y.len() != fitted.len() {
        return Err(Error::InvalidInput("ablation: length mismatch".into()));
    }
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let rmse_null = rmse(y, std::iter::repeat(ybar));
    if rmse_null == 0.0 || y.iter().all(|&v| v == y[0]) {
        return Err(Error::InsufficientData("outcome has zero variance".into()));
    }
    let rmse_model = rmse(y, fitted.iter().copied());
    let sign_pct = match mode {
        SignConsistency::OutcomeAgreement => {
            let (mut agree, mut total) = (0usize, 0usize);
            for (&yi, &fi) in y.iter().zip(fitted) {
                if yi == ybar {
                    continue;
                }
                total += 1;
                if (fi - ybar).signum() == (yi - ybar).signum() && fi != ybar {
                    agree += 1;
                }
            }
            if total == 0 {
                0.0
            } else {
                100.0 * agree as f64 / total as f64
            }
        }
        SignConsistency::PredictionMajority => {
            let pos = fitted.iter().filter(|&&f| f > ybar).count();
            let neg = fitted.iter().filter(|&&f| f < ybar).count();
            if pos + neg == 0 {
                0.0
            } else {
                100.0 * pos.max(neg) as f64 / (pos + neg) as f64
            }
        }
    };
    Ok(AblationMetrics {
        rmse_model,
        rmse_null,
        delta_rmse_pct: 100.0 * (rmse_null - rmse_model) / rmse_null,
        sign_pct,
    })
}

/// Robust counts over the ΔRMSE × sign grid; rows follow `deltas`.
pub fn verdict_threshold_sweep(inputs: &[(f64, f64)], deltas: &[f64], signs: &[f64]) -> Vec<Vec<usize>> {
    deltas
        .iter()
        .map(|&d| {
            signs
                .iter()
                .map(|&s| {
                    let t = VerdictThresholds {
                        delta_rmse_pct: d,
                        sign_pct: s,
                    };
                    inputs
                        .iter()
                        .filter(|(dr, sp)| classify(*dr, *sp, t) == Verdict::Robust)
                        .count()
                })
                .collect()
        })
        .collect()
}
