use serde::Serialize;

use crate::error::{Error, Result};

/// Between/within split of one predictor, both standardized by the pooled
/// sample SD of the raw values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MundlakPredictor {
    pub between: Vec<f64>,
    pub within: Vec<f64>,
    /// Mean of the observation's own cluster, per observation.
    pub user_mean: Vec<f64>,
    pub grand_mean: f64,
    pub sd: f64,
}

impl MundlakPredictor {
    pub fn reconstruct(&self, i: usize) -> f64 {
        self.sd * (self.between[i] + self.within[i]) + self.grand_mean
    }
}

/// `clusters[i]` is a dense cluster index for observation i.
pub fn mundlak_decompose(x: &[f64], clusters: &[usize]) -> Result<MundlakPredictor> {
    let n = x.len();
    if n != clusters.len() {
        return Err(Error::InvalidInput("predictor/cluster length mismatch".into()));
    }
    if n < 2 {
        return Err(Error::InsufficientData(
            "Mundlak decomposition needs ≥2 observations".into(),
        ));
    }
    let grand_mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - grand_mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 || !sd.is_finite() || x.iter().all(|&v| v == x[0]) {
        return Err(Error::InsufficientData("predictor has zero variance".into()));
    }
    let k = clusters.iter().max().map_or(0, |m| m + 1);
    let mut sum = vec![0.0; k];
    let mut cnt = vec![0usize; k];
    for (&v, &c) in x.iter().zip(clusters) {
        sum[c] += v;
        cnt[c] += 1;
    }
    let means: Vec<f64> = sum
        .iter()
        .zip(&cnt)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let user_mean: Vec<f64> = clusters.iter().map(|&c| means[c]).collect();
    Ok(MundlakPredictor {
        between: user_mean.iter().map(|m| (m - grand_mean) / sd).collect(),
        within: x.iter().zip(&user_mean).map(|(v, m)| (v - m) / sd).collect(),
        user_mean,
        grand_mean,
        sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_user_example() {
        let m = mundlak_decompose(&[2.0, 4.0, 6.0, 8.0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.grand_mean, 5.0);
        assert!((m.sd - (20.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((m.sd - 2.5820).abs() < 1e-4);
        assert!((m.between[0] + 0.7746).abs() < 1e-4);
        assert!((m.within[0] + 0.3873).abs() < 1e-4);
    }

    #[test]
    fn constant_panel_dropped() {
        assert!(mundlak_decompose(&[3.0; 5], &[0, 0, 1, 1, 2]).is_err());
        assert!(mundlak_decompose(&[3.0], &[0]).is_err());
    }

    proptest! {
        #[test]
        fn identity_and_zero_within_means(
            panel in proptest::collection::vec(proptest::collection::vec(-100.0f64..100.0, 1..8), 2..10)
        ) {
            let x: Vec<f64> = panel.iter().flatten().copied().collect();
            let clusters: Vec<usize> = panel.iter().enumerate().flat_map(|(i, v)| std::iter::repeat_n(i, v.len())).collect();
            prop_assume!(x.iter().any(|&v| v != x[0]));
            let m = mundlak_decompose(&x, &clusters).unwrap();
            for (i, &xi) in x.iter().enumerate() {
                prop_assert!((m.reconstruct(i) - xi).abs() <= 1e-12 * xi.abs().max(1.0));
            }
            for c in 0..panel.len() {
                let w: Vec<f64> = (0..x.len()).filter(|&i| clusters[i] == c).map(|i| m.within[i]).collect();
                prop_assert!((w.iter().sum::<f64>() / w.len() as f64).abs() < 1e-12);
            }
        }
    }
}
