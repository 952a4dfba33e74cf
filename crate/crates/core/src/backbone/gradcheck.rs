use serde::Serialize;

use super::model::{loss_and_grad, MaskedBatch};
use super::params::{AdapterParams, BackboneParams};

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// (tensor name, max relative error over its elements)
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub n_checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn loss(p: &BackboneParams<f64>, a: Option<&AdapterParams<f64>>, batch: &MaskedBatch<f64>) -> f64 {
    loss_and_grad(p, a, batch, None, None).loss
}

/// Compare analytic gradients of every backbone, head and adapter element
/// with central differences.
pub fn gradient_check(
    p: &BackboneParams<f64>,
    adapter: Option<&AdapterParams<f64>>,
    batch: &MaskedBatch<f64>,
    step: f64,
) -> GradCheckReport {
    let mut gb = BackboneParams::<f64>::zeros(p.cfg);
    let mut ga = AdapterParams::<f64>::zeros(p.cfg.d_model);
    loss_and_grad(p, adapter, batch, Some(&mut gb), adapter.map(|_| &mut ga));
    let mut per_tensor = Vec::new();
    let mut n_checked = 0;

    let mut probe = p.clone();
    for (t, g) in gb.tensors().iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..g.data.len() {
            let orig = probe.tensors()[t].data[i];
            probe.tensors_mut()[t].data[i] = orig + step;
            let up = loss(&probe, adapter, batch);
            probe.tensors_mut()[t].data[i] = orig - step;
            let down = loss(&probe, adapter, batch);
            probe.tensors_mut()[t].data[i] = orig;
            worst = worst.max(rel_error(g.data[i], (up - down) / (2.0 * step)));
            n_checked += 1;
        }
        per_tensor.push((g.name.clone(), worst));
    }
    if let Some(a) = adapter {
        let mut probe = a.clone();
        for (t, g) in ga.tensors().iter().enumerate() {
            let mut worst = 0.0f64;
            for i in 0..g.data.len() {
                let orig = probe.tensors()[t].data[i];
                probe.tensors_mut()[t].data[i] = orig + step;
                let up = loss(p, Some(&probe), batch);
                probe.tensors_mut()[t].data[i] = orig - step;
                let down = loss(p, Some(&probe), batch);
                probe.tensors_mut()[t].data[i] = orig;
                worst = worst.max(rel_error(g.data[i], (up - down) / (2.0 * step)));
                n_checked += 1;
            }
            per_tensor.push((format!("adapter.{}", g.name), worst));
        }
    }
    let max_rel_error = per_tensor.iter().map(|x| x.1).fold(0.0, f64::max);
    GradCheckReport {
        per_tensor,
        max_rel_error,
        n_checked,
    }
}
