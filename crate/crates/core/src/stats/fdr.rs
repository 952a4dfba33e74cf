/// Benjamini–Hochberg step-up q-values, returned in input order:
/// q_(i) = min_{j ≥ i} min(1, p_(j) · m / j).
pub fn bh_fdr(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (1..=m).rev() {
        let i = order[rank - 1];
        running = running.min(p[i] * (m as f64 / rank as f64));
        q[i] = running;
    }
    q
}
