//! Small numeric helpers for convergence studies.

/// Least-squares slope of `log(err)` against `log(h)`. Pairs whose error is
/// not positive and finite are skipped; `None` if fewer than two remain.
pub fn loglog_slope(h: &[f64], err: &[f64]) -> Option<f64> {
    loglog_slope_above(h, err, 0.0)
}

/// As [`loglog_slope`], also skipping errors below `floor`.
pub fn loglog_slope_above(h: &[f64], err: &[f64], floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = h
        .iter()
        .zip(err)
        .filter(|(h, e)| **h > 0.0 && e.is_finite() && **e > floor && **e > 0.0)
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// Pairwise observed orders `log(e_k / e_{k+1}) / log(h_k / h_{k+1})`.
pub fn pairwise_orders(h: &[f64], err: &[f64]) -> Vec<f64> {
    h.windows(2)
        .zip(err.windows(2))
        .map(|(h, e)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
        .collect()
}
