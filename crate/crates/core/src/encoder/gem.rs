//! Generalized-mean pooling over the point axis:
//! `out_c = ((1/N) * sum_i h_ic^p)^(1/p)`.
//!
//! Evaluated as `m_c * (mean_i (h_ic / m_c)^p)^(1/p)` with `m_c` the column
//! maximum, which is exact algebraically and cannot overflow for large `p`.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub fn gem_pool(features: ArrayView2<'_, f64>, p: f64) -> Result<Vec<f64>> {
    if !(p.is_finite() && p > 0.0) {
        return Err(Error::invalid(format!("GeM exponent must be positive, got {p}")));
    }
    if features.nrows() == 0 {
        return Err(Error::Empty("GeM over zero points".into()));
    }
    if features.iter().any(|&h| !(h >= 0.0) || !h.is_finite()) {
        return Err(Error::invalid("GeM features must be finite and nonnegative"));
    }
    Ok(gem_unchecked(features, p))
}

pub(crate) fn gem_unchecked(features: ArrayView2<'_, f64>, p: f64) -> Vec<f64> {
    let (n, c) = features.dim();
    let mut max = vec![0.0f64; c];
    for row in features.rows() {
        for (m, &h) in max.iter_mut().zip(row) {
            *m = m.max(h);
        }
    }
    let mut acc = vec![0.0f64; c];
    for row in features.rows() {
        for ((a, &h), &m) in acc.iter_mut().zip(row).zip(&max) {
            if m > 0.0 {
                *a += (h / m).powf(p);
            }
        }
    }
    acc.iter()
        .zip(&max)
        .map(|(&s, &m)| if m > 0.0 { m * (s / n as f64).powf(1.0 / p) } else { 0.0 })
        .collect()
}

/// Backpropagates `d_out` through pooling.
///
/// Returns `(d_features, d_p)`. Channels that pooled to zero pass no gradient.
pub fn gem_pool_backward(
    features: ArrayView2<'_, f64>,
    p: f64,
    pooled: &[f64],
    d_out: &[f64],
) -> (Array2<f64>, f64) {
    let (n, c) = features.dim();
    let inv_n = 1.0 / n as f64;
    let mut d_features = Array2::<f64>::zeros((n, c));
    // sum_i r^p ln r per channel, r = h / out
    let mut log_moment = vec![0.0f64; c];
    for (row, mut drow) in features.rows().into_iter().zip(d_features.rows_mut()) {
        for k in 0..c {
            let g = pooled[k];
            let h = row[k];
            if g <= 0.0 || h <= 0.0 {
                continue;
            }
            let r = h / g;
            let ln_r = r.ln();
            let r_pm1 = ((p - 1.0) * ln_r).exp();
            drow[k] = d_out[k] * inv_n * r_pm1;
            log_moment[k] += r * r_pm1 * ln_r;
        }
    }
    let d_p = (0..c)
        .filter(|&k| pooled[k] > 0.0)
        .map(|k| d_out[k] * pooled[k] * inv_n * log_moment[k] / p)
        .sum();
    (d_features, d_p)
}
