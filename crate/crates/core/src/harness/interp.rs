//! Interpolation baselines for super-resolution.

use crate::error::{Error, Result};

fn check_knots(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::invalid("knots and values must be non-empty and of equal length"));
    }
    if xs.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("knots must be strictly increasing"));
    }
    Ok(())
}

/// Piecewise-linear interpolation, constant beyond the end knots.
pub fn linear_interpolate(xs: &[f64], ys: &[f64], at: &[f64]) -> Result<Vec<f64>> {
    check_knots(xs, ys)?;
    Ok(at
        .iter()
        .map(|&t| {
            let hi = xs.partition_point(|&x| x < t);
            if hi == 0 {
                ys[0]
            } else if hi == xs.len() {
                ys[xs.len() - 1]
            } else {
                let lo = hi - 1;
                let u = (t - xs[lo]) / (xs[hi] - xs[lo]);
                ys[lo] + u * (ys[hi] - ys[lo])
            }
        })
        .collect())
}

/// Natural cubic spline through the knots, extended linearly past the ends.
pub fn cubic_spline(xs: &[f64], ys: &[f64], at: &[f64]) -> Result<Vec<f64>> {
    check_knots(xs, ys)?;
    let n = xs.len();
    if n < 3 {
        return linear_interpolate(xs, ys, at);
    }
    // second derivatives via the tridiagonal system, natural end conditions
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let mut m = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 1..n - 1 {
        diag[i] = 2.0 * (h[i - 1] + h[i]);
        rhs[i] = 6.0 * ((ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1]);
    }
    for i in 2..n - 1 {
        let f = h[i - 1] / diag[i - 1];
        diag[i] -= f * h[i - 1];
        rhs[i] -= f * rhs[i - 1];
    }
    for i in (1..n - 1).rev() {
        let next = if i + 1 < n - 1 { h[i] * m[i + 1] } else { 0.0 };
        m[i] = (rhs[i] - next) / diag[i];
    }
    let slope = |i: usize, t: f64| -> f64 {
        // derivative of segment i at t
        let (a, b) = (xs[i + 1] - t, t - xs[i]);
        -m[i] * a * a / (2.0 * h[i]) + m[i + 1] * b * b / (2.0 * h[i]) + (ys[i + 1] - ys[i]) / h[i]
            - (m[i + 1] - m[i]) * h[i] / 6.0
    };
    Ok(at
        .iter()
        .map(|&t| {
            if t <= xs[0] {
                return ys[0] + slope(0, xs[0]) * (t - xs[0]);
            }
            if t >= xs[n - 1] {
                return ys[n - 1] + slope(n - 2, xs[n - 1]) * (t - xs[n - 1]);
            }
            let i = xs.partition_point(|&x| x <= t).min(n - 1) - 1;
            let (a, b) = (xs[i + 1] - t, t - xs[i]);
            m[i] * a.powi(3) / (6.0 * h[i])
                + m[i + 1] * b.powi(3) / (6.0 * h[i])
                + (ys[i] / h[i] - m[i] * h[i] / 6.0) * a
                + (ys[i + 1] / h[i] - m[i + 1] * h[i] / 6.0) * b
        })
        .collect())
}

/// Upsamples decimated observations `y_i = x[r (i + 1) - 1]` back to length `n`.
pub fn upsample(y: &[f64], ratio: usize, n: usize, cubic: bool) -> Result<Vec<f64>> {
    let xs: Vec<f64> = (0..y.len()).map(|i| (ratio * (i + 1) - 1) as f64).collect();
    let at: Vec<f64> = (0..n).map(|t| t as f64).collect();
    if cubic {
        cubic_spline(&xs, y, &at)
    } else {
        linear_interpolate(&xs, y, &at)
    }
}
