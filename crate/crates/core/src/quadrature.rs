//! One-dimensional quadrature and finite-difference weights on (possibly
//! non-uniform) time grids.

/// Fornberg weights for the `m`-th derivative at `x0` using nodes `xs`.
pub fn fornberg_weights(x0: f64, xs: &[f64], m: usize) -> Vec<f64> {
    let n = xs.len();
    let mut c = vec![vec![0.0; m + 1]; n];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[m]).collect()
}

/// First-derivative stencil at sample `j` of `times` using `width` nearest
/// samples (shifted one-sided near the ends). Returns `(first_index, weights)`.
pub fn derivative_stencil(times: &[f64], j: usize, width: usize) -> (usize, Vec<f64>) {
    let w = width.min(times.len());
    let half = w / 2;
    let start = j.saturating_sub(half).min(times.len() - w);
    (start, fornberg_weights(times[j], &times[start..start + w], 1))
}

/// `∫_{from}^{T} f dt` for samples `values` at `times`.
///
/// Uses composite Simpson when `from` coincides with a sample, the remaining
/// samples are uniform and the interval count is even; the trapezoid rule
/// (with a linearly interpolated partial first interval) otherwise.
pub fn integrate_from(times: &[f64], values: &[f64], from: f64) -> f64 {
    let n = times.len();
    assert_eq!(n, values.len());
    if n < 2 || from >= times[n - 1] {
        return 0.0;
    }
    let first = times.iter().position(|&t| t >= from).unwrap_or(n - 1);
    let scale = (times[n - 1] - times[0]).abs().max(1.0);
    let on_grid = (times[first] - from).abs() <= 1e-12 * scale;
    if on_grid {
        let m = n - 1 - first;
        let h = (times[n - 1] - times[first]) / m as f64;
        let uniform = (first..n).all(|i| (times[i] - (times[first] + (i - first) as f64 * h)).abs() <= 1e-9 * h);
        if m >= 2 && m % 2 == 0 && uniform {
            let mut s = values[first] + values[n - 1];
            for i in first + 1..n - 1 {
                s += if (i - first) % 2 == 1 { 4.0 } else { 2.0 } * values[i];
            }
            return s * h / 3.0;
        }
    }
    let mut s = 0.0;
    if !on_grid && first > 0 {
        let (t0, t1) = (times[first - 1], times[first]);
        let f0 = values[first - 1] + (values[first] - values[first - 1]) * (from - t0) / (t1 - t0);
        s += 0.5 * (f0 + values[first]) * (t1 - from);
    }
    for i in first..n - 1 {
        s += 0.5 * (values[i] + values[i + 1]) * (times[i + 1] - times[i]);
    }
    s
}
