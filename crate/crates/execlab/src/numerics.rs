//! Small numerical kernels shared across the crate: quadrature, interpolation,
//! deterministic reductions, line fits, and the terminal-layer substep ladder
//! used by the stiff backward solvers.

/// Trapezoid rule over a (possibly non-uniform) abscissa grid.
pub fn trapz(t: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(t.len(), y.len());
    let mut acc = 0.0;
    for i in 1..t.len() {
        acc += 0.5 * (y[i] + y[i - 1]) * (t[i] - t[i - 1]);
    }
    acc
}

/// Cumulative trapezoid integral, anchored at `out[0] = 0`.
pub fn cumtrapz(t: &[f64], y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(t.len(), y.len());
    let mut out = Vec::with_capacity(t.len());
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..t.len() {
        acc += 0.5 * (y[i] + y[i - 1]) * (t[i] - t[i - 1]);
        out.push(acc);
    }
    out
}

/// Index `i` such that `xs[i] <= x <= xs[i + 1]`, clamped to the grid hull.
///
/// `xs` must be sorted ascending with at least two entries.
pub fn bracket(xs: &[f64], x: f64) -> usize {
    let n = xs.len();
    if x <= xs[0] {
        return 0;
    }
    if x >= xs[n - 2] {
        return n - 2;
    }
    // partition_point returns the first index with xs[i] > x.
    xs.partition_point(|&v| v <= x) - 1
}

/// Piecewise-linear interpolation on a sorted abscissa grid, clamped at the ends.
pub fn lerp_sorted(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let i = bracket(xs, x);
    let (x0, x1) = (xs[i], xs[i + 1]);
    if x <= x0 {
        return ys[i];
    }
    if x >= x1 {
        return ys[i + 1];
    }
    let w = (x - x0) / (x1 - x0);
    ys[i] + w * (ys[i + 1] - ys[i])
}

/// Cascade (pairwise) sum: deterministic for a fixed element order regardless
/// of how the elements were produced, and more accurate than a running sum.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let (lo, hi) = xs.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Least-squares line fit `y ~ slope * x + intercept`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Solve a 3x3 linear system `a * x = b` by Gaussian elimination with partial
/// pivoting. Returns `None` for a (numerically) singular matrix.
pub fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let mut m = [[0.0f64; 4]; 3];
    for r in 0..3 {
        m[r][..3].copy_from_slice(&a[r]);
        m[r][3] = b[r];
    }
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        for r in col + 1..3 {
            let f = m[r][col] / m[col][col];
            for c in col..4 {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = [0.0f64; 3];
    for r in (0..3).rev() {
        let mut acc = m[r][3];
        for c in r + 1..3 {
            acc -= m[r][c] * x[c];
        }
        x[r] = acc / m[r][r];
    }
    Some(x)
}

/// Substep times for integrating a stiff terminal layer.
///
/// The backward coefficient systems and the optimal-state dynamics relax at a
/// rate that behaves like `1 / (t_final - t)` close to the horizon, levelling
/// off at `kappa_bar / sqrt(eta)` outside a boundary layer of width
/// `O(sqrt(eta))`. Uniform grid steps cannot resolve that layer, so inside it
/// we ladder the step size with the distance to the terminal time:
///
/// * first-step scale `sqrt(eta) / (4 * max(terminal_rate, kappa_bar))`, which
///   resolves the initial collapse from a large terminal value,
/// * growth proportional to the distance `s = t_final - t` (step `<= s / 8`),
///   which meets the near-terminal step bound `sqrt(eta) / (4 kappa_bar)` at
///   the layer edge `s ~ 2 sqrt(eta) / kappa_bar`.
///
/// Returns interior times strictly between `t_lo` and `t_hi`, sorted
/// descending (the natural order for a backward march); forward integrators
/// reverse it. Outside the layer the rule exceeds the interval length and the
/// result is empty. `refine >= 1` shrinks every substep (used by
/// self-convergence tests).
pub fn terminal_layer_steps(
    t_hi: f64,
    t_lo: f64,
    t_final: f64,
    sqrt_eta: f64,
    kappa_bar: f64,
    terminal_rate: f64,
    refine: f64,
) -> Vec<f64> {
    debug_assert!(t_hi > t_lo);
    let refine = refine.max(1.0);
    let h_first = sqrt_eta / (4.0 * terminal_rate.max(kappa_bar).max(1e-12));
    let s_start = (t_final - t_hi).max(0.0);
    let s_end = t_final - t_lo;
    let mut out = Vec::new();
    let mut s = s_start;
    loop {
        let h = (s / 8.0).max(h_first) / refine;
        s += h;
        if s >= s_end * (1.0 - 1e-12) - 1e-15 {
            break;
        }
        out.push(t_final - s);
        if out.len() > 2_000_000 {
            // Pathological inputs (eta ~ 0 with a huge terminal rate); bail
            // rather than allocate without bound.
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapz_matches_exact_on_linear() {
        let t: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let y: Vec<f64> = t.iter().map(|&x| 3.0 * x + 1.0).collect();
        assert!((trapz(&t, &y) - 2.5).abs() < 1e-14);
    }

    #[test]
    fn cumtrapz_endpoint_agrees_with_trapz() {
        let t: Vec<f64> = (0..=57).map(|i| (i as f64 / 57.0).powi(2)).collect();
        let y: Vec<f64> = t.iter().map(|&x| x.exp()).collect();
        let c = cumtrapz(&t, &y);
        assert!((c.last().unwrap() - trapz(&t, &y)).abs() < 1e-14);
    }

    #[test]
    fn lerp_clamps_and_interpolates() {
        let xs = [0.0, 1.0, 3.0];
        let ys = [0.0, 2.0, 6.0];
        assert_eq!(lerp_sorted(&xs, &ys, -1.0), 0.0);
        assert_eq!(lerp_sorted(&xs, &ys, 4.0), 6.0);
        assert!((lerp_sorted(&xs, &ys, 2.0) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn pairwise_sum_is_order_stable() {
        let xs: Vec<f64> = (0..1023).map(|i| ((i * 2654435761u64 as usize) % 997) as f64 * 1e-3).collect();
        let a = pairwise_sum(&xs);
        let b = pairwise_sum(&xs);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn solve3_recovers_known_solution() {
        let a = [[2.0, 1.0, -1.0], [-3.0, -1.0, 2.0], [-2.0, 1.0, 2.0]];
        let x = solve3(a, [8.0, -11.0, -3.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
        assert!((x[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_line_exact_on_affine_data() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v| -0.75 * v + 2.0).collect();
        let (slope, intercept) = fit_line(&x, &y);
        assert!((slope + 0.75).abs() < 1e-12);
        assert!((intercept - 2.0).abs() < 1e-12);
    }

    #[test]
    fn layer_steps_shrink_toward_terminal() {
        let steps = terminal_layer_steps(0.999, 0.9, 1.0, 0.1, 2.0, 100.0, 1.0);
        assert!(!steps.is_empty());
        // Descending, inside the interval, and spacing grows away from T.
        for w in steps.windows(2) {
            assert!(w[0] > w[1]);
        }
        assert!(steps[0] < 0.999 && *steps.last().unwrap() > 0.9);
        let first_gap = 0.999 - steps[0];
        let last_gap = steps[steps.len() - 2] - steps[steps.len() - 1];
        assert!(first_gap < last_gap);
    }

    #[test]
    fn layer_steps_empty_far_from_terminal() {
        let steps = terminal_layer_steps(0.35, 0.3, 1.0, 0.1, 2.0, 10.0, 1.0);
        assert!(steps.is_empty());
    }
}
