//! Trading strategies: block-plus-flow (semimartingale) descriptions, their
//! inventories and transient impact, and the machinery that approximates them
//! by absolutely continuous trading rates.
//!
//! A semimartingale strategy is a triple `(j_plus, j_minus, V)`: finitely
//! many buy and sell blocks plus a continuous flow component with `V_0 = 0`.
//! The inventory is `X_t = x0 + j_plus_t - j_minus_t + V_t`, right-continuous
//! with jumps aligned to grid nodes. Such strategies are approximated by
//! rates in two steps: blocks are smeared over windows of length `eps`, and
//! the flow is followed by a saturating tracker whose rate is capped at
//! `beta / nu`. The combined rate liquidates the accumulated position over
//! the final window so the rate-driven inventory ends at exactly zero.

use std::sync::Arc;

use thiserror::Error;

use crate::pathsim::{SampledPath, TimeGrid};

/// Tolerance on the terminal inventory of a strategy declared liquidating.
pub const LIQUIDATION_TOL: f64 = 1e-10;

/// Block trades plus a continuous flow; the order-book description of a
/// general trading program.
#[derive(Debug, Clone)]
pub struct SemimartingaleStrategy {
    /// Sorted `(time, size)` buy blocks, sizes positive.
    pub j_plus: Vec<(f64, f64)>,
    /// Sorted `(time, size)` sell blocks, sizes positive.
    pub j_minus: Vec<(f64, f64)>,
    /// Continuous component, `V_0 = 0`.
    pub v: SampledPath,
    /// Whether the strategy must end with zero inventory.
    pub liquidating: bool,
}

/// An absolutely continuous strategy given by its trading rate.
#[derive(Debug, Clone)]
pub struct RateStrategy {
    pub xi: SampledPath,
}

/// Transient price impact along an inventory path.
#[derive(Debug, Clone)]
pub struct ImpactPath {
    pub y: SampledPath,
}

/// Strategy validation and evaluation failures.
#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("jump at t = {t} does not sit on a grid node")]
    JumpOffGrid { t: f64 },
    #[error("jump at t = {t} has nonpositive size {size}")]
    BadJumpSize { t: f64, size: f64 },
    #[error("strategy declared liquidating but ends holding {terminal}")]
    NotLiquidating { terminal: f64 },
    #[error("flow component must start at 0, got {0}")]
    FlowNotAnchored(f64),
}

fn check_jumps(jumps: &[(f64, f64)], grid: &TimeGrid) -> Result<(), StrategyError> {
    let tol = 1e-9 * grid.horizon();
    for &(t, size) in jumps {
        if size <= 0.0 {
            return Err(StrategyError::BadJumpSize { t, size });
        }
        if grid.index_of(t, tol).is_none() {
            return Err(StrategyError::JumpOffGrid { t });
        }
    }
    Ok(())
}

/// Inventory path `X_t = x0 + j_plus_t - j_minus_t + V_t` on `grid`.
///
/// Nodes at jump times carry the post-jump value (right-continuous
/// convention). A liquidating strategy whose terminal inventory misses zero
/// beyond [`LIQUIDATION_TOL`] is rejected.
pub fn inventory(
    theta: &SemimartingaleStrategy,
    x0: f64,
    grid: &Arc<TimeGrid>,
) -> Result<SampledPath, StrategyError> {
    check_jumps(&theta.j_plus, grid)?;
    check_jumps(&theta.j_minus, grid)?;
    if theta.v.first() != 0.0 {
        return Err(StrategyError::FlowNotAnchored(theta.v.first()));
    }
    let tol = 1e-9 * grid.horizon();
    let n = grid.len();
    let mut x = Vec::with_capacity(n);
    let (mut ip, mut im) = (0usize, 0usize);
    let mut jumped = 0.0;
    for i in 0..n {
        let t = grid.t[i];
        while ip < theta.j_plus.len() && theta.j_plus[ip].0 <= t + tol {
            jumped += theta.j_plus[ip].1;
            ip += 1;
        }
        while im < theta.j_minus.len() && theta.j_minus[im].0 <= t + tol {
            jumped -= theta.j_minus[im].1;
            im += 1;
        }
        x.push(x0 + jumped + theta.v.value_at(t));
    }
    if theta.liquidating && x[n - 1].abs() > LIQUIDATION_TOL {
        return Err(StrategyError::NotLiquidating { terminal: x[n - 1] });
    }
    Ok(SampledPath::new(grid.clone(), x))
}

/// Transient impact of an inventory path by the explicit decay formula
///
/// ```text
///   Y_t = gamma X_t - gamma e^{-R_t} (x_pre0 + int_0^t rho_s X_s e^{R_s} ds),
///   R_t = int_0^t rho_s ds,
/// ```
///
/// evaluated with trapezoidal quadrature in an overflow-safe incremental
/// form. `x_pre0` is the holding before any time-zero block.
pub fn impact(x: &SampledPath, x_pre0: f64, rho: &SampledPath, gamma: f64) -> ImpactPath {
    let grid = x.grid.clone();
    let n = grid.len();
    let mut y = Vec::with_capacity(n);
    // decayed = e^{-R_t} x_pre0 + int_0^t rho X e^{R_s - R_t} ds, accumulated
    // stepwise so no exponential of R_t itself is ever formed.
    let mut decayed = x_pre0;
    y.push(gamma * (x.values[0] - decayed));
    for i in 1..n {
        let h = grid.t[i] - grid.t[i - 1];
        let dr = 0.5 * h * (rho.values[i - 1] + rho.values[i]);
        let fade = (-dr).exp();
        let f_prev = rho.values[i - 1] * x.values[i - 1];
        let f_cur = rho.values[i] * x.values[i];
        decayed = decayed * fade + 0.5 * h * (f_prev * fade + f_cur);
        y.push(gamma * (x.values[i] - decayed));
    }
    ImpactPath { y: SampledPath::new(grid, y) }
}

/// Exact advance of the tracking error `err = V - Vtilde` over a span where
/// `V` has constant slope `c`: unsaturated stretches follow the linear
/// relaxation `err' = c - err / nu` in closed form, saturated stretches are
/// linear, and regime switches are located exactly.
fn advance_error(mut err: f64, c: f64, mut tau: f64, beta: f64, nu: f64) -> f64 {
    for _ in 0..64 {
        if tau <= 0.0 {
            return err;
        }
        if err.abs() < beta {
            // err(t) = c nu + (err - c nu) e^{-t / nu}; find the first exit
            // through whichever rail lies between start and asymptote.
            let asymptote = c * nu;
            let end = asymptote + (err - asymptote) * (-tau / nu).exp();
            let rail = if asymptote > beta && err < beta {
                beta
            } else if asymptote < -beta && err > -beta {
                -beta
            } else {
                err = end;
                return err;
            };
            let ratio = (asymptote - rail) / (asymptote - err);
            let t_hit = -nu * ratio.ln();
            if !(t_hit > 0.0) || t_hit >= tau {
                err = end;
                return err;
            }
            err = rail;
            tau -= t_hit;
        } else {
            // Saturated: err' = c -/+ beta / nu, constant.
            let slope = c - err.signum() * beta / nu;
            let end = err + slope * tau;
            // Re-entry happens only if the error moves back toward its rail.
            let rail = err.signum() * beta;
            if slope != 0.0 && (err - rail) * slope <= 0.0 {
                let t_hit = (rail - err) / slope;
                if t_hit >= tau {
                    return end;
                }
                err = rail - f64::EPSILON * rail;
                tau -= t_hit;
            } else {
                return end;
            }
        }
    }
    err
}

/// Follow the flow `V` with the saturating feedback `f(x) = clamp(x, -beta,
/// beta) / nu`; returns the bounded rate path `f(V - Vtilde)` on `V`'s grid.
///
/// The integration is exact for the piecewise-linear interpolant of `V`, so
/// the tracker's guarantee `max |Vtilde| <= max |V|` holds to rounding.
pub fn tracker(v: &SampledPath, beta: f64, nu: f64) -> SampledPath {
    assert!(beta > 0.0 && nu > 0.0);
    let grid = v.grid.clone();
    let n = grid.len();
    let mut rate = Vec::with_capacity(n);
    let mut err = v.values[0];
    rate.push(err.clamp(-beta, beta) / nu);
    for i in 1..n {
        let h = grid.t[i] - grid.t[i - 1];
        let c = (v.values[i] - v.values[i - 1]) / h;
        err = advance_error(err, c, h, beta, nu);
        rate.push(err.clamp(-beta, beta) / nu);
    }
    SampledPath::new(grid, rate)
}

/// Largest tracker gain `nu` (searched per decade, then bisected) for which
/// the empirical bound `sup |int rate - V| <= 3 beta` holds on at least a
/// `1 - delta` fraction of the pilot flows.
pub fn tune_tracker_nu(pilots: &[SampledPath], beta: f64, delta: f64) -> f64 {
    let passes = |nu: f64| {
        let mut ok = 0usize;
        for v in pilots {
            let rate = tracker(v, beta, nu);
            let vtilde = rate.cumtrapz();
            let worst = v
                .values
                .iter()
                .zip(&vtilde.values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if worst <= 3.0 * beta {
                ok += 1;
            }
        }
        ok as f64 >= (1.0 - delta) * pilots.len() as f64
    };
    let mut lo = 1e-4 * beta;
    let mut hi = 8.0 * beta;
    if passes(hi) {
        return hi;
    }
    for _ in 0..30 {
        let mid = (lo * hi).sqrt();
        if passes(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Smear a semimartingale strategy into an absolutely continuous rate.
///
/// On `[0, T - eps]` the rate is the windowed difference quotient of the
/// jumps plus the tracker rate for `V`; over `(T - eps, T]` a constant rate
/// liquidates whatever the first branch accumulated, so the rate-driven
/// inventory (trapezoid rule on the returned grid) ends at exactly zero.
///
/// The returned rate lives on `base` augmented with straddle nodes around
/// every window edge so that the trapezoid rule resolves the rate's jumps.
pub fn mollify(
    theta: &SemimartingaleStrategy,
    x0: f64,
    beta: f64,
    nu: f64,
    eps: f64,
    base: &Arc<TimeGrid>,
) -> RateStrategy {
    let horizon = base.horizon();
    assert!(eps > 0.0 && eps < 0.5 * horizon, "window must satisfy 0 < eps < T/2");
    let kappa = 1e-9 * eps;

    // Window edges where the rate is discontinuous: each smeared jump turns
    // on at t_j and off at t_j + eps; the terminal branch starts at T - eps.
    let mut edges: Vec<f64> = Vec::new();
    for &(tj, _) in theta.j_plus.iter().chain(theta.j_minus.iter()) {
        edges.push(tj);
        edges.push(tj + eps);
    }
    edges.push(horizon - eps);
    let mut times = base.t.clone();
    for &tau in &edges {
        if tau > kappa && tau < horizon {
            times.push(tau - kappa);
            times.push(tau);
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-16 * horizon);
    let grid = TimeGrid::from_times(times);

    let v_on_grid = SampledPath::new(grid.clone(), grid.t.iter().map(|&t| theta.v.value_at(t)).collect());
    let vdot = tracker(&v_on_grid, beta, nu);

    let window_rate = |t: f64| {
        let mut rate = 0.0;
        for &(tj, size) in &theta.j_plus {
            if t >= tj && t < tj + eps {
                rate += size / eps;
            }
        }
        for &(tj, size) in &theta.j_minus {
            if t >= tj && t < tj + eps {
                rate -= size / eps;
            }
        }
        rate
    };

    let n = grid.len();
    let cut = horizon - eps;
    let k = grid.index_of(cut, 1e-12 * horizon).expect("cut node was inserted");
    let mut xi = vec![0.0f64; n];
    for i in 0..=k {
        xi[i] = window_rate(grid.t[i]) + vdot.values[i];
    }
    // Accumulated inventory from the first branch, by the same trapezoid
    // rule used downstream; the constant tail rate cancels it exactly.
    let mut acc = x0;
    for i in 0..k {
        acc += 0.5 * (grid.t[i + 1] - grid.t[i]) * (xi[i] + xi[i + 1]);
    }
    let h_k = grid.t[k + 1] - grid.t[k];
    let tail_weight = 0.5 * h_k + (horizon - grid.t[k + 1]);
    let c = -(acc + 0.5 * h_k * xi[k]) / tail_weight;
    for slot in xi.iter_mut().take(n).skip(k + 1) {
        *slot = c;
    }
    RateStrategy { xi: SampledPath::new(grid, xi) }
}
