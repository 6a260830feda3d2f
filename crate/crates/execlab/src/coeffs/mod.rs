//! Backward coefficient systems.
//!
//! The optimal pre-limit strategy is a linear feedback in the inventory and
//! the transient impact state; its gains come from a backward Riccati-type
//! system. In the scaled variables used throughout this crate the system is
//! `(b, d, e)`:
//!
//! * `b` — the value coefficient multiplying the impact state (terminal
//!   value 1),
//! * `d` — the inventory feedback gain, of size `O(1)` in the interior but
//!   `~ sqrt(eta) / (T - t)` near the horizon (singular for strict
//!   liquidation),
//! * `e` — the impact feedback gain.
//!
//! As `eta -> 0` the pair `(d, e)` converges to the explicit functions
//! `d0 = (lambda + gamma rho b0) / phi` and `e0 = rho (2 - b0) / phi` of the
//! limit value coefficient `b0`, which solves a scalar backward equation and
//! has a closed form when `lambda` is proportional to `rho`.
//!
//! Solvers come in three flavors: closed form (proportional family),
//! deterministic backward integration (no factor noise), and a one-factor
//! semilinear PDE (see [`pde`]). All of them enforce the a priori envelopes;
//! leaving an envelope by more than the documented tolerance is an error, not
//! a warning, because every downstream module assumes the envelopes hold.

mod cache;
mod pde;

pub use cache::{load_limit, load_prelimit, save_limit, save_prelimit, CacheError};
pub use pde::{chi_grid_for, solve_b0_pde, solve_prelimit_pde};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::model::{ModelParams, Penalty};
use crate::numerics;
use crate::pathsim::{SampledPath, TimeGrid};

/// Fixed-point tolerance for the implicit PDE time steps.
pub const PICARD_TOL: f64 = 1e-10;
/// Iteration cap per implicit time step before the step is split.
pub const PICARD_MAX_ITERS: usize = 50;
/// Envelope tolerance for the (non-stiff) deterministic limit solver.
pub const B0_BOUND_TOL: f64 = 1e-9;
/// Envelope tolerance for the stiff pre-limit and PDE solvers.
pub const PDE_BOUND_TOL: f64 = 1e-6;

/// Tuning knobs for the stiff backward solvers.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Strict-liquidation start-up offset scale: the singular solve starts at
    /// `T - delta0 * sqrt(eta)` from the asymptotic profile.
    pub delta0: f64,
    /// Substep refinement factor (`>= 1`); self-convergence tests shrink the
    /// terminal-layer ladder with the grid by raising this.
    pub refine: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { delta0: 1e-2, refine: 1.0 }
    }
}

/// Errors from the coefficient solvers.
#[derive(Debug, Error)]
pub enum SolveError {
    #[error("{what} = {value} leaves its a priori envelope [{lo}, {hi}] at t = {t}, chi = {chi}")]
    BoundViolation { what: &'static str, t: f64, chi: f64, value: f64, lo: f64, hi: f64 },
    #[error("implicit step did not converge at t = {t} (residual {residual} after {iters} iterations)")]
    PicardDiverged { t: f64, residual: f64, iters: usize },
    #[error("Newton step singular at t = {t}")]
    Singular { t: f64 },
    #[error("{0}")]
    Invalid(String),
}

enum FieldStorage {
    /// One value per time node; the factor coordinate is ignored.
    Deterministic(Vec<f64>),
    /// Row-major `time x chi` matrix on a uniform chi grid.
    Spatial { chi: Vec<f64>, values: Vec<f64> },
}

/// A scalar coefficient field over `(t, chi)`, linearly interpolated in time
/// and (where present) in the factor coordinate.
///
/// Evaluations outside the chi hull clamp to the hull and count the event;
/// a healthy configuration keeps the clamp share negligible (the hull is
/// sized in standard deviations of the terminal factor).
pub struct CoefficientField {
    grid: Arc<TimeGrid>,
    storage: FieldStorage,
    clamp_events: AtomicU64,
    evals: AtomicU64,
}

impl Clone for CoefficientField {
    fn clone(&self) -> Self {
        CoefficientField {
            grid: self.grid.clone(),
            storage: match &self.storage {
                FieldStorage::Deterministic(v) => FieldStorage::Deterministic(v.clone()),
                FieldStorage::Spatial { chi, values } => {
                    FieldStorage::Spatial { chi: chi.clone(), values: values.clone() }
                }
            },
            clamp_events: AtomicU64::new(self.clamp_events.load(Ordering::Relaxed)),
            evals: AtomicU64::new(self.evals.load(Ordering::Relaxed)),
        }
    }
}

impl std::fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientField")
            .field("nodes", &self.grid.len())
            .field("spatial", &matches!(self.storage, FieldStorage::Spatial { .. }))
            .finish()
    }
}

impl CoefficientField {
    pub fn deterministic(grid: Arc<TimeGrid>, values: Vec<f64>) -> Self {
        assert_eq!(grid.len(), values.len());
        CoefficientField {
            grid,
            storage: FieldStorage::Deterministic(values),
            clamp_events: AtomicU64::new(0),
            evals: AtomicU64::new(0),
        }
    }

    pub fn spatial(grid: Arc<TimeGrid>, chi: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(grid.len() * chi.len(), values.len());
        assert!(chi.len() >= 2);
        CoefficientField {
            grid,
            storage: FieldStorage::Spatial { chi, values },
            clamp_events: AtomicU64::new(0),
            evals: AtomicU64::new(0),
        }
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn chi_grid(&self) -> Option<&[f64]> {
        match &self.storage {
            FieldStorage::Deterministic(_) => None,
            FieldStorage::Spatial { chi, .. } => Some(chi),
        }
    }

    /// Bilinear evaluation at `(t, chi)`, clamped to the grid hull.
    pub fn eval(&self, t: f64, chi: f64) -> f64 {
        self.evals.fetch_add(1, Ordering::Relaxed);
        let ts = &self.grid.t;
        let i = numerics::bracket(ts, t);
        let w = ((t - ts[i]) / (ts[i + 1] - ts[i])).clamp(0.0, 1.0);
        match &self.storage {
            FieldStorage::Deterministic(v) => v[i] + w * (v[i + 1] - v[i]),
            FieldStorage::Spatial { chi: xs, values } => {
                let m = xs.len();
                let mut x = chi;
                if x < xs[0] || x > xs[m - 1] {
                    self.clamp_events.fetch_add(1, Ordering::Relaxed);
                    x = x.clamp(xs[0], xs[m - 1]);
                }
                let j = numerics::bracket(xs, x);
                let wx = ((x - xs[j]) / (xs[j + 1] - xs[j])).clamp(0.0, 1.0);
                let row = |ti: usize| {
                    let lo = values[ti * m + j];
                    let hi = values[ti * m + j + 1];
                    lo + wx * (hi - lo)
                };
                let a = row(i);
                let b = row(i + 1);
                a + w * (b - a)
            }
        }
    }

    /// Stored value at time node `ti` (and chi node `xj` for spatial fields).
    pub fn node(&self, ti: usize, xj: usize) -> f64 {
        match &self.storage {
            FieldStorage::Deterministic(v) => v[ti],
            FieldStorage::Spatial { chi, values } => values[ti * chi.len() + xj],
        }
    }

    pub fn n_chi(&self) -> usize {
        match &self.storage {
            FieldStorage::Deterministic(_) => 1,
            FieldStorage::Spatial { chi, .. } => chi.len(),
        }
    }

    /// Number of hull-clamped evaluations so far.
    pub fn clamp_count(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }

    /// Total number of evaluations so far.
    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    fn raw(&self) -> &[f64] {
        match &self.storage {
            FieldStorage::Deterministic(v) => v,
            FieldStorage::Spatial { values, .. } => values,
        }
    }

    /// Largest absolute nodewise difference against another field on the same
    /// grid layout.
    pub fn sup_diff(&self, other: &CoefficientField) -> f64 {
        let a = self.raw();
        let b = other.raw();
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

/// The stiff pre-limit gain triple for one `(eta, N)`.
#[derive(Debug, Clone)]
pub struct PreLimitCoefficients {
    pub b: CoefficientField,
    pub d: CoefficientField,
    pub e: CoefficientField,
    pub eta: f64,
    pub penalty: Penalty,
}

impl PreLimitCoefficients {
    /// Unscaled value coefficient on the inventory,
    /// `a = sqrt(eta) d + gamma b`; exact by construction.
    pub fn a_at(&self, t: f64, chi: f64, gamma: f64) -> f64 {
        self.eta.sqrt() * self.d.eval(t, chi) + gamma * self.b.eval(t, chi)
    }

    /// Unscaled cross coefficient, `c = (sqrt(eta) e + b - 1) / gamma`.
    pub fn c_at(&self, t: f64, chi: f64, gamma: f64) -> f64 {
        (self.eta.sqrt() * self.e.eval(t, chi) + self.b.eval(t, chi) - 1.0) / gamma
    }
}

/// The limit gain triple (`eta = 0`).
#[derive(Debug, Clone)]
pub struct LimitCoefficients {
    pub b0: CoefficientField,
    pub d0: CoefficientField,
    pub e0: CoefficientField,
}

/// Closed-form limit value coefficient for the proportional family
/// `lambda = c * rho`, as a function of the accumulated resilience
/// `r = integral of rho over [t, T]`.
///
/// * `c = 0` (no inventory risk): `2 / (2 + r)`.
/// * `c > 0`: `(-c + sqrt(c (c + 2 gamma)) * coth(arcoth((c + gamma) /
///   sqrt(c (c + 2 gamma))) + sqrt(c / (c + 2 gamma)) * r)) / gamma`.
///
/// Both branches return exactly 1 at `r = 0`.
pub fn closed_form_b0(c: f64, gamma: f64, r: f64) -> f64 {
    assert!(c >= 0.0 && gamma > 0.0 && r >= 0.0, "need c >= 0, gamma > 0, r >= 0");
    if c == 0.0 {
        return 2.0 / (2.0 + r);
    }
    let s = (c * (c + 2.0 * gamma)).sqrt();
    // arcoth(x) = ln((x + 1) / (x - 1)) / 2 with x = (c + gamma) / s > 1.
    let arcoth = 0.5 * ((c + gamma + s) / (c + gamma - s)).ln();
    let z = arcoth + (c / (c + 2.0 * gamma)).sqrt() * r;
    (-c + s / z.tanh()) / gamma
}

/// Backward drivers of the scaled pre-limit system in the terminal-distance
/// variable `s = T - t`, so that all three components are integrated forward
/// in `s` from their terminal data. `u = (b, d, e)`.
fn prelimit_rhs(u: [f64; 3], rho: f64, lambda: f64, gamma: f64, inv_sqrt_eta: f64) -> [f64; 3] {
    let [b, d, e] = u;
    [
        d * e - rho * b,
        (lambda + gamma * rho * b - d * d - gamma * d * e) * inv_sqrt_eta,
        -2.0 * rho * e + (rho * (2.0 - b) - gamma * e * e - d * e) * inv_sqrt_eta,
    ]
}

/// Exact flow of the frozen-coefficient Riccati equation
/// `sqrt(eta) y' = g - y^2` over a step `tau = h / sqrt(eta)`, started at
/// `y0`.
///
/// Written in Moebius form so the tanh and coth branches share one formula;
/// `y0 = sqrt(g)` is an exact fixed point. This is the workhorse for the
/// inventory gain `d`: its upper envelope is itself a trajectory of this flow
/// with `g` frozen at the envelope level, so integrating `d` with the exact
/// flow (and `g` below the envelope level) preserves the envelope to rounding
/// instead of overshooting the `~ 1/s` blow-up the way a finite-difference
/// step does.
fn riccati_flow(y0: f64, g: f64, tau: f64) -> Option<f64> {
    if g > 0.0 {
        let k = g.sqrt();
        let w = (k * tau).tanh();
        let denom = k + y0 * w;
        if denom <= 0.0 {
            return None;
        }
        Some(k * (y0 + k * w) / denom)
    } else if g == 0.0 {
        let denom = 1.0 + tau * y0;
        if denom <= 0.0 {
            return None;
        }
        Some(y0 / denom)
    } else {
        let k = (-g).sqrt();
        let w = (k * tau).tan();
        let denom = k + y0 * w;
        if !w.is_finite() || denom <= 0.0 {
            return None;
        }
        Some(k * (y0 - k * w) / denom)
    }
}

/// One implicit step of the pre-limit system in the terminal-distance
/// variable, from `s_from` to `s_to`.
///
/// The stiff inventory gain is advanced by [`riccati_flow`] with its regular
/// part `g = lambda + gamma rho b - gamma d e` frozen at the step midpoint
/// (that combination stays `O(1)` through the strict-liquidation
/// singularity); `e` is advanced by a monotone scalar backward-Euler solve
/// and `b` by linear backward Euler. The three updates are iterated to a
/// joint fixed point and the step splits itself on convergence trouble.
fn prelimit_implicit_step(
    u: [f64; 3],
    s_from: f64,
    s_to: f64,
    coeff_at: &dyn Fn(f64) -> (f64, f64),
    gamma: f64,
    inv_sqrt_eta: f64,
    depth: u32,
) -> Result<[f64; 3], SolveError> {
    let h = s_to - s_from;
    let tau = h * inv_sqrt_eta;
    let (rho0, lambda0) = coeff_at(s_from);
    let (rho1, lambda1) = coeff_at(s_to);
    let regular_part =
        |v: [f64; 3], rho: f64, lambda: f64| lambda + gamma * rho * v[0] - gamma * v[1] * v[2];
    let g0 = regular_part(u, rho0, lambda0);

    let mut v = u;
    let mut converged = false;
    'outer: for _ in 0..50 {
        let g_mid = 0.5 * (g0 + regular_part(v, rho1, lambda1));
        let Some(d1) = riccati_flow(u[1], g_mid, tau) else {
            break 'outer;
        };
        // e: scalar backward Euler, monotone increasing residual, so Newton
        // from the non-negative side converges unconditionally.
        let source = u[2] + h * rho1 * (2.0 - v[0]) * inv_sqrt_eta;
        let mut e1 = v[2].max(0.0);
        for _ in 0..30 {
            let f = e1 * (1.0 + 2.0 * h * rho1 + h * (gamma * e1 + d1) * inv_sqrt_eta) - source;
            let fp = 1.0 + 2.0 * h * rho1 + h * (2.0 * gamma * e1 + d1) * inv_sqrt_eta;
            let step = f / fp;
            e1 -= step;
            if !e1.is_finite() {
                break 'outer;
            }
            if step.abs() <= 1e-14 * e1.abs().max(1.0) {
                break;
            }
        }
        let b1 = (u[0] + h * d1 * e1) / (1.0 + h * rho1);
        let delta = (b1 - v[0])
            .abs()
            .max((d1 - v[1]).abs() / (1.0 + v[1].abs()))
            .max((e1 - v[2]).abs());
        v = [b1, d1, e1];
        if delta < 1e-13 {
            converged = true;
            break;
        }
    }
    if converged && v.iter().all(|x| x.is_finite()) {
        return Ok(v);
    }
    if depth >= 20 {
        return Err(SolveError::Singular { t: s_to });
    }
    // Halve the step and try again; every piece converges for small enough
    // steps.
    let mid = 0.5 * (s_from + s_to);
    let half = prelimit_implicit_step(u, s_from, mid, coeff_at, gamma, inv_sqrt_eta, depth + 1)?;
    prelimit_implicit_step(half, mid, s_to, coeff_at, gamma, inv_sqrt_eta, depth + 1)
}

/// Terminal data of the scaled system at `t = T` (finite penalty) or at the
/// singular start-up point `T - delta0 sqrt(eta)` (strict liquidation).
///
/// For strict liquidation the gains blow up at the horizon like the
/// similarity profile `d ~ sqrt(eta) / (T - t)`, `e ~ rho (T - t) /
/// sqrt(eta)`; nodes inside the start-up offset are filled with that profile
/// (the terminal node itself caps the distance at a small fraction of the
/// last grid gap, since the singular value is not representable).
fn terminal_data(params: &ModelParams, delta0: f64) -> Result<(f64, [f64; 3]), SolveError> {
    let sqrt_eta = params.sqrt_eta();
    match params.penalty {
        Penalty::Finite(n) => {
            if n <= params.gamma {
                return Err(SolveError::Invalid(format!(
                    "finite penalty {n} must exceed gamma = {} for a positive terminal gain",
                    params.gamma
                )));
            }
            Ok((0.0, [1.0, (n - params.gamma) / sqrt_eta, 0.0]))
        }
        Penalty::Strict => {
            let delta = delta0 * sqrt_eta;
            Ok((delta, [1.0, sqrt_eta / delta, 0.0]))
        }
    }
}

/// The terminal node of a strict solve stores the singular gain at this
/// fraction of the last grid gap instead of its (infinite) exact value. The
/// cap must sit far enough below the grid scale that state integration
/// against the interpolated gain still wipes out the inventory left in the
/// final interval.
pub(crate) const PADDING_FLOOR_SHRINK: f64 = 256.0;

/// Value of the strict-liquidation similarity profile at terminal distance
/// `s`, used to pad grid nodes between the start-up point and the horizon.
fn strict_padding(s: f64, s_floor: f64, rho: f64, sqrt_eta: f64) -> [f64; 3] {
    [1.0, sqrt_eta / s.max(s_floor), rho * s / sqrt_eta]
}

fn check_prelimit_envelopes(
    u: [f64; 3],
    s: f64,
    t: f64,
    chi: f64,
    params: &ModelParams,
    tol: f64,
) -> Result<(), SolveError> {
    let bounds = params.bounds();
    let sqrt_eta = params.sqrt_eta();
    let [b, d, e] = u;
    let b_lo = (-params.rho_bounds.1 * s).exp();
    if b < b_lo - tol || b > 1.0 + tol {
        return Err(SolveError::BoundViolation { what: "b", t, chi, value: b, lo: b_lo, hi: 1.0 });
    }
    let z = bounds.kappa_bar * s / sqrt_eta;
    let e_hi = bounds.kappa_bar / params.gamma * z.tanh();
    if e < -tol || e > e_hi + tol {
        return Err(SolveError::BoundViolation { what: "e", t, chi, value: e, lo: 0.0, hi: e_hi });
    }
    // coth envelope for d; skip the upper check at the terminal node where it
    // is infinite.
    if d <= 0.0 {
        return Err(SolveError::BoundViolation {
            what: "d",
            t,
            chi,
            value: d,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    if z > 1e-12 {
        let d_hi = bounds.kappa_bar / z.tanh();
        if d > d_hi + tol {
            return Err(SolveError::BoundViolation {
                what: "d",
                t,
                chi,
                value: d,
                lo: 0.0,
                hi: d_hi,
            });
        }
    }
    Ok(())
}

/// Solve the stiff scaled pre-limit system backward along deterministic
/// coefficient paths.
///
/// Marches node to node with implicit substeps laddered inside the terminal
/// layer (see [`numerics::terminal_layer_steps`]); enforces the a priori
/// envelopes at every grid node to within [`PDE_BOUND_TOL`].
pub fn solve_prelimit_deterministic(
    params: &ModelParams,
    rho: &SampledPath,
    lambda: &SampledPath,
    opts: &SolverOptions,
) -> Result<PreLimitCoefficients, SolveError> {
    if params.eta <= 0.0 {
        return Err(SolveError::Invalid("pre-limit solve requires eta > 0".into()));
    }
    let grid = rho.grid.clone();
    let horizon = grid.horizon();
    let n = grid.len();
    let sqrt_eta = params.sqrt_eta();
    let inv_sqrt_eta = 1.0 / sqrt_eta;
    let gamma = params.gamma;
    let kappa_bar = params.bounds().kappa_bar;

    let coeff_at = |s: f64| {
        let t = horizon - s;
        (rho.value_at(t), lambda.value_at(t))
    };

    let (s_start, u_start) = terminal_data(params, opts.delta0)?;

    let mut b = vec![0.0f64; n];
    let mut d = vec![0.0f64; n];
    let mut e = vec![0.0f64; n];

    // Pad nodes between the start-up point and the horizon for the strict
    // solve; for finite penalties the start is the horizon itself.
    let s_floor = (grid.t[n - 1] - grid.t[n - 2]) / PADDING_FLOOR_SHRINK;
    let mut i = n - 1;
    while horizon - grid.t[i] < s_start - 1e-15 {
        let s = horizon - grid.t[i];
        let pad = strict_padding(s, s_floor, rho.values[i], sqrt_eta);
        b[i] = pad[0];
        d[i] = pad[1];
        e[i] = pad[2];
        i -= 1;
    }

    let mut s_cur = s_start;
    let mut u = u_start;
    if (horizon - grid.t[i] - s_start).abs() <= 1e-15 {
        b[i] = u[0];
        d[i] = u[1];
        e[i] = u[2];
        if i == 0 {
            return finish_prelimit(grid, b, d, e, params);
        }
        i -= 1;
    }

    loop {
        let t_node = grid.t[i];
        let t_cur = horizon - s_cur;
        // Interior ladder points (descending in t) between the cursor and the
        // next grid node, then the node itself.
        let ladder = numerics::terminal_layer_steps(
            t_cur,
            t_node,
            horizon,
            sqrt_eta,
            kappa_bar,
            u_start[1],
            opts.refine,
        );
        for &t_mid in ladder.iter().chain(std::iter::once(&t_node)) {
            let s_next = horizon - t_mid;
            u = prelimit_implicit_step(u, s_cur, s_next, &coeff_at, gamma, inv_sqrt_eta, 0)?;
            s_cur = s_next;
        }
        b[i] = u[0];
        d[i] = u[1];
        e[i] = u[2];
        check_prelimit_envelopes(u, s_cur, t_node, f64::NAN, params, PDE_BOUND_TOL)?;
        if i == 0 {
            break;
        }
        i -= 1;
    }

    finish_prelimit(grid, b, d, e, params)
}

fn finish_prelimit(
    grid: Arc<TimeGrid>,
    b: Vec<f64>,
    d: Vec<f64>,
    e: Vec<f64>,
    params: &ModelParams,
) -> Result<PreLimitCoefficients, SolveError> {
    Ok(PreLimitCoefficients {
        b: CoefficientField::deterministic(grid.clone(), b),
        d: CoefficientField::deterministic(grid.clone(), d),
        e: CoefficientField::deterministic(grid, e),
        eta: params.eta,
        penalty: params.penalty,
    })
}

/// Solve the limit value coefficient backward along deterministic paths by
/// classical RK4, then assemble the limit gains.
///
/// The equation is not stiff (all rates are `O(rho, lambda)`), so fixed grid
/// steps suffice; accuracy is limited by the grid, not the scheme. Violating
/// the `[b0_lower, 1]` envelope by more than [`B0_BOUND_TOL`] is an error.
pub fn solve_b0_deterministic(
    params: &ModelParams,
    rho: &SampledPath,
    lambda: &SampledPath,
) -> Result<LimitCoefficients, SolveError> {
    let grid = rho.grid.clone();
    let n = grid.len();
    let bounds = params.bounds();
    let gamma = params.gamma;

    let f = |t: f64, b: f64| {
        let r = rho.value_at(t);
        let l = lambda.value_at(t);
        let phi2 = l + 2.0 * gamma * r;
        (gamma * (r * b) * (r * b) - 2.0 * l * r * (1.0 - b)) / phi2
    };

    let mut b0 = vec![0.0f64; n];
    b0[n - 1] = 1.0;
    for i in (0..n - 1).rev() {
        let t1 = grid.t[i + 1];
        let h = grid.t[i] - t1; // negative: backward step
        let y = b0[i + 1];
        let k1 = f(t1, y);
        let k2 = f(t1 + 0.5 * h, y + 0.5 * h * k1);
        let k3 = f(t1 + 0.5 * h, y + 0.5 * h * k2);
        let k4 = f(t1 + h, y + h * k3);
        b0[i] = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        let lo = bounds.b0_lower(grid.t[i]);
        if b0[i] < lo - B0_BOUND_TOL || b0[i] > 1.0 + B0_BOUND_TOL {
            return Err(SolveError::BoundViolation {
                what: "b0",
                t: grid.t[i],
                chi: f64::NAN,
                value: b0[i],
                lo,
                hi: 1.0,
            });
        }
    }

    let mut d0 = vec![0.0f64; n];
    let mut e0 = vec![0.0f64; n];
    for i in 0..n {
        let r = rho.values[i];
        let l = lambda.values[i];
        let phi = (l + 2.0 * gamma * r).sqrt();
        d0[i] = (l + gamma * r * b0[i]) / phi;
        e0[i] = r * (2.0 - b0[i]) / phi;
    }

    Ok(LimitCoefficients {
        b0: CoefficientField::deterministic(grid.clone(), b0),
        d0: CoefficientField::deterministic(grid.clone(), d0),
        e0: CoefficientField::deterministic(grid, e0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FactorFamily;
    use std::sync::Arc;

    fn params(eta: f64, penalty: Penalty) -> ModelParams {
        ModelParams {
            gamma: 3.0,
            horizon: 1.0,
            x0: 1.0,
            eta,
            penalty,
            rho_bounds: (1.0, 1.0),
            lambda_max: 1.0,
        }
    }

    fn const_paths(grid: &Arc<TimeGrid>, rho: f64, lambda: f64) -> (SampledPath, SampledPath) {
        (
            SampledPath::constant(grid.clone(), rho),
            SampledPath::constant(grid.clone(), lambda),
        )
    }

    /// Independent oracle for the closed form: brute-force backward RK4 of the
    /// scalar limit equation with `lambda = c * rho` on a fine private grid.
    fn b0_oracle(c: f64, gamma: f64, rho: f64, horizon: f64) -> f64 {
        let steps = 200_000usize;
        let h = horizon / steps as f64;
        let f = |b: f64| {
            let l = c * rho;
            (gamma * (rho * b) * (rho * b) - 2.0 * l * rho * (1.0 - b)) / (l + 2.0 * gamma * rho)
        };
        let mut b = 1.0;
        for _ in 0..steps {
            let k1 = f(b);
            let k2 = f(b - 0.5 * h * k1);
            let k3 = f(b - 0.5 * h * k2);
            let k4 = f(b - h * k3);
            b -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        b
    }

    #[test]
    fn closed_form_no_risk_is_rational() {
        // c = 0 collapses to 2 / (2 + r); r = 1 gives 2/3.
        assert!((closed_form_b0(0.0, 3.0, 1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((closed_form_b0(0.0, 0.5, 2.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn closed_form_is_one_at_zero_accumulated_resilience() {
        for &c in &[0.0, 0.3, 1.0, 4.0] {
            assert!((closed_form_b0(c, 3.0, 0.0) - 1.0).abs() < 1e-12, "c = {c}");
        }
    }

    #[test]
    fn closed_form_matches_backward_integration_oracle() {
        // The canonical proportional case c = 1, gamma = 3, rho = 1, T = 1.
        let cf = closed_form_b0(1.0, 3.0, 1.0);
        let oracle = b0_oracle(1.0, 3.0, 1.0, 1.0);
        assert!((cf - oracle).abs() < 1e-10, "closed form {cf} vs oracle {oracle}");
        assert!((cf - 0.73522).abs() < 2e-5);
        // A second configuration away from the worked example; the
        // accumulated resilience over [0, T] is rho * T = 1.4.
        let cf2 = closed_form_b0(2.5, 1.5, 0.7 * 2.0);
        let oracle2 = b0_oracle(2.5, 1.5, 0.7, 2.0);
        assert!((cf2 - oracle2).abs() < 1e-9, "closed form {cf2} vs oracle {oracle2}");
    }

    #[test]
    fn deterministic_limit_solver_hits_closed_form() {
        let grid = TimeGrid::default_for(1.0);
        let p = params(0.0, Penalty::Strict);
        let (rho, lambda) = const_paths(&grid, 1.0, 1.0);
        let lc = solve_b0_deterministic(&p, &rho, &lambda).unwrap();
        let b0_0 = lc.b0.eval(0.0, 0.0);
        assert!((b0_0 - closed_form_b0(1.0, 3.0, 1.0)).abs() < 1e-10);
        assert!((b0_0 - 0.73522).abs() < 2e-5);
        assert!((lc.d0.eval(0.0, 0.0) - 1.21163).abs() < 2e-5);
        assert!((lc.e0.eval(0.0, 0.0) - 0.47804).abs() < 2e-5);
    }

    #[test]
    fn limit_gains_satisfy_rate_identity() {
        // d0 + gamma e0 = phi pointwise, to near machine precision.
        let grid = TimeGrid::default_for(1.0);
        let fam = FactorFamily::LambdaProportional { rho: 1.3, c: 0.8 };
        let p = ModelParams {
            rho_bounds: (1.3, 1.3),
            lambda_max: 0.8 * 1.3,
            ..params(0.0, Penalty::Strict)
        };
        let model = fam.build();
        let (rho, lambda) = (
            SampledPath::constant(grid.clone(), model.rho(0.0, 0.0)),
            SampledPath::constant(grid.clone(), model.lambda(0.0, 0.0)),
        );
        let lc = solve_b0_deterministic(&p, &rho, &lambda).unwrap();
        let phi = (0.8_f64 * 1.3 + 2.0 * 3.0 * 1.3).sqrt();
        for i in 0..grid.len() {
            let lhs = lc.d0.node(i, 0) + 3.0 * lc.e0.node(i, 0);
            assert!((lhs - phi).abs() < 1e-10, "node {i}");
        }
    }

    #[test]
    fn obizhaeva_wang_limit_value() {
        // lambda = 0, rho = 1, T = 1: b0_0 = 2 / (2 + 1) = 2/3.
        let grid = TimeGrid::default_for(1.0);
        let p = ModelParams { lambda_max: 0.0, ..params(0.0, Penalty::Strict) };
        let (rho, lambda) = const_paths(&grid, 1.0, 0.0);
        let lc = solve_b0_deterministic(&p, &rho, &lambda).unwrap();
        assert!((lc.b0.eval(0.0, 0.0) - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn prelimit_terminal_data_finite_and_strict() {
        let p = params(1e-2, Penalty::Finite(10.0));
        let (s, u) = terminal_data(&p, 1e-2).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(u[0], 1.0);
        assert!((u[1] - 70.0).abs() < 1e-12); // (10 - 3) / 0.1
        assert_eq!(u[2], 0.0);

        let p = params(1e-2, Penalty::Strict);
        let (s, u) = terminal_data(&p, 1e-2).unwrap();
        assert!((s - 1e-3).abs() < 1e-15); // delta0 sqrt(eta) = 1e-2 * 1e-1
        assert!((u[1] - 100.0).abs() < 1e-9); // sqrt(eta) / delta = 1 / delta0
    }

    #[test]
    fn prelimit_strict_approaches_limit_value() {
        // eta = 1e-4 with strict liquidation: the value coefficient at t = 0
        // sits within 1e-2 of its limit.
        let grid = TimeGrid::default_for(1.0);
        let p = params(1e-4, Penalty::Strict);
        let (rho, lambda) = const_paths(&grid, 1.0, 1.0);
        let pc = solve_prelimit_deterministic(&p, &rho, &lambda, &SolverOptions::default()).unwrap();
        let lc = solve_b0_deterministic(&p, &rho, &lambda).unwrap();
        let gap = (pc.b.eval(0.0, 0.0) - lc.b0.eval(0.0, 0.0)).abs();
        assert!(gap <= 1e-2, "b gap at t = 0 is {gap}");
        // Gains positive as required.
        for i in 0..grid.len() {
            assert!(pc.d.node(i, 0) > 0.0);
            assert!(pc.e.node(i, 0) >= 0.0);
        }
    }

    #[test]
    fn prelimit_unscaled_coefficients_recovered_exactly() {
        let grid = TimeGrid::default_for(1.0);
        let p = params(1e-2, Penalty::Finite(10.0));
        let (rho, lambda) = const_paths(&grid, 1.0, 1.0);
        let pc = solve_prelimit_deterministic(&p, &rho, &lambda, &SolverOptions::default()).unwrap();
        // At the horizon: a = N, c = 0.
        let a_t = pc.a_at(1.0, 0.0, 3.0);
        let c_t = pc.c_at(1.0, 0.0, 3.0);
        assert!((a_t - 10.0).abs() < 1e-10, "a(T) = {a_t}");
        assert!(c_t.abs() < 1e-12, "c(T) = {c_t}");
    }

    #[test]
    fn prelimit_gain_sum_tends_to_phi() {
        // f = d + gamma e approaches phi = sqrt(7) as eta decreases, and the
        // interior sup distance shrinks monotonically along the sweep.
        let grid = TimeGrid::default_for(1.0);
        let p0 = params(0.0, Penalty::Strict);
        let (rho, lambda) = const_paths(&grid, 1.0, 1.0);
        let phi = 7.0f64.sqrt();
        let cutoff = 0.95;
        let mut sups = Vec::new();
        for &eta in &[1e-1, 1e-2, 1e-3] {
            let p = ModelParams { eta, ..p0.clone() };
            let pc =
                solve_prelimit_deterministic(&p, &rho, &lambda, &SolverOptions::default()).unwrap();
            let sup = grid
                .t
                .iter()
                .enumerate()
                .filter(|(_, &t)| t <= cutoff)
                .map(|(i, _)| (pc.d.node(i, 0) + 3.0 * pc.e.node(i, 0) - phi).abs())
                .fold(0.0, f64::max);
            sups.push(sup);
        }
        assert!(sups[0] > sups[1] - 1e-6 && sups[1] > sups[2] - 1e-6, "sups {sups:?}");
        assert!(sups[2] < 0.1, "final sup {}", sups[2]);
    }

    #[test]
    fn prelimit_self_convergence_order_near_one() {
        let p = params(1e-2, Penalty::Strict);
        let mut at_zero = Vec::new();
        for (steps, refine) in [(1024usize, 1.0), (2048, 2.0), (4096, 4.0)] {
            let grid = TimeGrid::refined(1.0, steps, 0.05, 10);
            let (rho, lambda) = const_paths(&grid, 1.0, 1.0);
            let opts = SolverOptions { refine, ..SolverOptions::default() };
            let pc = solve_prelimit_deterministic(&p, &rho, &lambda, &opts).unwrap();
            at_zero.push([pc.b.eval(0.0, 0.0), pc.d.eval(0.0, 0.0), pc.e.eval(0.0, 0.0)]);
        }
        for k in 0..3 {
            // Successive differences estimate the convergence order directly:
            // with error ~ C h^p, |v(h) - v(h/2)| / |v(h/2) - v(h/4)| = 2^p.
            let d01 = (at_zero[0][k] - at_zero[1][k]).abs();
            let d12 = (at_zero[1][k] - at_zero[2][k]).abs();
            if d01 > 1e-12 && d12 > 1e-12 {
                let order = (d01 / d12).log2();
                assert!(order > 0.9, "component {k}: order {order}");
            }
        }
    }

    #[test]
    fn strict_startup_offset_insensitive_over_a_decade() {
        // The start-up profile is an attractor: moving the start-up offset by
        // a factor of ten must move the limit-comparison error by < 10%.
        let grid = TimeGrid::default_for(1.0);
        let p = params(1e-3, Penalty::Strict);
        let (rho, lambda) = const_paths(&grid, 1.0, 1.0);
        let b_limit = solve_b0_deterministic(&p, &rho, &lambda).unwrap().b0.eval(0.0, 0.0);
        let errs: Vec<f64> = [1e-2, 1e-3]
            .iter()
            .map(|&delta0| {
                let opts = SolverOptions { delta0, ..SolverOptions::default() };
                let pc = solve_prelimit_deterministic(&p, &rho, &lambda, &opts).unwrap();
                (pc.b.eval(0.0, 0.0) - b_limit).abs()
            })
            .collect();
        let spread = (errs[0] - errs[1]).abs();
        assert!(
            spread <= 0.1 * errs[0].max(errs[1]).max(1e-9),
            "limit-comparison errors moved too much across a start-up decade: {errs:?}"
        );
    }

    #[test]
    fn prelimit_rejects_limit_eta() {
        let grid = TimeGrid::uniform(1.0, 16);
        let p = params(0.0, Penalty::Strict);
        let (rho, lambda) = const_paths(&grid, 1.0, 1.0);
        assert!(solve_prelimit_deterministic(&p, &rho, &lambda, &SolverOptions::default()).is_err());
    }

    #[test]
    fn field_clamps_and_counts_out_of_hull_evaluations() {
        let grid = TimeGrid::uniform(1.0, 4);
        let chi = vec![-1.0, 0.0, 1.0];
        let values: Vec<f64> = (0..grid.len() * 3).map(|k| k as f64).collect();
        let f = CoefficientField::spatial(grid, chi, values);
        let inside = f.eval(0.5, 0.0);
        assert!(inside.is_finite());
        assert_eq!(f.clamp_count(), 0);
        let _ = f.eval(0.5, 5.0);
        assert_eq!(f.clamp_count(), 1);
        assert_eq!(f.eval(0.5, 5.0), f.eval(0.5, 1.0));
    }

    #[test]
    fn field_bilinear_interpolates_exactly_on_affine_data() {
        let grid = TimeGrid::uniform(1.0, 10);
        let chi: Vec<f64> = (0..5).map(|j| -1.0 + 0.5 * j as f64).collect();
        let mut values = Vec::new();
        for &t in &grid.t {
            for &x in &chi {
                values.push(2.0 * t - 3.0 * x + 0.25);
            }
        }
        let f = CoefficientField::spatial(grid, chi, values);
        let v = f.eval(0.123, 0.321);
        assert!((v - (2.0 * 0.123 - 3.0 * 0.321 + 0.25)).abs() < 1e-12);
    }
}
