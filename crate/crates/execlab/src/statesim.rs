//! Forward integration of the optimal state under positive instantaneous
//! impact.
//!
//! Given solved gain fields, the optimal inventory follows a stiff linear
//! relaxation toward a slow manifold: with `F = d + gamma e`,
//!
//! ```text
//!   Xhat' = (F / sqrt_eta) * ((e / F) Zhat - Xhat),
//!   Zhat' = rho Yhat,            Yhat = gamma Xhat - Zhat.
//! ```
//!
//! The stiffness (rate `F / sqrt_eta`, unbounded near the horizon for strict
//! liquidation) is absorbed by stepping `Xhat` with the exact exponential of
//! the frozen relaxation, while the slow variable `Zhat` uses an implicit
//! trapezoid. `Yhat` is recovered from the identity, which therefore holds to
//! rounding by construction.

use thiserror::Error;

use crate::coeffs::PreLimitCoefficients;
use crate::model::{ModelParams, Penalty};
use crate::pathsim::{PathBundle, SampledPath};

/// Slack allowed on the a priori state bounds before integration is declared
/// faulty.
pub const STATE_TOL: f64 = 1e-8;

/// The integrated state triple for one path at one impact level.
#[derive(Debug, Clone)]
pub struct PreLimitState {
    pub xhat: SampledPath,
    pub yhat: SampledPath,
    pub zhat: SampledPath,
    pub eta: f64,
    pub penalty: Penalty,
}

/// Integration failures; breaches carry the first offending time.
#[derive(Debug, Error)]
pub enum StateError {
    #[error("state invariant `{what}` broke at t = {t}: value {value}")]
    InvariantBreached { t: f64, what: &'static str, value: f64 },
    #[error("state integration inconsistent with inputs: {0}")]
    Mismatch(String),
}

fn check_state(
    t: f64,
    xhat: f64,
    yhat: f64,
    zhat: f64,
    zhat_prev: f64,
    params: &ModelParams,
) -> Result<(), StateError> {
    let cap = params.gamma * params.x0;
    if !(-STATE_TOL..=params.x0 + STATE_TOL).contains(&xhat) || !xhat.is_finite() {
        return Err(StateError::InvariantBreached { t, what: "inventory range", value: xhat });
    }
    if !(-cap - STATE_TOL..=STATE_TOL).contains(&yhat) {
        return Err(StateError::InvariantBreached { t, what: "impact range", value: yhat });
    }
    if !(-STATE_TOL..=cap + STATE_TOL).contains(&zhat) {
        return Err(StateError::InvariantBreached { t, what: "deficit range", value: zhat });
    }
    if zhat > zhat_prev + STATE_TOL {
        return Err(StateError::InvariantBreached {
            t,
            what: "deficit monotonicity",
            value: zhat - zhat_prev,
        });
    }
    Ok(())
}

/// Integrate the optimal state along one coefficient path.
///
/// Steps node-to-node on the bundle's grid, evaluating the gain fields at the
/// midpoint of each step; the geometric refinement of the grid near the
/// horizon resolves the strict-liquidation layer. Any breach of the a priori
/// state bounds beyond [`STATE_TOL`] aborts with the first offending time.
pub fn integrate_state(
    coeffs: &PreLimitCoefficients,
    bundle: &PathBundle,
    params: &ModelParams,
) -> Result<PreLimitState, StateError> {
    if (coeffs.eta - params.eta).abs() > 1e-12 * (1.0 + params.eta) {
        return Err(StateError::Mismatch(format!(
            "fields solved at eta = {} but params carry eta = {}",
            coeffs.eta, params.eta
        )));
    }
    if coeffs.penalty != params.penalty {
        return Err(StateError::Mismatch(format!(
            "fields solved for penalty {} but params carry {}",
            coeffs.penalty, params.penalty
        )));
    }
    let grid = bundle.rho.grid.clone();
    let n = grid.len();
    let gamma = params.gamma;
    let sqrt_eta = params.sqrt_eta();

    let mut xhat = Vec::with_capacity(n);
    let mut yhat = Vec::with_capacity(n);
    let mut zhat = Vec::with_capacity(n);
    xhat.push(params.x0);
    zhat.push(gamma * params.x0);
    yhat.push(0.0);

    for i in 0..n - 1 {
        let (t0, t1) = (grid.t[i], grid.t[i + 1]);
        let h = t1 - t0;
        let t_mid = 0.5 * (t0 + t1);
        let chi_mid = 0.5 * (bundle.chi.values[i] + bundle.chi.values[i + 1]);
        let d_mid = coeffs.d.eval(t_mid, chi_mid);
        let e_mid = coeffs.e.eval(t_mid, chi_mid);
        let f_mid = d_mid + gamma * e_mid;
        if !(f_mid > 0.0) {
            return Err(StateError::Mismatch(format!(
                "nonpositive relaxation rate {f_mid} at t = {t_mid}"
            )));
        }
        let (rho0, rho1) = (bundle.rho.values[i], bundle.rho.values[i + 1]);

        let (x0, z0) = (xhat[i], zhat[i]);
        // Predict the deficit at midstep, relax the inventory exactly against
        // the frozen midpoint rate, then close the deficit by trapezoid.
        let z_mid = z0 + 0.5 * h * rho0 * (gamma * x0 - z0);
        let target = e_mid / f_mid * z_mid;
        let x1 = target + (x0 - target) * (-f_mid * h / sqrt_eta).exp();
        let z1 = (z0 * (1.0 - 0.5 * h * rho0) + 0.5 * h * gamma * (rho0 * x0 + rho1 * x1))
            / (1.0 + 0.5 * h * rho1);
        let y1 = gamma * x1 - z1;
        check_state(t1, x1, y1, z1, z0, params)?;
        xhat.push(x1);
        zhat.push(z1);
        yhat.push(y1);
    }

    Ok(PreLimitState {
        xhat: SampledPath::new(grid.clone(), xhat),
        yhat: SampledPath::new(grid.clone(), yhat),
        zhat: SampledPath::new(grid, zhat),
        eta: params.eta,
        penalty: params.penalty,
    })
}

/// Inventory left at the horizon: zero in the limit, and at most a grid-level
/// residual for strict liquidation with positive impact.
pub fn liquidation_gap(state: &PreLimitState) -> f64 {
    state.xhat.last()
}
