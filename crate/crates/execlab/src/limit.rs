//! The small-impact limit of the optimal liquidation state, in closed form.
//!
//! As the instantaneous impact cost vanishes the optimal state collapses onto
//! a slow manifold parametrised by the scaled impact deficit `Zhat0 = gamma
//! Xhat0 - Yhat0`, which solves a plain linear ODE along each coefficient
//! path:
//!
//! ```text
//!   Zhat0_t = gamma x0 exp(- int_0^t rho_s d0_s / phi_s ds),
//!   Xhat0_t = (e0_t / phi_t) Zhat0_t   on [0, T),   Xhat0_T = 0,
//!   Yhat0_t = -(d0_t / phi_t) Zhat0_t  on [0, T),   Yhat0_T = -Zhat0_T.
//! ```
//!
//! The inventory jumps at both ends: an initial block `x0 - Xhat0_0` and a
//! terminal block `Xhat0_{T-}`, with an absolutely continuous (deterministic
//! coefficients) or semimartingale (stochastic factor) flow in between. The
//! decomposition into (jump list, flow part) is what the strategy layer
//! consumes.

use thiserror::Error;

use crate::coeffs::LimitCoefficients;
use crate::model::ModelParams;
use crate::numerics;
use crate::pathsim::{PathBundle, SampledPath};

/// The limit state triple along one coefficient path.
///
/// `xhat0` carries the terminal liquidation jump explicitly: its last node is
/// exactly 0, while `terminal_block` records the left limit at the horizon.
#[derive(Debug, Clone)]
pub struct LimitState {
    pub zhat0: SampledPath,
    pub xhat0: SampledPath,
    pub yhat0: SampledPath,
    /// `x0 - Xhat0_0 >= 0`, the block traded at time zero.
    pub initial_block: f64,
    /// `Xhat0_{T-} >= 0`, the block traded at the horizon.
    pub terminal_block: f64,
}

/// The limit strategy: sell-side jumps at both ends plus the continuous flow.
#[derive(Debug, Clone)]
pub struct LimitStrategy {
    /// Sorted `(time, size)` list; sizes are positive sell quantities.
    pub j_minus: Vec<(f64, f64)>,
    /// Flow part, zero at time zero; continuous at the horizon (the terminal
    /// jump lives in `j_minus`).
    pub v_hat: SampledPath,
}

/// Failures of the jump/flow decomposition.
#[derive(Debug, Error)]
pub enum LimitError {
    #[error("reconstruction x0 - jumps + flow missed the state by {residual} at t = {t}")]
    Reconstruction { t: f64, residual: f64 },
}

/// Build the limit state along a simulated coefficient path.
///
/// The resilience integral is accumulated by trapezoid on the bundle's grid;
/// the gain fields are evaluated at the path's factor values.
pub fn build_limit_state(
    limit: &LimitCoefficients,
    bundle: &PathBundle,
    params: &ModelParams,
) -> LimitState {
    let grid = bundle.rho.grid.clone();
    let n = grid.len();
    let gamma = params.gamma;

    // Zhat0 first: exponential of the accumulated relaxation rate rho d0/phi.
    let mut rate = Vec::with_capacity(n);
    for i in 0..n {
        let t = grid.t[i];
        let chi = bundle.chi.values[i];
        let d0 = limit.d0.eval(t, chi);
        rate.push(bundle.rho.values[i] * d0 / bundle.phi.values[i]);
    }
    let integral = numerics::cumtrapz(&grid.t, &rate);
    let zhat0: Vec<f64> = integral.iter().map(|i| gamma * params.x0 * (-i).exp()).collect();

    let mut xhat0 = Vec::with_capacity(n);
    let mut yhat0 = Vec::with_capacity(n);
    for i in 0..n {
        let t = grid.t[i];
        let chi = bundle.chi.values[i];
        let phi = bundle.phi.values[i];
        xhat0.push(limit.e0.eval(t, chi) / phi * zhat0[i]);
        yhat0.push(-limit.d0.eval(t, chi) / phi * zhat0[i]);
    }
    let terminal_block = xhat0[n - 1];
    xhat0[n - 1] = 0.0;
    yhat0[n - 1] = -zhat0[n - 1];
    let initial_block = params.x0 - xhat0[0];

    LimitState {
        zhat0: SampledPath::new(grid.clone(), zhat0),
        xhat0: SampledPath::new(grid.clone(), xhat0),
        yhat0: SampledPath::new(grid, yhat0),
        initial_block,
        terminal_block,
    }
}

/// Split the limit state into its two sell blocks and the continuous flow,
/// verifying the reconstruction `Xhat0 = x0 - jumps + flow` pointwise.
///
/// The flow is continuous at the horizon: its terminal value is the left
/// limit `terminal_block - Xhat0_0`, while the state's terminal inventory 0
/// is reached through the terminal jump.
pub fn decompose_limit_strategy(
    state: &LimitState,
    params: &ModelParams,
) -> Result<LimitStrategy, LimitError> {
    let grid = state.xhat0.grid.clone();
    let n = grid.len();
    let horizon = grid.horizon();
    let x0 = params.x0;
    let xhat_start = x0 - state.initial_block;

    let mut v_hat = Vec::with_capacity(n);
    for i in 0..n - 1 {
        v_hat.push(state.xhat0.values[i] - xhat_start);
    }
    v_hat.push(state.terminal_block - xhat_start);

    let j_minus = vec![(0.0, state.initial_block), (horizon, state.terminal_block)];

    // Reconstruction check: jumps plus flow must reproduce the state path.
    for i in 0..n {
        let t = grid.t[i];
        let jumps: f64 = j_minus.iter().filter(|(tj, _)| *tj <= t).map(|(_, dx)| dx).sum();
        let rebuilt = x0 - jumps + v_hat[i];
        let residual = (rebuilt - state.xhat0.values[i]).abs();
        if residual > 1e-12 {
            return Err(LimitError::Reconstruction { t, residual });
        }
    }

    Ok(LimitStrategy { j_minus, v_hat: SampledPath::new(grid, v_hat) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::solve_b0_deterministic;
    use crate::model::{FactorFamily, ModelParams, Penalty};
    use crate::pathsim::{simulate_bundle, simulate_brownian, TimeGrid};

    fn limit_params(x0: f64, lambda_max: f64) -> ModelParams {
        ModelParams {
            gamma: 3.0,
            horizon: 1.0,
            x0,
            eta: 0.0,
            penalty: Penalty::Strict,
            rho_bounds: (1.0, 1.0),
            lambda_max,
        }
    }

    fn deterministic_setup(x0: f64, lambda: f64) -> (ModelParams, LimitCoefficients, PathBundle) {
        let grid = TimeGrid::default_for(1.0);
        let params = limit_params(x0, lambda);
        let factor = FactorFamily::Constant { rho: 1.0, lambda }.build();
        let bundle = simulate_bundle(&factor, &params, &grid, 7).unwrap();
        let lc = solve_b0_deterministic(&params, &bundle.rho, &bundle.lambda).unwrap();
        (params, lc, bundle)
    }

    #[test]
    fn no_risk_case_is_the_double_block_profile() {
        // lambda = 0, rho = 1, T = 1, x0 = 1: inventory (2 - t) / 3 between
        // two blocks of 1/3 each, with constant rate -1/3.
        let (params, lc, bundle) = deterministic_setup(1.0, 0.0);
        let state = build_limit_state(&lc, &bundle, &params);
        assert!((state.initial_block - 1.0 / 3.0).abs() < 1e-8);
        assert!((state.terminal_block - 1.0 / 3.0).abs() < 1e-8);
        let grid = &state.xhat0.grid;
        for i in 0..grid.len() - 1 {
            let t = grid.t[i];
            assert!(
                (state.xhat0.values[i] - (2.0 - t) / 3.0).abs() < 1e-8,
                "X at t = {t}: {}",
                state.xhat0.values[i]
            );
        }
        assert_eq!(state.xhat0.last(), 0.0);

        let strat = decompose_limit_strategy(&state, &params).unwrap();
        assert_eq!(strat.j_minus.len(), 2);
        assert!((strat.j_minus[0].1 - 1.0 / 3.0).abs() < 1e-8);
        assert!((strat.j_minus[1].1 - 1.0 / 3.0).abs() < 1e-8);
        for i in 0..grid.len() {
            let t = grid.t[i];
            assert!((strat.v_hat.values[i] + t / 3.0).abs() < 1e-8, "V at t = {t}");
        }
    }

    #[test]
    fn canonical_risk_case_matches_derived_initial_inventory() {
        // rho = lambda = 1, gamma = 3: Xhat0_0 = (e0_0 / phi_0) * gamma =
        // 0.478041 / sqrt(7) * 3.
        let (params, lc, bundle) = deterministic_setup(1.0, 1.0);
        let state = build_limit_state(&lc, &bundle, &params);
        assert!(
            (state.xhat0.first() - 0.54204).abs() < 1e-4,
            "Xhat0_0 = {}",
            state.xhat0.first()
        );
        assert!(state.initial_block > 0.0 && state.terminal_block > 0.0);
    }

    #[test]
    fn state_identities_and_interior_bounds_hold() {
        let (params, lc, bundle) = deterministic_setup(1.0, 1.0);
        let state = build_limit_state(&lc, &bundle, &params);
        let grid = &state.zhat0.grid;
        let n = grid.len();
        assert!((state.zhat0.first() - 3.0).abs() < 1e-12);
        for i in 0..n {
            if i > 0 {
                assert!(state.zhat0.values[i] <= state.zhat0.values[i - 1] + 1e-12);
            }
            if i < n - 1 {
                // gamma Xhat0 - Yhat0 = Zhat0 away from the terminal jump.
                let z = 3.0 * state.xhat0.values[i] - state.yhat0.values[i];
                assert!((z - state.zhat0.values[i]).abs() < 1e-10);
                if i > 0 {
                    assert!(state.xhat0.values[i] > 0.0 && state.xhat0.values[i] < 1.0);
                    assert!(state.yhat0.values[i] < 0.0 && state.yhat0.values[i] > -3.0);
                }
            }
        }
        assert_eq!(state.yhat0.last(), -state.zhat0.last());
    }

    #[test]
    fn impact_deficit_rate_identity_has_small_discrete_residual() {
        // d/dt Zhat0 = rho Yhat0; midpoint finite differences on the default
        // grid sit well below 1e-6.
        let (_, lc, bundle) = deterministic_setup(1.0, 1.0);
        let params = limit_params(1.0, 1.0);
        let state = build_limit_state(&lc, &bundle, &params);
        let grid = &state.zhat0.grid;
        let mut worst = 0.0f64;
        for i in 0..grid.len() - 2 {
            let dt = grid.t[i + 1] - grid.t[i];
            let dz = (state.zhat0.values[i + 1] - state.zhat0.values[i]) / dt;
            let mid = 0.5 * (state.yhat0.values[i] + state.yhat0.values[i + 1]);
            worst = worst.max((dz - mid).abs());
        }
        assert!(worst < 1e-6, "rate residual {worst}");
    }

    #[test]
    fn limit_state_is_linear_in_initial_inventory() {
        let (params1, lc, bundle) = deterministic_setup(1.0, 1.0);
        let params2 = limit_params(2.0, 1.0);
        let one = build_limit_state(&lc, &bundle, &params1);
        let two = build_limit_state(&lc, &bundle, &params2);
        for i in 0..one.xhat0.grid.len() {
            assert!((two.xhat0.values[i] - 2.0 * one.xhat0.values[i]).abs() < 1e-13);
            assert!((two.zhat0.values[i] - 2.0 * one.zhat0.values[i]).abs() < 1e-13);
            assert!((two.yhat0.values[i] - 2.0 * one.yhat0.values[i]).abs() < 1e-13);
        }
        assert!((two.initial_block - 2.0 * one.initial_block).abs() < 1e-13);
    }

    #[test]
    fn flow_matches_its_defining_formula_on_deterministic_paths() {
        // Independent route: V = rho (2 - b0) / phi^2 * Zhat0, shifted to 0
        // at the start. Along deterministic paths both routes agree to
        // rounding.
        let (params, lc, bundle) = deterministic_setup(1.0, 1.0);
        let state = build_limit_state(&lc, &bundle, &params);
        let strat = decompose_limit_strategy(&state, &params).unwrap();
        let grid = &state.zhat0.grid;
        let formula = |i: usize| {
            let t = grid.t[i];
            let rho = bundle.rho.values[i];
            let phi = bundle.phi.values[i];
            let b0 = lc.b0.eval(t, bundle.chi.values[i]);
            rho * (2.0 - b0) / (phi * phi) * state.zhat0.values[i]
        };
        let base = formula(0);
        for i in 0..grid.len() - 1 {
            assert!(
                (strat.v_hat.values[i] - (formula(i) - base)).abs() < 1e-12,
                "flow route mismatch at node {i}"
            );
        }
    }

    #[test]
    fn stochastic_factor_state_keeps_invariants_pathwise() {
        let grid = TimeGrid::default_for(1.0);
        let family = FactorFamily::SineResilience { lambda: 1.0 };
        let params = ModelParams {
            gamma: 3.0,
            horizon: 1.0,
            x0: 1.0,
            eta: 0.0,
            penalty: Penalty::Strict,
            rho_bounds: family.implied_rho_bounds(),
            lambda_max: family.implied_lambda_max(),
        };
        let factor = family.build();
        let chi = crate::coeffs::chi_grid_for(&factor, 1.0, 33, 6.0);
        let lc = crate::coeffs::solve_b0_pde(&factor, &params, &chi, &grid).unwrap();
        for seed in 0..5u64 {
            let w = simulate_brownian(&grid, 100 + seed);
            let bundle = crate::pathsim::simulate_factor(&factor, &params, &w, 100 + seed).unwrap();
            let state = build_limit_state(&lc, &bundle, &params);
            let strat = decompose_limit_strategy(&state, &params).unwrap();
            assert!(state.initial_block > 0.0 && state.terminal_block > 0.0);
            assert_eq!(strat.v_hat.first(), 0.0);
            for i in 1..grid.len() - 1 {
                assert!(state.xhat0.values[i] > 0.0 && state.xhat0.values[i] < 1.0);
                assert!(state.zhat0.values[i] <= state.zhat0.values[i - 1] + 1e-12);
            }
        }
    }
}
