//! Time grids, sampled paths, and simulation of the Brownian driver and the
//! coefficient factor.
//!
//! Randomness contract: every path is generated by a counter-based ChaCha12
//! stream. `simulate_brownian(grid, seed)` keys the cipher with
//! `seed_from_u64(seed)` on stream 0 and draws one standard normal per grid
//! step in node order; `brownian_with_stream` additionally selects a stream
//! index, so a single master seed can be split into independent per-path
//! streams. The map `(seed, stream) -> path` is stable across runs and thread
//! counts, which is what makes common-random-number sweeps across `eta`
//! bit-identical.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::model::{self, FactorModel, ModelParams};
use crate::numerics;

/// Strictly increasing time nodes from `0` to the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub t: Vec<f64>,
    /// Largest node spacing (the resolution parameter quoted in `O(dt)`
    /// tolerances).
    pub dt_max: f64,
}

impl TimeGrid {
    /// Uniform grid with `steps` intervals.
    pub fn uniform(horizon: f64, steps: usize) -> Arc<Self> {
        assert!(horizon > 0.0 && steps >= 1);
        let t = (0..=steps).map(|i| horizon * i as f64 / steps as f64).collect();
        Self::from_times(t)
    }

    /// Uniform grid plus geometric refinement of the last `fraction` of the
    /// horizon: extra nodes at `T - fraction * T * 2^-k`, `k = 1..=levels`.
    ///
    /// The refinement resolves the terminal region where the pre-limit
    /// coefficients steepen.
    pub fn refined(horizon: f64, steps: usize, fraction: f64, levels: u32) -> Arc<Self> {
        assert!(fraction > 0.0 && fraction < 1.0);
        let mut t: Vec<f64> = (0..=steps).map(|i| horizon * i as f64 / steps as f64).collect();
        for k in 1..=levels {
            t.push(horizon - fraction * horizon / f64::powi(2.0, k as i32));
        }
        t.sort_by(|a, b| a.partial_cmp(b).unwrap());
        t.dedup_by(|a, b| (*a - *b).abs() < 1e-15 * horizon);
        Self::from_times(t)
    }

    /// Default grid: 2^12 uniform steps with terminal refinement of the last 5%.
    pub fn default_for(horizon: f64) -> Arc<Self> {
        Self::refined(horizon, 4096, 0.05, 11)
    }

    /// Wrap an explicit node vector, validating the grid invariants.
    pub fn from_times(t: Vec<f64>) -> Arc<Self> {
        assert!(t.len() >= 2, "grid needs at least two nodes");
        assert!(t[0] == 0.0, "grid must start at 0");
        let mut dt_max = 0.0f64;
        for w in t.windows(2) {
            assert!(w[1] > w[0], "grid nodes must be strictly increasing");
            dt_max = dt_max.max(w[1] - w[0]);
        }
        Arc::new(TimeGrid { t, dt_max })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn horizon(&self) -> f64 {
        *self.t.last().unwrap()
    }

    /// Index of the node at time `t`, if one exists within `tol`.
    pub fn index_of(&self, t: f64, tol: f64) -> Option<usize> {
        let i = numerics::bracket(&self.t, t);
        if (self.t[i] - t).abs() <= tol {
            Some(i)
        } else if (self.t[i + 1] - t).abs() <= tol {
            Some(i + 1)
        } else {
            None
        }
    }
}

/// A scalar path sampled on a shared time grid, interpreted as
/// piecewise-linear between nodes (right-continuous conventions for paths
/// with jumps are handled by the strategy layer, which aligns jumps with
/// nodes).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    pub grid: Arc<TimeGrid>,
    pub values: Vec<f64>,
}

impl SampledPath {
    pub fn new(grid: Arc<TimeGrid>, values: Vec<f64>) -> Self {
        assert_eq!(grid.len(), values.len(), "values must match the grid");
        SampledPath { grid, values }
    }

    pub fn constant(grid: Arc<TimeGrid>, value: f64) -> Self {
        let n = grid.len();
        SampledPath { grid, values: vec![value; n] }
    }

    pub fn t(&self) -> &[f64] {
        &self.grid.t
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Linear interpolation at `t`, clamped to the grid hull.
    pub fn value_at(&self, t: f64) -> f64 {
        numerics::lerp_sorted(&self.grid.t, &self.values, t)
    }

    /// Trapezoid integral over the full grid.
    pub fn trapz(&self) -> f64 {
        numerics::trapz(&self.grid.t, &self.values)
    }

    /// Cumulative trapezoid integral as a path on the same grid.
    pub fn cumtrapz(&self) -> SampledPath {
        SampledPath {
            grid: self.grid.clone(),
            values: numerics::cumtrapz(&self.grid.t, &self.values),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SampledPath {
        SampledPath {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// One simulated scenario: the Brownian driver, the factor, and the
/// coefficient paths evaluated along it.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub seed: u64,
    pub w: SampledPath,
    pub chi: SampledPath,
    pub rho: SampledPath,
    pub lambda: SampledPath,
    pub phi: SampledPath,
}

/// Errors raised while building a path bundle.
#[derive(Debug, Error)]
pub enum PathError {
    #[error("factor path leaves the declared envelope at t = {t}: {name} = {value} not in [{lo}, {hi}]")]
    CoefficientOutOfBounds { t: f64, name: &'static str, value: f64, lo: f64, hi: f64 },
    #[error(transparent)]
    Model(#[from] model::ModelError),
}

/// Standard Brownian path on `grid` (stream 0 of `seed`); `W_0 = 0` and the
/// increments are independent normals with variance equal to the step length.
pub fn simulate_brownian(grid: &Arc<TimeGrid>, seed: u64) -> SampledPath {
    brownian_with_stream(grid, seed, 0)
}

/// Brownian path on stream `stream` of the master seed.
pub fn brownian_with_stream(grid: &Arc<TimeGrid>, master_seed: u64, stream: u64) -> SampledPath {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    let mut values = Vec::with_capacity(grid.len());
    let mut w = 0.0;
    values.push(w);
    for i in 1..grid.len() {
        let dt = grid.t[i] - grid.t[i - 1];
        let z: f64 = StandardNormal.sample(&mut rng);
        w += z * dt.sqrt();
        values.push(w);
    }
    SampledPath::new(grid.clone(), values)
}

/// Drive the factor along `w` by Euler-Maruyama and evaluate the coefficient
/// paths `rho`, `lambda`, `phi` at the grid nodes.
///
/// With `sigma = 0` this is an exact deterministic solve of the drift ODE; in
/// particular a driftless unit-volatility factor reproduces `w` bitwise.
/// Coefficient values outside the envelopes declared in `params` are an
/// error, since every a priori bound downstream is computed from those
/// envelopes.
pub fn simulate_factor(
    factor: &FactorModel,
    params: &ModelParams,
    w: &SampledPath,
    seed: u64,
) -> Result<PathBundle, PathError> {
    let grid = &w.grid;
    let n = grid.len();
    let mut chi = Vec::with_capacity(n);
    let mut x = factor.chi0;
    chi.push(x);
    for i in 1..n {
        let t = grid.t[i - 1];
        let dt = grid.t[i] - t;
        let dw = w.values[i] - w.values[i - 1];
        x += factor.mu(t, x) * dt + factor.sigma(t, x) * dw;
        chi.push(x);
    }

    let tol = 1e-9;
    let (rlo, rhi) = params.rho_bounds;
    let mut rho = Vec::with_capacity(n);
    let mut lambda = Vec::with_capacity(n);
    let mut phi_v = Vec::with_capacity(n);
    for i in 0..n {
        let t = grid.t[i];
        let r = factor.rho(t, chi[i]);
        if r < rlo - tol || r > rhi + tol {
            return Err(PathError::CoefficientOutOfBounds {
                t,
                name: "rho",
                value: r,
                lo: rlo,
                hi: rhi,
            });
        }
        let l = factor.lambda(t, chi[i]);
        if l < -tol || l > params.lambda_max + tol {
            return Err(PathError::CoefficientOutOfBounds {
                t,
                name: "lambda",
                value: l,
                lo: 0.0,
                hi: params.lambda_max,
            });
        }
        rho.push(r);
        lambda.push(l);
        phi_v.push(model::phi(r, l.max(0.0), params.gamma)?);
    }

    Ok(PathBundle {
        seed,
        w: w.clone(),
        chi: SampledPath::new(grid.clone(), chi),
        rho: SampledPath::new(grid.clone(), rho),
        lambda: SampledPath::new(grid.clone(), lambda),
        phi: SampledPath::new(grid.clone(), phi_v),
    })
}

/// Convenience: simulate the Brownian driver for `seed` and build the bundle.
pub fn simulate_bundle(
    factor: &FactorModel,
    params: &ModelParams,
    grid: &Arc<TimeGrid>,
    seed: u64,
) -> Result<PathBundle, PathError> {
    let w = simulate_brownian(grid, seed);
    simulate_factor(factor, params, &w, seed)
}
