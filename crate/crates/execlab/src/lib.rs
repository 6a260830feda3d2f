//! Numerical laboratory for optimal trade execution under transient price
//! impact with stochastic resilience.
//!
//! The library computes the optimal liquidation profile of a risk-averse
//! trader in two regimes and measures how one converges to the other:
//!
//! * the *pre-limit* regime, where trading speed carries an instantaneous
//!   friction `eta > 0` and the optimum follows an absolutely continuous
//!   inventory path driven by a backward coefficient system;
//! * the *limit* regime `eta -> 0`, where the optimum collapses to an initial
//!   and a terminal block trade glued by an explicit trading program, and
//!   strategies are general semimartingales.
//!
//! Modules:
//!
//! * [`model`] — parameters, validation, derived a priori bounds
//! * [`pathsim`] — time grids, Brownian drivers, factor path bundles
//! * [`coeffs`] — backward coefficient systems (closed form, ODE, PDE)
//! * [`limit`] — the explicit limit state and its block/drift decomposition
//! * [`statesim`] — pre-limit optimal state integration
//! * [`strategies`] — semimartingale strategies, impact, tracking, mollification
//! * [`costs`] — cost functionals and optimality diagnostics
//! * [`graphs`] — completed graphs, Hausdorff distance, convergence studies
//! * [`config`] — experiment configuration files and derived run plans

pub mod coeffs;
pub mod config;
pub mod costs;
pub mod graphs;
pub mod io;
pub mod limit;
pub mod model;
pub mod numerics;
pub mod pathsim;
pub mod statesim;
pub mod strategies;
