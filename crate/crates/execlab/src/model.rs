//! Model parameters, factor specification, validation, and a priori bounds.
//!
//! The execution model trades a position of `x0` shares over `[0, horizon]`
//! against two frictions: an instantaneous one with weight `eta` (vanishing in
//! the limit regime) and a transient one with impact scale `gamma` that decays
//! at the stochastic resilience rate `rho`. Running inventory risk is priced
//! at the rate `lambda`, and leftover terminal inventory at the penalty `N`;
//! `rho` and `lambda` are driven by a scalar diffusion factor.

use std::fmt;
use std::sync::Arc;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Terminal inventory penalty weight `N`.
///
/// `Finite(n)` prices leftover inventory; `Strict` is the `N = ∞` convention
/// where full liquidation is enforced structurally by the solvers instead of
/// through a penalty term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Finite(f64),
    Strict,
}

impl Penalty {
    pub fn is_strict(&self) -> bool {
        matches!(self, Penalty::Strict)
    }
}

impl fmt::Display for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Penalty::Finite(n) => write!(f, "{n}"),
            Penalty::Strict => write!(f, "inf"),
        }
    }
}

impl Serialize for Penalty {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Penalty::Finite(n) => s.serialize_f64(*n),
            Penalty::Strict => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Penalty {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(Penalty::Finite(n)),
            Raw::Text(s) if s == "inf" => Ok(Penalty::Strict),
            Raw::Text(s) => Err(D::Error::custom(format!(
                "penalty must be a number or \"inf\", got {s:?}"
            ))),
        }
    }
}

/// Static model parameters shared by every module.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    /// Transient impact scale per share, `gamma > 0`.
    pub gamma: f64,
    /// Trading horizon `T > 0`.
    pub horizon: f64,
    /// Initial inventory.
    pub x0: f64,
    /// Instantaneous friction weight, `eta >= 0`; `0` selects the limit model.
    pub eta: f64,
    /// Terminal penalty weight.
    pub penalty: Penalty,
    /// Envelope `(rho_min, rho_max)` of the resilience rate, `0 < rho_min`.
    pub rho_bounds: (f64, f64),
    /// Upper envelope of the risk rate; the lower envelope is pinned at `0`.
    pub lambda_max: f64,
}

impl ModelParams {
    pub fn sqrt_eta(&self) -> f64 {
        self.eta.sqrt()
    }

    /// Smallest admissible finite penalty,
    /// `N_min = gamma + 1 + sqrt(2 eta max(lambda_max, gamma rho_max))`.
    ///
    /// Below this floor the pre-limit value function can lose coercivity; the
    /// floor collapses to `gamma + 1` as `eta -> 0`.
    pub fn min_penalty(&self) -> f64 {
        let m = self.lambda_max.max(self.gamma * self.rho_bounds.1);
        self.gamma + 1.0 + (2.0 * self.eta * m).sqrt()
    }

    /// A priori envelopes implied by the parameter box.
    pub fn bounds(&self) -> DerivedBounds {
        let m = self.lambda_max.max(self.gamma * self.rho_bounds.1);
        DerivedBounds {
            kappa_bar: (2.0 * m).sqrt(),
            phi_min: (2.0 * self.gamma * self.rho_bounds.0).sqrt(),
            phi_max: (self.lambda_max + 2.0 * self.gamma * self.rho_bounds.1).sqrt(),
            gamma: self.gamma,
            rho_max: self.rho_bounds.1,
            horizon: self.horizon,
        }
    }
}

/// Envelope constants derived from the parameter box.
#[derive(Debug, Clone, Copy)]
pub struct DerivedBounds {
    /// `kappa_bar = sqrt(2 max(lambda_max, gamma rho_max))`: the growth rate
    /// of the stiff coefficient envelopes near the horizon.
    pub kappa_bar: f64,
    /// Lower bound of `phi = sqrt(lambda + 2 gamma rho)` over the box.
    pub phi_min: f64,
    /// Upper bound of `phi` over the box.
    pub phi_max: f64,
    gamma: f64,
    rho_max: f64,
    horizon: f64,
}

impl DerivedBounds {
    /// Lower envelope of the limit value coefficient at time `t`:
    /// `exp(-gamma rho_max^2 (T - t) / phi_min^2)`, which lies in `(0, 1]`.
    pub fn b0_lower(&self, t: f64) -> f64 {
        let s = (self.horizon - t).max(0.0);
        (-self.gamma * self.rho_max * self.rho_max * s / (self.phi_min * self.phi_min)).exp()
    }
}

/// Errors from pointwise model evaluations.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("domain error in phi: {0}")]
    Domain(String),
}

/// Effective limit trading rate scale `phi = sqrt(lambda + 2 gamma rho)`.
///
/// Defined for `rho > 0`, `lambda >= 0`, `gamma > 0`; the resilience rate must
/// be strictly positive for the transient impact to decay at all.
pub fn phi(rho: f64, lambda: f64, gamma: f64) -> Result<f64, ModelError> {
    if !(rho > 0.0) {
        return Err(ModelError::Domain(format!(
            "resilience rate must be positive, got rho = {rho}"
        )));
    }
    if !(lambda >= 0.0) {
        return Err(ModelError::Domain(format!(
            "risk rate must be nonnegative, got lambda = {lambda}"
        )));
    }
    if !(gamma > 0.0) {
        return Err(ModelError::Domain(format!(
            "impact scale must be positive, got gamma = {gamma}"
        )));
    }
    Ok((lambda + 2.0 * gamma * rho).sqrt())
}

/// Outcome of [`validate`]: a list of violated constraints (empty = valid).
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            write!(f, "parameters valid")
        } else {
            write!(f, "{}", self.violations.join("; "))
        }
    }
}

/// Check every static parameter constraint and report all violations at once.
///
/// The penalty floor `N >= N_min` only binds in the pre-limit regime; with
/// `eta = 0` the check is skipped entirely.
pub fn validate(params: &ModelParams) -> ValidationReport {
    let mut v = Vec::new();
    if !(params.gamma > 0.0 && params.gamma.is_finite()) {
        v.push(format!("gamma must be positive and finite, got {}", params.gamma));
    }
    if !(params.horizon > 0.0 && params.horizon.is_finite()) {
        v.push(format!("horizon must be positive and finite, got {}", params.horizon));
    }
    if !params.x0.is_finite() {
        v.push(format!("x0 must be finite, got {}", params.x0));
    }
    if !(params.eta >= 0.0 && params.eta.is_finite()) {
        v.push(format!("eta must be nonnegative and finite, got {}", params.eta));
    }
    let (rlo, rhi) = params.rho_bounds;
    if !(rlo > 0.0 && rlo.is_finite() && rhi >= rlo && rhi.is_finite()) {
        v.push(format!(
            "rho bounds must satisfy 0 < rho_min <= rho_max, got ({rlo}, {rhi})"
        ));
    }
    if !(params.lambda_max >= 0.0 && params.lambda_max.is_finite()) {
        v.push(format!(
            "lambda_max must be nonnegative and finite, got {}",
            params.lambda_max
        ));
    }
    if let Penalty::Finite(n) = params.penalty {
        if !n.is_finite() {
            v.push(format!("penalty must be finite or \"inf\", got {n}"));
        } else if params.eta > 0.0 && v.is_empty() {
            let n_min = params.min_penalty();
            if n < n_min {
                v.push(format!(
                    "penalty N = {n} is below the admissible floor N_min = {n_min} \
                     (gamma + 1 + sqrt(2 eta max(lambda_max, gamma rho_max)))"
                ));
            }
        }
    }
    ValidationReport { violations: v }
}

type Field = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// A one-factor specification: the factor diffusion `d chi = mu dt + sigma dW`
/// plus the coefficient maps `rho(t, chi)` and `lambda(t, chi)`.
#[derive(Clone)]
pub struct FactorModel {
    pub chi0: f64,
    /// True when `sigma` vanishes identically, so a single factor path
    /// describes the whole model and the PDE solvers can be bypassed.
    pub deterministic: bool,
    mu: Field,
    sigma: Field,
    rho: Field,
    lambda: Field,
}

impl fmt::Debug for FactorModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FactorModel")
            .field("chi0", &self.chi0)
            .field("deterministic", &self.deterministic)
            .finish_non_exhaustive()
    }
}

impl FactorModel {
    pub fn from_parts(
        chi0: f64,
        deterministic: bool,
        mu: Field,
        sigma: Field,
        rho: Field,
        lambda: Field,
    ) -> Self {
        FactorModel { chi0, deterministic, mu, sigma, rho, lambda }
    }

    pub fn mu(&self, t: f64, chi: f64) -> f64 {
        (self.mu)(t, chi)
    }

    pub fn sigma(&self, t: f64, chi: f64) -> f64 {
        (self.sigma)(t, chi)
    }

    pub fn rho(&self, t: f64, chi: f64) -> f64 {
        (self.rho)(t, chi)
    }

    pub fn lambda(&self, t: f64, chi: f64) -> f64 {
        (self.lambda)(t, chi)
    }
}

/// Named factor families understood by config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum FactorFamily {
    /// Constant coefficients, no factor noise.
    #[serde(rename = "constant")]
    Constant { rho: f64, lambda: f64 },
    /// Deterministic proportional family `lambda = c * rho` with constant
    /// `rho`; the family with a closed-form limit value coefficient.
    #[serde(rename = "lambda-equals-C-rho")]
    LambdaProportional { rho: f64, c: f64 },
    /// Sinusoidal resilience `rho = 1 + 0.9 sin(2.5 chi)` driven by a standard
    /// Brownian factor (`mu = 0`, `sigma = 1`, `chi0 = 0`), constant `lambda`.
    #[serde(rename = "fig1-sine")]
    SineResilience { lambda: f64 },
}

impl FactorFamily {
    /// Materialize the family as evaluable coefficient maps.
    pub fn build(&self) -> FactorModel {
        let zero: Field = Arc::new(|_, _| 0.0);
        match *self {
            FactorFamily::Constant { rho, lambda } => FactorModel::from_parts(
                0.0,
                true,
                zero.clone(),
                zero,
                Arc::new(move |_, _| rho),
                Arc::new(move |_, _| lambda),
            ),
            FactorFamily::LambdaProportional { rho, c } => FactorModel::from_parts(
                0.0,
                true,
                zero.clone(),
                zero,
                Arc::new(move |_, _| rho),
                Arc::new(move |_, _| c * rho),
            ),
            FactorFamily::SineResilience { lambda } => FactorModel::from_parts(
                0.0,
                false,
                zero,
                Arc::new(|_, _| 1.0),
                Arc::new(|_, chi: f64| 1.0 + 0.9 * (2.5 * chi).sin()),
                Arc::new(move |_, _| lambda),
            ),
        }
    }

    /// Tight resilience envelope implied by the family.
    pub fn implied_rho_bounds(&self) -> (f64, f64) {
        match *self {
            FactorFamily::Constant { rho, .. } | FactorFamily::LambdaProportional { rho, .. } => {
                (rho, rho)
            }
            FactorFamily::SineResilience { .. } => (0.1, 1.9),
        }
    }

    /// Tight risk-rate upper envelope implied by the family.
    pub fn implied_lambda_max(&self) -> f64 {
        match *self {
            FactorFamily::Constant { lambda, .. } => lambda,
            FactorFamily::LambdaProportional { rho, c } => c * rho,
            FactorFamily::SineResilience { lambda } => lambda,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn base_params() -> ModelParams {
        ModelParams {
            gamma: 3.0,
            horizon: 1.0,
            x0: 1.0,
            eta: 0.01,
            penalty: Penalty::Strict,
            rho_bounds: (1.0, 1.0),
            lambda_max: 1.0,
        }
    }

    #[test]
    fn canonical_parameters_validate() {
        let report = validate(&base_params());
        assert!(report.is_valid(), "{report}");
    }

    #[test]
    fn penalty_below_floor_is_rejected_with_floor_named() {
        // eta = 0.01, lambda_max = 1, gamma rho_max = 3 gives
        // N_min = 4 + sqrt(0.06) ~ 4.2449; N = 4 sits below it.
        let mut p = base_params();
        p.penalty = Penalty::Finite(4.0);
        let n_min = p.min_penalty();
        assert!((n_min - (4.0 + 0.06f64.sqrt())).abs() < 1e-12);
        assert!((n_min - 4.2449).abs() < 1e-4);
        let report = validate(&p);
        assert!(!report.is_valid());
        assert!(report.violations[0].contains(&format!("{n_min}")));
    }

    #[test]
    fn penalty_floor_skipped_in_limit_regime() {
        let mut p = base_params();
        p.eta = 0.0;
        p.penalty = Penalty::Finite(2.0); // below gamma + 1, but eta = 0
        assert!(validate(&p).is_valid());
    }

    #[test]
    fn phi_matches_worked_values() {
        assert!((phi(1.0, 1.0, 3.0).unwrap() - 7.0f64.sqrt()).abs() < 1e-15);
        assert!((phi(1.0, 1.0, 3.0).unwrap() - 2.645751).abs() < 1e-6);
        assert!((phi(1.0, 1.0, 0.5).unwrap() - 2.0f64.sqrt()).abs() < 1e-15);
        assert!((phi(1.0, 2.0, 2.0).unwrap() - 6.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn phi_rejects_nonpositive_rho() {
        assert!(phi(0.0, 1.0, 1.0).is_err());
        assert!(phi(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn penalty_serde_roundtrip() {
        #[derive(Serialize, Deserialize)]
        struct Holder {
            n: Penalty,
        }
        let h: Holder = toml::from_str("n = \"inf\"").unwrap();
        assert_eq!(h.n, Penalty::Strict);
        let h: Holder = toml::from_str("n = 5.5").unwrap();
        assert_eq!(h.n, Penalty::Finite(5.5));
        let s = toml::to_string(&Holder { n: Penalty::Strict }).unwrap();
        assert!(s.contains("inf"));
    }

    #[test]
    fn sine_family_stays_inside_implied_bounds() {
        let fam = FactorFamily::SineResilience { lambda: 1.0 };
        let model = fam.build();
        let (lo, hi) = fam.implied_rho_bounds();
        for i in 0..1000 {
            let chi = -8.0 + 16.0 * i as f64 / 999.0;
            let r = model.rho(0.0, chi);
            assert!(r >= lo - 1e-12 && r <= hi + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn phi_strictly_increasing_in_each_argument(
            rho in 1e-3..5.0f64,
            lambda in 0.0..5.0f64,
            gamma in 1e-3..5.0f64,
            bump in 1e-3..1.0f64,
        ) {
            let f = phi(rho, lambda, gamma).unwrap();
            prop_assert!(phi(rho + bump, lambda, gamma).unwrap() > f);
            prop_assert!(phi(rho, lambda + bump, gamma).unwrap() > f);
            prop_assert!(phi(rho, lambda, gamma + bump).unwrap() > f);
        }

        #[test]
        fn penalty_floor_monotone_and_anchored(
            eta in 0.0..1.0f64,
            lambda_max in 0.0..5.0f64,
            rho_max in 1e-3..5.0f64,
            bump in 1e-3..1.0f64,
        ) {
            let mk = |eta: f64, lmax: f64, rmax: f64| ModelParams {
                eta,
                lambda_max: lmax,
                rho_bounds: (1e-3, rmax),
                ..base_params()
            };
            let n = mk(eta, lambda_max, rho_max).min_penalty();
            prop_assert!(mk(eta + bump, lambda_max, rho_max).min_penalty() >= n);
            prop_assert!(mk(eta, lambda_max + bump, rho_max).min_penalty() >= n);
            prop_assert!(mk(eta, lambda_max, rho_max + bump).min_penalty() >= n);
            let at_zero = mk(0.0, lambda_max, rho_max).min_penalty();
            prop_assert!((at_zero - (base_params().gamma + 1.0)).abs() < 1e-12);
        }

        #[test]
        fn limit_coefficient_floor_in_unit_interval(
            t in 0.0..1.0f64,
            rho_max in 0.1..3.0f64,
            lambda_max in 0.0..3.0f64,
        ) {
            let p = ModelParams {
                rho_bounds: (0.05, rho_max.max(0.05)),
                lambda_max,
                ..base_params()
            };
            let floor = p.bounds().b0_lower(t);
            prop_assert!(floor > 0.0 && floor <= 1.0);
        }
    }
}
