//! Completed graphs of right-continuous paths, their Hausdorff distance, and
//! the convergence-study harness comparing positive-impact states with their
//! small-impact limit.
//!
//! A path with jumps converges to a limit with jumps only in the graph
//! sense: the completed graph fills each jump with a vertical segment, and
//! two paths are close when the Hausdorff distance between those polylines
//! (in the max norm on the time-value plane) is small. The distance is
//! computed by dense resampling at a resolution `r` against exact
//! point-to-segment distances, which certifies the result to within `r`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::coeffs::{
    solve_b0_deterministic, solve_b0_pde, solve_prelimit_deterministic, solve_prelimit_pde,
    CoefficientField, SolveError, SolverOptions,
};
use crate::limit::{build_limit_state, decompose_limit_strategy, LimitError};
use crate::model::{FactorModel, ModelParams};
use crate::pathsim::{simulate_bundle, PathBundle, PathError, SampledPath, TimeGrid};
use crate::statesim::{integrate_state, StateError};

/// Polyline in the (time, value) plane; vertical segments realize jumps.
#[derive(Debug, Clone)]
pub struct CompletedGraph {
    pub polyline: Vec<(f64, f64)>,
}

/// Study failures: any stage of the per-(eta, seed) pipeline can fault.
#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Limit(#[from] LimitError),
}

/// Per-eta aggregate distances between the positive-impact pipeline and its
/// explicit limit, over a common-random-number path batch.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub eta_values: Vec<f64>,
    /// Mean over paths of `sup_{t <= T-eps} |B - B0|` along the path.
    pub sup_b: Vec<f64>,
    /// Same for the scaled gain `D`.
    pub sup_d: Vec<f64>,
    /// Same for the scaled gain `E`.
    pub sup_e: Vec<f64>,
    /// Mean over paths of `sup_{eps <= t <= T-eps} |Xhat - Xhat0|`.
    pub state_distances: Vec<f64>,
    /// Mean over paths of the completed-graph Hausdorff distance.
    pub hausdorff: Vec<f64>,
    /// Fraction of paths with Hausdorff distance at most `eps`.
    pub fraction_within: Vec<f64>,
    pub eps: f64,
    pub n_paths: usize,
}

/// Completed graph of a sampled path with the given jumps.
///
/// `jumps` lists `(time, delta)` with `delta` the post-minus-pre jump size
/// (sell blocks have negative delta); each inserts a vertical segment from
/// the pre-jump value down (or up) to the sampled node. Jump times must be
/// grid nodes.
pub fn completed_graph(path: &SampledPath, jumps: &[(f64, f64)]) -> CompletedGraph {
    let grid = &path.grid;
    let tol = 1e-9 * grid.horizon();
    let mut polyline = Vec::with_capacity(grid.len() + 2 * jumps.len());
    for i in 0..grid.len() {
        let t = grid.t[i];
        for &(tj, delta) in jumps {
            if (tj - t).abs() <= tol && delta != 0.0 {
                polyline.push((t, path.values[i] - delta));
            }
        }
        polyline.push((t, path.values[i]));
    }
    CompletedGraph { polyline }
}

/// Exact max-norm distance from `q` to the segment `p0 -> p1`.
fn point_segment_linf(q: (f64, f64), p0: (f64, f64), p1: (f64, f64)) -> f64 {
    // Both coordinate gaps are affine in the segment parameter s; the max of
    // their absolute values is convex piecewise-linear, so the minimum sits
    // at an endpoint, a kink (zero of either gap), or a crossing.
    let (a0, a1) = (p0.0 - q.0, p1.0 - q.0);
    let (b0, b1) = (p0.1 - q.1, p1.1 - q.1);
    let (da, db) = (a1 - a0, b1 - b0);
    let mut best = f64::INFINITY;
    let mut consider = |s: f64| {
        if (0.0..=1.0).contains(&s) {
            let v = (a0 + s * da).abs().max((b0 + s * db).abs());
            best = best.min(v);
        }
    };
    consider(0.0);
    consider(1.0);
    if da != 0.0 {
        consider(-a0 / da);
    }
    if db != 0.0 {
        consider(-b0 / db);
    }
    if da != db {
        consider((b0 - a0) / (da - db));
    }
    if da != -db {
        consider(-(a0 + b0) / (da + db));
    }
    best
}

fn densify(g: &CompletedGraph, r: f64) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    for w in g.polyline.windows(2) {
        let (p0, p1) = (w[0], w[1]);
        let len = (p1.0 - p0.0).abs().max((p1.1 - p0.1).abs());
        let pieces = (len / r).ceil().max(1.0) as usize;
        for k in 0..pieces {
            let s = k as f64 / pieces as f64;
            pts.push((p0.0 + s * (p1.0 - p0.0), p0.1 + s * (p1.1 - p0.1)));
        }
    }
    pts.push(*g.polyline.last().unwrap());
    pts
}

fn directed_hausdorff(from: &[(f64, f64)], to: &CompletedGraph) -> f64 {
    let segs = &to.polyline;
    let mut sup = 0.0f64;
    let mut cursor = 0usize;
    for &q in from {
        // Start from the segment whose time range is nearest the query and
        // widen until times alone exceed the best found so far.
        while cursor + 2 < segs.len() && segs[cursor + 1].0 < q.0 {
            cursor += 1;
        }
        let mut best = f64::INFINITY;
        let mut lo = cursor as isize;
        let mut hi = cursor + 1;
        loop {
            let mut advanced = false;
            if lo >= 0 {
                let i = lo as usize;
                let t_gap = (q.0 - segs[i + 1].0).max(0.0);
                if t_gap < best {
                    best = best.min(point_segment_linf(q, segs[i], segs[i + 1]));
                    lo -= 1;
                    advanced = true;
                }
            }
            if hi + 1 < segs.len() {
                let t_gap = (segs[hi].0 - q.0).max(0.0);
                if t_gap < best {
                    best = best.min(point_segment_linf(q, segs[hi], segs[hi + 1]));
                    hi += 1;
                    advanced = true;
                }
            }
            if !advanced {
                break;
            }
        }
        sup = sup.max(best);
    }
    sup
}

/// Hausdorff distance between two completed graphs in the max norm,
/// computed at resolution `r`; the result is within `r` of the exact value.
pub fn hausdorff(a: &CompletedGraph, b: &CompletedGraph, r: f64) -> f64 {
    assert!(r > 0.0 && !a.polyline.is_empty() && !b.polyline.is_empty());
    if a.polyline.len() < 2 || b.polyline.len() < 2 {
        // Degenerate single-vertex graphs: fall back to point distances.
        let pa = a.polyline[0];
        let d_ab: f64 = b
            .polyline
            .iter()
            .map(|&p| (p.0 - pa.0).abs().max((p.1 - pa.1).abs()))
            .fold(f64::INFINITY, f64::min);
        return d_ab;
    }
    let fwd = directed_hausdorff(&densify(a, r), b);
    let bwd = directed_hausdorff(&densify(b, r), a);
    fwd.max(bwd)
}

/// Largest oscillation of the path over node pairs at most `nu` apart.
pub fn modulus_of_continuity(path: &SampledPath, nu: f64) -> f64 {
    let t = &path.grid.t;
    let v = &path.values;
    let mut sup = 0.0f64;
    let mut j = 0usize;
    for i in 0..t.len() {
        if j < i {
            j = i;
        }
        while j + 1 < t.len() && t[j + 1] - t[i] <= nu {
            j += 1;
        }
        for k in i + 1..=j {
            sup = sup.max((v[k] - v[i]).abs());
        }
    }
    sup
}

fn sup_field_gap(
    pre: &CoefficientField,
    lim: &CoefficientField,
    bundle: &PathBundle,
    t_max: f64,
) -> f64 {
    let grid = &bundle.chi.grid;
    let mut sup = 0.0f64;
    for i in 0..grid.len() {
        let t = grid.t[i];
        if t > t_max {
            break;
        }
        let chi = bundle.chi.values[i];
        sup = sup.max((pre.eval(t, chi) - lim.eval(t, chi)).abs());
    }
    sup
}

/// Run the full pipeline per (eta, seed) with common random numbers and
/// aggregate coefficient, state, and graph distances to the explicit limit.
///
/// The factor's Brownian driver depends only on the seed and grid, so all
/// etas share each seed's scenario; deterministic factors take the ODE fast
/// path, stochastic ones the implicit PDE route on `chi` nodes.
pub fn convergence_study(
    params: &ModelParams,
    factor: &FactorModel,
    etas: &[f64],
    seeds: &[u64],
    eps: f64,
) -> Result<ConvergenceReport, StudyError> {
    assert!(!etas.is_empty() && !seeds.is_empty());
    assert!(etas.windows(2).all(|w| w[1] < w[0]), "etas must decrease");
    let grid = TimeGrid::default_for(params.horizon);
    let horizon = params.horizon;
    let opts = SolverOptions::default();
    let chi = crate::coeffs::chi_grid_for(factor, horizon, 65, 6.0);

    let bundles: Vec<PathBundle> = seeds
        .iter()
        .map(|&s| simulate_bundle(factor, params, &grid, s))
        .collect::<Result<_, _>>()?;

    let limit = if factor.deterministic {
        solve_b0_deterministic(params, &bundles[0].rho, &bundles[0].lambda)?
    } else {
        solve_b0_pde(factor, params, &chi, &grid)?
    };
    let limit_states: Vec<_> =
        bundles.iter().map(|b| build_limit_state(&limit, b, params)).collect();
    let limit_graphs: Vec<CompletedGraph> = limit_states
        .iter()
        .map(|st| {
            let strat = decompose_limit_strategy(st, params)?;
            Ok(completed_graph(
                &st.xhat0,
                &[(0.0, -strat.j_minus[0].1), (horizon, -strat.j_minus[1].1)],
            ))
        })
        .collect::<Result<_, StudyError>>()?;

    let r = grid.dt_max / 4.0 * params.x0.min(1.0).max(1e-6);
    let t_hi = horizon - eps;

    let mut report = ConvergenceReport {
        eta_values: etas.to_vec(),
        sup_b: Vec::new(),
        sup_d: Vec::new(),
        sup_e: Vec::new(),
        state_distances: Vec::new(),
        hausdorff: Vec::new(),
        fraction_within: Vec::new(),
        eps,
        n_paths: seeds.len(),
    };

    for &eta in etas {
        let p = ModelParams { eta, ..params.clone() };
        let fields = if factor.deterministic {
            solve_prelimit_deterministic(&p, &bundles[0].rho, &bundles[0].lambda, &opts)?
        } else {
            solve_prelimit_pde(factor, &p, &chi, &grid, &opts)?
        };
        let rows: Result<Vec<[f64; 5]>, StudyError> = bundles
            .par_iter()
            .zip(limit_states.par_iter())
            .zip(limit_graphs.par_iter())
            .map(|((bundle, lim_state), lim_graph)| {
                let state = integrate_state(&fields, bundle, &p)?;
                let mut sup_state = 0.0f64;
                for i in 0..grid.len() {
                    let t = grid.t[i];
                    if t >= eps && t <= t_hi {
                        sup_state = sup_state
                            .max((state.xhat.values[i] - lim_state.xhat0.values[i]).abs());
                    }
                }
                let graph = completed_graph(&state.xhat, &[]);
                let d_inf = hausdorff(&graph, lim_graph, r);
                Ok([
                    sup_field_gap(&fields.b, &limit.b0, bundle, t_hi),
                    sup_field_gap(&fields.d, &limit.d0, bundle, t_hi),
                    sup_field_gap(&fields.e, &limit.e0, bundle, t_hi),
                    sup_state,
                    d_inf,
                ])
            })
            .collect();
        let rows = rows?;
        let n = rows.len() as f64;
        let mean = |k: usize| rows.iter().map(|r| r[k]).sum::<f64>() / n;
        report.sup_b.push(mean(0));
        report.sup_d.push(mean(1));
        report.sup_e.push(mean(2));
        report.state_distances.push(mean(3));
        report.hausdorff.push(mean(4));
        report
            .fraction_within
            .push(rows.iter().filter(|r| r[4] <= eps).count() as f64 / n);
    }
    Ok(report)
}
