//! Artifact output: stable configuration hashing, CSV tables with embedded
//! metadata comments, and JSON reports.
//!
//! Every artifact starts with `# key=value` comment lines (CSV) or a `meta`
//! object (JSON) carrying the configuration hash and, where applicable, the
//! seed, so a result file always identifies the run that produced it.
//! Writers format numbers with the shortest round-trip representation, so
//! rerunning with equal inputs reproduces files byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeffs::CoefficientField;
use crate::graphs::ConvergenceReport;
use crate::limit::{LimitState, LimitStrategy};
use crate::pathsim::{PathBundle, SampledPath, TimeGrid};
use crate::statesim::PreLimitState;
use crate::strategies::SemimartingaleStrategy;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Artifact read/write failures.
#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("strategy file is inconsistent: {0}")]
    BadStrategy(String),
}

/// 64-bit FNV-1a hash; stable across platforms and releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hash rendered as 16 lowercase hex digits, the form embedded in artifacts.
pub fn stable_hash_hex(bytes: &[u8]) -> String {
    format!("{:016x}", stable_hash(bytes))
}

/// Provenance stamped into every artifact.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Meta {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Meta { config_hash: config_hash.into(), seed: None }
    }

    pub fn with_seed(config_hash: impl Into<String>, seed: u64) -> Self {
        Meta { config_hash: config_hash.into(), seed: Some(seed) }
    }

    fn write_comments(&self, out: &mut impl Write) -> Result<(), IoError> {
        writeln!(out, "# config_hash={}", self.config_hash)?;
        if let Some(seed) = self.seed {
            writeln!(out, "# seed={seed}")?;
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufWriter<File>, IoError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_columns(
    path: &Path,
    meta: &Meta,
    header: &str,
    columns: &[&[f64]],
) -> Result<(), IoError> {
    let n = columns[0].len();
    assert!(columns.iter().all(|c| c.len() == n), "ragged columns");
    let mut out = open(path)?;
    meta.write_comments(&mut out)?;
    writeln!(out, "{header}")?;
    for i in 0..n {
        for (k, col) in columns.iter().enumerate() {
            if k > 0 {
                write!(out, ",")?;
            }
            write!(out, "{}", col[i])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Factor scenario table: driver, factor, and the model inputs along it.
pub fn write_bundle_csv(path: &Path, bundle: &PathBundle, meta: &Meta) -> Result<(), IoError> {
    write_columns(
        path,
        meta,
        "t,w,chi,rho,lambda,phi",
        &[
            &bundle.w.grid.t,
            &bundle.w.values,
            &bundle.chi.values,
            &bundle.rho.values,
            &bundle.lambda.values,
            &bundle.phi.values,
        ],
    )
}

/// Positive-impact state table for one path: inventory, impact, deficit.
pub fn write_state_csv(path: &Path, state: &PreLimitState, meta: &Meta) -> Result<(), IoError> {
    write_columns(
        path,
        meta,
        "t,xhat,yhat,zhat",
        &[&state.xhat.grid.t, &state.xhat.values, &state.yhat.values, &state.zhat.values],
    )
}

/// Limit state table with the absolutely continuous strategy component; the
/// two blocks live in the strategy JSON, not here.
pub fn write_limit_csv(
    path: &Path,
    state: &LimitState,
    strategy: &LimitStrategy,
    meta: &Meta,
) -> Result<(), IoError> {
    write_columns(
        path,
        meta,
        "t,xhat0,yhat0,zhat0,vhat",
        &[
            &state.xhat0.grid.t,
            &state.xhat0.values,
            &state.yhat0.values,
            &state.zhat0.values,
            &strategy.v_hat.values,
        ],
    )
}

/// Coefficient-field table over all (time, factor) nodes. All fields must
/// share one grid; deterministic fields write a single zero factor column.
pub fn write_fields_csv(
    path: &Path,
    named: &[(&str, &CoefficientField)],
    meta: &Meta,
) -> Result<(), IoError> {
    assert!(!named.is_empty());
    let grid = named[0].1.grid().clone();
    let n_chi = named[0].1.n_chi();
    for (_, f) in named {
        assert_eq!(f.n_chi(), n_chi, "fields must share one factor grid");
        assert_eq!(f.grid().len(), grid.len(), "fields must share one time grid");
    }
    let mut out = open(path)?;
    meta.write_comments(&mut out)?;
    write!(out, "t,chi")?;
    for (name, _) in named {
        write!(out, ",{name}")?;
    }
    writeln!(out)?;
    for i in 0..grid.len() {
        for j in 0..n_chi {
            let chi = named[0].1.chi_grid().map_or(0.0, |c| c[j]);
            write!(out, "{},{}", grid.t[i], chi)?;
            for (_, f) in named {
                write!(out, ",{}", f.node(i, j))?;
            }
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// JSON report wrapping any serializable payload with its provenance.
pub fn write_report_json<T: Serialize>(path: &Path, payload: &T, meta: &Meta) -> Result<(), IoError> {
    #[derive(Serialize)]
    struct Report<'a, T> {
        meta: &'a Meta,
        #[serde(flatten)]
        payload: &'a T,
    }
    let mut out = open(path)?;
    serde_json::to_writer_pretty(&mut out, &Report { meta, payload })?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// Convergence report as a per-eta CSV matrix for plotting tools.
pub fn write_study_csv(path: &Path, report: &ConvergenceReport, meta: &Meta) -> Result<(), IoError> {
    write_columns(
        path,
        meta,
        "eta,sup_b,sup_d,sup_e,state_distance,hausdorff,fraction_within",
        &[
            &report.eta_values,
            &report.sup_b,
            &report.sup_d,
            &report.sup_e,
            &report.state_distances,
            &report.hausdorff,
            &report.fraction_within,
        ],
    )
}

/// On-disk form of a semimartingale strategy; the flow is stored inline with
/// its time grid so the file stands alone.
#[derive(Debug, Serialize, Deserialize)]
pub struct StrategyFile {
    pub j_plus: Vec<(f64, f64)>,
    pub j_minus: Vec<(f64, f64)>,
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    pub liquidating: bool,
}

/// Write a strategy with provenance; read back with [`read_strategy_json`].
pub fn write_strategy_json(
    path: &Path,
    strategy: &SemimartingaleStrategy,
    meta: &Meta,
) -> Result<(), IoError> {
    let file = StrategyFile {
        j_plus: strategy.j_plus.clone(),
        j_minus: strategy.j_minus.clone(),
        t: strategy.v.grid.t.clone(),
        v: strategy.v.values.clone(),
        liquidating: strategy.liquidating,
    };
    write_report_json(path, &file, meta)
}

/// Load a strategy file written by [`write_strategy_json`] (or by hand).
pub fn read_strategy_json(path: &Path) -> Result<SemimartingaleStrategy, IoError> {
    let text = std::fs::read_to_string(path)?;
    let file: StrategyFile = serde_json::from_str(&text)?;
    if file.t.len() != file.v.len() || file.t.len() < 2 {
        return Err(IoError::BadStrategy(format!(
            "flow needs matching t/v columns with at least two nodes, got {} and {}",
            file.t.len(),
            file.v.len()
        )));
    }
    if file.t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(IoError::BadStrategy("flow times must strictly increase".into()));
    }
    let grid = TimeGrid::from_times(file.t);
    Ok(SemimartingaleStrategy {
        j_plus: file.j_plus,
        j_minus: file.j_minus,
        v: SampledPath::new(grid, file.v),
        liquidating: file.liquidating,
    })
}
