//! Compact binary cache for solved coefficient fields.
//!
//! Solves are deterministic given a configuration, so fields are stored under
//! a caller-supplied content key (a hash of the model, factor, and grids) and
//! a load is refused when the key on disk disagrees — a stale or foreign
//! cache file can never masquerade as the requested solve. The format is a
//! fixed little-endian layout, not a serde payload: fields are large flat
//! `f64` blocks and round-tripping them bit-exactly matters more than
//! flexibility.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::model::Penalty;
use crate::pathsim::TimeGrid;

use super::{CoefficientField, LimitCoefficients, PreLimitCoefficients};

const MAGIC: &[u8; 4] = b"XLB1";
const KIND_LIMIT: u8 = 0;
const KIND_PRELIMIT: u8 = 1;

/// Failure to read or validate a cache file.
#[derive(Debug, Error)]
pub enum CacheError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a coefficient cache file (bad magic)")]
    BadMagic,
    #[error("cache holds a different field kind")]
    WrongKind,
    #[error("cache key {found:#018x} does not match requested {expected:#018x}")]
    KeyMismatch { expected: u64, found: u64 },
    #[error("malformed cache payload: {0}")]
    Malformed(String),
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_slice(w: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    write_u64(w, v.len() as u64)?;
    for &x in v {
        write_f64(w, x)?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64, CacheError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64, CacheError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_slice(r: &mut impl Read, cap: u64) -> Result<Vec<f64>, CacheError> {
    let len = read_u64(r)?;
    if len > cap {
        return Err(CacheError::Malformed(format!("block of {len} values exceeds cap {cap}")));
    }
    let mut out = Vec::with_capacity(len as usize);
    for _ in 0..len {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

/// Sanity cap on any single stored block; a valid cache never comes close.
const BLOCK_CAP: u64 = 1 << 28;

fn write_field(w: &mut impl Write, field: &CoefficientField) -> std::io::Result<()> {
    write_slice(w, field.raw())
}

fn write_header(
    w: &mut impl Write,
    kind: u8,
    key: u64,
    grid: &TimeGrid,
    chi: Option<&[f64]>,
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[kind])?;
    write_u64(w, key)?;
    write_slice(w, &grid.t)?;
    match chi {
        Some(chi) => write_slice(w, chi),
        None => write_u64(w, 0),
    }
}

struct Header {
    grid: Arc<TimeGrid>,
    chi: Option<Vec<f64>>,
}

fn read_header(r: &mut impl Read, kind: u8, key: u64) -> Result<Header, CacheError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CacheError::BadMagic);
    }
    let mut k = [0u8; 1];
    r.read_exact(&mut k)?;
    if k[0] != kind {
        return Err(CacheError::WrongKind);
    }
    let found = read_u64(r)?;
    if found != key {
        return Err(CacheError::KeyMismatch { expected: key, found });
    }
    let times = read_slice(r, BLOCK_CAP)?;
    if times.len() < 2 {
        return Err(CacheError::Malformed("time grid needs at least 2 nodes".into()));
    }
    let chi = read_slice(r, BLOCK_CAP)?;
    if chi.len() == 1 {
        return Err(CacheError::Malformed("spatial chi grid needs at least 2 nodes".into()));
    }
    Ok(Header {
        grid: TimeGrid::from_times(times),
        chi: if chi.is_empty() { None } else { Some(chi) },
    })
}

fn read_field(r: &mut impl Read, header: &Header) -> Result<CoefficientField, CacheError> {
    let values = read_slice(r, BLOCK_CAP)?;
    let expect = header.grid.len() * header.chi.as_ref().map_or(1, |c| c.len());
    if values.len() != expect {
        return Err(CacheError::Malformed(format!(
            "field of {} values does not match grid of {expect}",
            values.len()
        )));
    }
    Ok(match &header.chi {
        Some(chi) => CoefficientField::spatial(header.grid.clone(), chi.clone(), values),
        None => CoefficientField::deterministic(header.grid.clone(), values),
    })
}

/// Write solved limit fields under the given content key.
pub fn save_limit(path: &Path, key: u64, lc: &LimitCoefficients) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, KIND_LIMIT, key, &lc.b0.grid, lc.b0.chi_grid())?;
    write_field(&mut w, &lc.b0)?;
    write_field(&mut w, &lc.d0)?;
    write_field(&mut w, &lc.e0)?;
    w.flush()
}

/// Load limit fields, refusing a file whose content key differs.
pub fn load_limit(path: &Path, key: u64) -> Result<LimitCoefficients, CacheError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r, KIND_LIMIT, key)?;
    Ok(LimitCoefficients {
        b0: read_field(&mut r, &header)?,
        d0: read_field(&mut r, &header)?,
        e0: read_field(&mut r, &header)?,
    })
}

/// Write solved pre-limit fields under the given content key.
pub fn save_prelimit(path: &Path, key: u64, pc: &PreLimitCoefficients) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, KIND_PRELIMIT, key, &pc.b.grid, pc.b.chi_grid())?;
    write_f64(&mut w, pc.eta)?;
    let n = match pc.penalty {
        Penalty::Finite(n) => n,
        Penalty::Strict => f64::INFINITY,
    };
    write_f64(&mut w, n)?;
    write_field(&mut w, &pc.b)?;
    write_field(&mut w, &pc.d)?;
    write_field(&mut w, &pc.e)?;
    w.flush()
}

/// Load pre-limit fields, refusing a file whose content key differs.
pub fn load_prelimit(path: &Path, key: u64) -> Result<PreLimitCoefficients, CacheError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r, KIND_PRELIMIT, key)?;
    let eta = read_f64(&mut r)?;
    let n = read_f64(&mut r)?;
    let penalty = if n.is_infinite() { Penalty::Strict } else { Penalty::Finite(n) };
    Ok(PreLimitCoefficients {
        b: read_field(&mut r, &header)?,
        d: read_field(&mut r, &header)?,
        e: read_field(&mut r, &header)?,
        eta,
        penalty,
    })
}
