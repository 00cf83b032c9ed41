//! Artifact serialization: columnar CSV and the compact `PENS` binary
//! layout for ensembles, plus plot-ready CSV for fields, densities and
//! particle snapshots.
//!
//! `PENS` layout (all integers and floats little-endian):
//!
//! ```text
//! magic   4 bytes  "PENS"
//! version u32      1
//! d       u32
//! paths   u64
//! steps   u64
//! seed    u64
//! times   (steps+1) f64
//! then per path: (steps+1)*d f64 positions,
//!                 steps*d    f64 Brownian increments,
//!                 steps*d    f64 martingale increments
//! ```
//!
//! Floats in CSV use Rust's shortest round-trip formatting, so identical
//! runs produce identical bytes.

use crate::density::DensityEstimate;
use crate::diffusion::{DriftField, PathEnsemble};
use crate::error::Result;
use crate::particles::{ChaosRow, VortexEnsemble};
use std::io::Write;

pub const PENS_MAGIC: &[u8; 4] = b"PENS";
pub const PENS_VERSION: u32 = 1;

/// Columnar CSV: `path,step,t,x1..xd`.
pub fn write_ensemble_csv(ens: &PathEnsemble, out: &mut impl Write) -> Result<()> {
    let d = ens.dim();
    write!(out, "path,step,t")?;
    for k in 1..=d {
        write!(out, ",x{k}")?;
    }
    writeln!(out)?;
    for path in 0..ens.n_paths() {
        for (node, &t) in ens.times().iter().enumerate() {
            write!(out, "{path},{node},{t}")?;
            for v in ens.position(path, node) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Compact binary dump in the `PENS` layout.
pub fn write_ensemble_binary(ens: &PathEnsemble, out: &mut impl Write) -> Result<()> {
    out.write_all(PENS_MAGIC)?;
    out.write_all(&PENS_VERSION.to_le_bytes())?;
    out.write_all(&(ens.dim() as u32).to_le_bytes())?;
    out.write_all(&(ens.n_paths() as u64).to_le_bytes())?;
    out.write_all(&(ens.steps() as u64).to_le_bytes())?;
    out.write_all(&ens.seed().to_le_bytes())?;
    for &t in ens.times() {
        out.write_all(&t.to_le_bytes())?;
    }
    for path in 0..ens.n_paths() {
        for node in 0..=ens.steps() {
            for &v in ens.position(path, node) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        for step in 0..ens.steps() {
            for &v in ens.brownian_increment(path, step) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        for step in 0..ens.steps() {
            for &v in ens.martingale_increment(path, step) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Drift field CSV: `t,x1..xd,b1..bd`, one row per space-time node.
pub fn write_drift_csv(field: &DriftField, out: &mut impl Write) -> Result<()> {
    let d = field.dim();
    write!(out, "t")?;
    for k in 1..=d {
        write!(out, ",x{k}")?;
    }
    for k in 1..=d {
        write!(out, ",b{k}")?;
    }
    writeln!(out)?;
    let nodes = field.grid().node_count();
    for (ti, &t) in field.times().iter().enumerate() {
        for node in 0..nodes {
            let pos = field.grid().node_position(node);
            write!(out, "{t}")?;
            for v in &pos {
                write!(out, ",{v}")?;
            }
            for v in field.node_value(ti, node) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Long-format density CSV: `t,y1..yd,p_hat,stderr,bound`. `bounds`, when
/// given, must hold one value per bin (e.g. an envelope or the
/// perturbation right-hand side); otherwise the column is empty.
pub fn write_density_csv(
    est: &DensityEstimate,
    bounds: Option<&[f64]>,
    out: &mut impl Write,
) -> Result<()> {
    let d = est.grid.dim();
    write!(out, "t")?;
    for k in 1..=d {
        write!(out, ",y{k}")?;
    }
    writeln!(out, ",p_hat,stderr,bound")?;
    for bin in 0..est.grid.bin_count() {
        let c = est.grid.center(bin);
        write!(out, "{}", est.time)?;
        for v in &c {
            write!(out, ",{v}")?;
        }
        write!(out, ",{},{}", est.density[bin], est.se_density[bin])?;
        match bounds {
            Some(b) => writeln!(out, ",{}", b[bin])?,
            None => writeln!(out, ",")?,
        }
    }
    Ok(())
}

/// Vortex snapshot CSV: `i,x1..xd,intensity`.
pub fn write_vortex_csv(ens: &VortexEnsemble, out: &mut impl Write) -> Result<()> {
    let d = ens.dim();
    write!(out, "i")?;
    for k in 1..=d {
        write!(out, ",x{k}")?;
    }
    writeln!(out, ",intensity")?;
    for i in 0..ens.len() {
        write!(out, "{i}")?;
        for v in ens.position(i) {
            write!(out, ",{v}")?;
        }
        writeln!(out, ",{}", ens.intensities()[i])?;
    }
    Ok(())
}

/// Convergence table CSV: `n,replicas,mean_err,mean_err_se,max_err,max_err_se`.
pub fn write_chaos_csv(rows: &[ChaosRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "n,replicas,mean_err,mean_err_se,max_err,max_err_se")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.n, r.replicas, r.mean_err, r.mean_err_se, r.max_err, r.max_err_se
        )?;
    }
    Ok(())
}
