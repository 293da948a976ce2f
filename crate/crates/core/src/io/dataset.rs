//! Dataset directories.
//!
//! A synthesized directory holds, for sources `i = 1..N`, the files `M_i.mat`,
//! `S_i.mat`, `V_g_i.mat`, `U_l_i.mat` and `V_l_i.mat`, the shared `U_g.mat`, and
//! `identifiability_report.txt`. User-supplied data may instead list its
//! observation files, one per line, in `manifest.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::matfile::{exists, read_matrix, write_matrix};
use super::{parse_key_values, read_text, write_atomic};
use crate::altmin::SparseEstimate;
use crate::error::{Result, TcmfError};
use crate::jimf::FactorEstimate;
use crate::model::{GroundTruth, IdentifiabilityReport, ObservationSet};
use crate::numerics::Matrix;

pub const REPORT_FILE: &str = "identifiability_report.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

fn source_file(dir: &Path, stem: &str, i: usize) -> PathBuf {
    dir.join(format!("{stem}_{}.mat", i + 1))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| TcmfError::io(dir, e))
}

/// Writes observations, ground-truth factors and the report.
pub fn write_synth_dataset(
    dir: &Path,
    gt: &GroundTruth,
    report: &IdentifiabilityReport,
) -> Result<()> {
    create_dir(dir)?;
    for i in 0..gt.n_sources() {
        let m = gt.low_rank(i) + &gt.s[i];
        write_matrix(&source_file(dir, "M", i), &m)?;
        write_matrix(&source_file(dir, "S", i), &gt.s[i])?;
        write_matrix(&source_file(dir, "V_g", i), &gt.v_g[i])?;
        write_matrix(&source_file(dir, "U_l", i), &gt.u_l[i])?;
        write_matrix(&source_file(dir, "V_l", i), &gt.v_l[i])?;
    }
    write_matrix(&dir.join("U_g.mat"), &gt.u_g)?;
    write_report(&dir.join(REPORT_FILE), report, gt)
}

/// Observation files in source order.
pub fn observation_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(TcmfError::MissingInput(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let manifest = dir.join(MANIFEST_FILE);
    if exists(&manifest) {
        let text = read_text(&manifest)?;
        let paths: Vec<PathBuf> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| dir.join(l))
            .collect();
        if paths.is_empty() {
            return Err(TcmfError::CorruptData {
                path: manifest,
                reason: "manifest lists no matrices".into(),
            });
        }
        return Ok(paths);
    }
    let mut paths = Vec::new();
    while exists(&source_file(dir, "M", paths.len())) {
        paths.push(source_file(dir, "M", paths.len()));
    }
    if paths.is_empty() {
        return Err(TcmfError::MissingInput(format!(
            "{} has neither M_1.mat nor {MANIFEST_FILE}",
            dir.display()
        )));
    }
    Ok(paths)
}

pub fn load_observations(dir: &Path, r1: usize, r2: usize) -> Result<ObservationSet> {
    let matrices = observation_files(dir)?
        .iter()
        .map(|p| read_matrix(p))
        .collect::<Result<Vec<_>>>()?;
    ObservationSet::new(matrices, r1, r2)
}

/// Ground truth stored alongside the observations, if `U_g.mat` is present.
pub fn load_ground_truth(dir: &Path, n_sources: usize) -> Result<Option<GroundTruth>> {
    let ug_path = dir.join("U_g.mat");
    if !exists(&ug_path) {
        return Ok(None);
    }
    let u_g = read_matrix(&ug_path)?;
    let load = |stem: &str| -> Result<Vec<Matrix>> {
        (0..n_sources)
            .map(|i| read_matrix(&source_file(dir, stem, i)))
            .collect()
    };
    let seed = match read_report(&dir.join(REPORT_FILE)) {
        Ok((_, seed)) => seed.unwrap_or(0),
        Err(TcmfError::MissingInput(_)) => 0,
        Err(e) => return Err(e),
    };
    let gt = GroundTruth {
        u_g,
        v_g: load("V_g")?,
        u_l: load("U_l")?,
        v_l: load("V_l")?,
        s: load("S")?,
        seed,
    };
    gt.validate().map_err(|e| TcmfError::CorruptData {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(Some(gt))
}

pub fn write_report(path: &Path, report: &IdentifiabilityReport, gt: &GroundTruth) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "alpha={}", report.alpha);
    let _ = writeln!(text, "mu={}", report.mu);
    let _ = writeln!(text, "theta={}", report.theta);
    let _ = writeln!(text, "sigma_max={}", report.sigma_max);
    let _ = writeln!(text, "sigma_min={}", report.sigma_min);
    let _ = writeln!(text, "n_sources={}", gt.n_sources());
    let _ = writeln!(text, "r1={}", gt.r1());
    let _ = writeln!(text, "r2={}", gt.r2());
    let _ = writeln!(text, "seed={}", gt.seed);
    write_atomic(path, text.as_bytes())
}

/// The report and, when recorded, the generating seed.
pub fn read_report(path: &Path) -> Result<(IdentifiabilityReport, Option<u64>)> {
    let text = read_text(path)?;
    let corrupt = |reason: String| TcmfError::CorruptData {
        path: path.to_path_buf(),
        reason,
    };
    let pairs = parse_key_values(&text).map_err(corrupt)?;
    let get = |key: &str| -> Result<f64> {
        let v = pairs
            .iter()
            .find(|(k, _)| k == key)
            .ok_or_else(|| corrupt(format!("missing {key}")))?;
        v.1.parse().map_err(|_| corrupt(format!("bad {key}")))
    };
    let seed = pairs
        .iter()
        .find(|(k, _)| k == "seed")
        .map(|(_, v)| v.parse().map_err(|_| corrupt("bad seed".into())))
        .transpose()?;
    Ok((
        IdentifiabilityReport {
            alpha: get("alpha")?,
            mu: get("mu")?,
            theta: get("theta")?,
            sigma_max: get("sigma_max")?,
            sigma_min: get("sigma_min")?,
        },
        seed,
    ))
}

pub fn save_estimates(dir: &Path, est: &FactorEstimate, sparse: &SparseEstimate) -> Result<()> {
    create_dir(dir)?;
    write_matrix(&dir.join("est_U_g.mat"), &est.u_g)?;
    for i in 0..est.n_sources() {
        write_matrix(&source_file(dir, "est_V_g", i), &est.v_g[i])?;
        write_matrix(&source_file(dir, "est_U_l", i), &est.u_l[i])?;
        write_matrix(&source_file(dir, "est_V_l", i), &est.v_l[i])?;
        write_matrix(&source_file(dir, "est_S", i), &sparse.s[i])?;
    }
    Ok(())
}

pub fn load_estimates(dir: &Path, n_sources: usize) -> Result<(FactorEstimate, SparseEstimate)> {
    let u_g = read_matrix(&dir.join("est_U_g.mat"))?;
    let load = |stem: &str| -> Result<Vec<Matrix>> {
        (0..n_sources)
            .map(|i| read_matrix(&source_file(dir, stem, i)))
            .collect()
    };
    let est = FactorEstimate {
        u_g,
        v_g: load("est_V_g")?,
        u_l: load("est_U_l")?,
        v_l: load("est_V_l")?,
    };
    Ok((est, SparseEstimate::new(load("est_S")?)))
}
