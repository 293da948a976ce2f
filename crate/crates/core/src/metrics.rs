//! Recovery errors against ground truth, PSNR, and the anomaly statistic.

use rayon::prelude::*;

use crate::altmin::SparseEstimate;
use crate::error::{Result, TcmfError};
use crate::jimf::FactorEstimate;
use crate::model::GroundTruth;
use crate::numerics::{frob_sq, max_abs, Matrix};

/// Floor for log errors, roughly the double-precision resolution.
pub const LOG_FLOOR: f64 = -16.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryErrors {
    pub linf_g: f64,
    pub linf_l: f64,
    pub linf_s: f64,
    pub log_g: f64,
    pub log_l: f64,
    pub log_s: f64,
}

pub fn clamped_log10(x: f64) -> f64 {
    if x > 0.0 {
        x.log10().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

/// ℓ∞ errors are means over sources of the entrywise max error. The g and l log
/// errors use the mean squared Frobenius error; the s log error uses the sum.
pub fn recovery_errors(
    est: &FactorEstimate,
    s_hat: &SparseEstimate,
    gt: &GroundTruth,
) -> Result<RecoveryErrors> {
    let n = gt.n_sources();
    if est.n_sources() != n || s_hat.s.len() != n {
        return Err(TcmfError::dim(
            "estimate and ground truth differ in source count",
        ));
    }
    for i in 0..n {
        if s_hat.s[i].shape() != gt.s[i].shape()
            || est.v_g[i].nrows() != gt.v_g[i].nrows()
            || est.u_g.nrows() != gt.u_g.nrows()
        {
            return Err(TcmfError::dim(format!("source {i} shape mismatch")));
        }
    }
    let per: Vec<[f64; 6]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dg = est.global_part(i) - gt.global_part(i);
            let dl = est.local_part(i) - gt.local_part(i);
            let ds = &s_hat.s[i] - &gt.s[i];
            [
                max_abs(&dg),
                max_abs(&dl),
                max_abs(&ds),
                frob_sq(&dg),
                frob_sq(&dl),
                frob_sq(&ds),
            ]
        })
        .collect();
    let mut acc = [0.0; 6];
    for row in &per {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let nf = n as f64;
    Ok(RecoveryErrors {
        linf_g: acc[0] / nf,
        linf_l: acc[1] / nf,
        linf_s: acc[2] / nf,
        log_g: clamped_log10(acc[3] / nf),
        log_l: clamped_log10(acc[4] / nf),
        log_s: clamped_log10(acc[5]),
    })
}

/// Entries where the estimate is nonzero but the truth is zero, over all sources.
pub fn support_violations(s_hat: &[Matrix], s_star: &[Matrix]) -> usize {
    s_hat
        .iter()
        .zip(s_star)
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .filter(|(x, y)| **x != 0.0 && **y == 0.0)
                .count()
        })
        .sum()
}

/// `10 log10(peak² / MSE)`; `+∞` when the matrices are identical.
pub fn psnr(reference: &Matrix, candidate: &Matrix, peak: f64) -> Result<f64> {
    if reference.shape() != candidate.shape() {
        return Err(TcmfError::dim("psnr operands differ in shape"));
    }
    if !(peak > 0.0) {
        return Err(TcmfError::config("psnr peak must be positive"));
    }
    let count = reference.len();
    if count == 0 {
        return Err(TcmfError::dim("psnr of empty matrices"));
    }
    let mse = frob_sq(&(reference - candidate)) / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// `‖S‖₁`, the entrywise absolute sum.
pub fn anomaly_statistic(s: &Matrix) -> f64 {
    s.iter().map(|v| v.abs()).sum()
}

/// Largest statistic among the first `in_control_count` frames.
pub fn anomaly_threshold(stats: &[f64], in_control_count: usize) -> Result<f64> {
    if in_control_count == 0 || in_control_count > stats.len() {
        return Err(TcmfError::config(format!(
            "in-control count {in_control_count} outside 1..={}",
            stats.len()
        )));
    }
    Ok(stats[..in_control_count]
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max))
}
