//! Synthetic ground truth for the three-component model and the
//! identifiability diagnostics (sparsity, incoherence, misalignment).
//!
//! Each source `i` is generated as
//! `M_i = U_g V_{g,i}^T + U_{l,i} V_{l,i}^T + S_i` with `U_g^T U_{l,i} = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Result, TcmfError};
use crate::numerics::{
    deflate, gram_deviation, max_eigenvalue_sym, projection_onto, qr_thin, truncated_svd, Matrix,
};

/// The `N` observed matrices together with the rank targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub matrices: Vec<Matrix>,
    pub r1: usize,
    pub r2: usize,
}

impl ObservationSet {
    pub fn new(matrices: Vec<Matrix>, r1: usize, r2: usize) -> Result<Self> {
        let obs = ObservationSet { matrices, r1, r2 };
        obs.validate()?;
        Ok(obs)
    }

    pub fn n_sources(&self) -> usize {
        self.matrices.len()
    }

    pub fn n1(&self) -> usize {
        self.matrices.first().map_or(0, |m| m.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.matrices.first() else {
            return Err(TcmfError::dim("observation set is empty"));
        };
        let n1 = first.nrows();
        for (i, m) in self.matrices.iter().enumerate() {
            if m.nrows() != n1 {
                return Err(TcmfError::dim(format!(
                    "source {i} has {} rows, expected {n1}",
                    m.nrows()
                )));
            }
            if self.r1 + self.r2 > n1.min(m.ncols()) {
                return Err(TcmfError::dim(format!(
                    "ranks r1+r2={} exceed min dimension of source {i} ({}x{})",
                    self.r1 + self.r2,
                    n1,
                    m.ncols()
                )));
            }
            if !crate::numerics::all_finite(m) {
                return Err(TcmfError::dim(format!("source {i} has non-finite entries")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_sources: usize,
    pub n1: usize,
    pub n2: usize,
    pub r1: usize,
    pub r2: usize,
    /// Probability that an entry of `S_i` is nonzero.
    pub noise_prob: f64,
    /// Nonzero noise entries are `±noise_magnitude` with equal probability.
    pub noise_magnitude: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sources == 0 || self.n1 == 0 || self.n2 == 0 {
            return Err(TcmfError::dim("n_sources, n1 and n2 must be positive"));
        }
        if self.r1 + self.r2 > self.n1.min(self.n2) {
            return Err(TcmfError::dim(format!(
                "r1+r2={} exceeds min(n1, n2)={}",
                self.r1 + self.r2,
                self.n1.min(self.n2)
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(TcmfError::config("noise_prob must lie in [0, 1]"));
        }
        if !(self.noise_magnitude > 0.0 && self.noise_magnitude.is_finite()) {
            return Err(TcmfError::config("noise_magnitude must be positive"));
        }
        Ok(())
    }
}

/// Generating factors for every source.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub u_g: Matrix,
    pub v_g: Vec<Matrix>,
    pub u_l: Vec<Matrix>,
    pub v_l: Vec<Matrix>,
    pub s: Vec<Matrix>,
    pub seed: u64,
}

impl GroundTruth {
    pub fn n_sources(&self) -> usize {
        self.v_g.len()
    }

    pub fn r1(&self) -> usize {
        self.u_g.ncols()
    }

    pub fn r2(&self) -> usize {
        self.u_l.first().map_or(0, |u| u.ncols())
    }

    pub fn global_part(&self, i: usize) -> Matrix {
        &self.u_g * self.v_g[i].transpose()
    }

    pub fn local_part(&self, i: usize) -> Matrix {
        &self.u_l[i] * self.v_l[i].transpose()
    }

    pub fn low_rank(&self, i: usize) -> Matrix {
        self.global_part(i) + self.local_part(i)
    }

    /// Checks shapes across sources; used when a ground truth is read from disk.
    pub fn validate(&self) -> Result<()> {
        let n = self.v_g.len();
        if n == 0 || self.u_l.len() != n || self.v_l.len() != n || self.s.len() != n {
            return Err(TcmfError::dim(
                "ground truth: per-source lists differ in length",
            ));
        }
        let n1 = self.u_g.nrows();
        let r1 = self.u_g.ncols();
        for i in 0..n {
            let n2 = self.s[i].ncols();
            let r2 = self.u_l[i].ncols();
            let ok = self.s[i].nrows() == n1
                && self.v_g[i].shape() == (n2, r1)
                && self.u_l[i].nrows() == n1
                && self.v_l[i].shape() == (n2, r2);
            if !ok {
                return Err(TcmfError::dim(format!(
                    "ground truth: source {i} shape mismatch"
                )));
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Draws a ground truth from the Gaussian ensemble.
///
/// Feature matrices are Gaussian then QR-orthonormalized; local features are
/// deflated against `U_g` before orthonormalization. Coefficients stay Gaussian.
pub fn generate(cfg: &SynthConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (u_g, _) = qr_thin(&gaussian(&mut rng, cfg.n1, cfg.r1));

    let n = cfg.n_sources;
    let mut v_g = Vec::with_capacity(n);
    let mut u_l = Vec::with_capacity(n);
    let mut v_l = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for _ in 0..n {
        v_g.push(gaussian(&mut rng, cfg.n2, cfg.r1));

        let raw = gaussian(&mut rng, cfg.n1, cfg.r2);
        let (q, _) = qr_thin(&deflate(&raw, &u_g));
        // second pass removes the round-off left by the first deflation
        let (q, _) = qr_thin(&deflate(&q, &u_g));
        u_l.push(q);

        v_l.push(gaussian(&mut rng, cfg.n2, cfg.r2));

        let mut noise = Matrix::zeros(cfg.n1, cfg.n2);
        for r in 0..cfg.n1 {
            for c in 0..cfg.n2 {
                if rng.random_bool(cfg.noise_prob) {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    noise[(r, c)] = sign * cfg.noise_magnitude;
                }
            }
        }
        s.push(noise);
    }
    Ok(GroundTruth {
        u_g,
        v_g,
        u_l,
        v_l,
        s,
        seed: cfg.seed,
    })
}

pub fn assemble_observations(gt: &GroundTruth) -> ObservationSet {
    let matrices = (0..gt.n_sources())
        .map(|i| gt.low_rank(i) + &gt.s[i])
        .collect();
    ObservationSet {
        matrices,
        r1: gt.r1(),
        r2: gt.r2(),
    }
}

/// Smallest `alpha` for which `s` is alpha-sparse (exact-zero test).
pub fn measure_sparsity(s: &Matrix) -> f64 {
    measure_sparsity_with_tol(s, 0.0)
}

/// Like [`measure_sparsity`], counting an entry as nonzero iff `|x| > tol`.
pub fn measure_sparsity_with_tol(s: &Matrix, tol: f64) -> f64 {
    let (n1, n2) = s.shape();
    if n1 == 0 || n2 == 0 {
        return 0.0;
    }
    let mut row_counts = vec![0usize; n1];
    let mut col_counts = vec![0usize; n2];
    for c in 0..n2 {
        for r in 0..n1 {
            if s[(r, c)].abs() > tol {
                row_counts[r] += 1;
                col_counts[c] += 1;
            }
        }
    }
    let max_row = row_counts.into_iter().max().unwrap_or(0) as f64 / n2 as f64;
    let max_col = col_counts.into_iter().max().unwrap_or(0) as f64 / n1 as f64;
    max_row.max(max_col)
}

/// Incoherence `max_i ‖e_iᵀU‖₂ · √n / √r` of an orthonormal `n×r` matrix.
pub fn measure_incoherence(u: &Matrix) -> Result<f64> {
    let (n, r) = u.shape();
    if r == 0 {
        return Ok(0.0);
    }
    let dev = gram_deviation(u);
    if dev > 1e-8 {
        return Err(TcmfError::ContractViolation(format!(
            "measure_incoherence: columns not orthonormal (‖UᵀU−I‖∞={dev:e})"
        )));
    }
    let max_row = u.row_iter().map(|row| row.norm()).fold(0.0_f64, f64::max);
    Ok(max_row * (n as f64).sqrt() / (r as f64).sqrt())
}

/// Misalignment `1 − λ_max(mean_i P_{U_i})` of the local feature matrices.
pub fn measure_misalignment(u_l: &[Matrix]) -> Result<f64> {
    let Some(first) = u_l.first() else {
        return Err(TcmfError::dim("measure_misalignment: no matrices"));
    };
    let n1 = first.nrows();
    let mut avg = Matrix::zeros(n1, n1);
    for u in u_l {
        if u.nrows() != n1 {
            return Err(TcmfError::dim("measure_misalignment: row counts differ"));
        }
        avg += projection_onto(u)?;
    }
    avg /= u_l.len() as f64;
    Ok((1.0 - max_eigenvalue_sym(&avg)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentifiabilityReport {
    pub alpha: f64,
    pub mu: f64,
    pub theta: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
}

impl IdentifiabilityReport {
    /// `α · μ⁴ r² N² / θ²`: how far the noise sparsity sits from the
    /// `θ²/(μ⁴r²N²)` budget, up to the unknown constant. Infinite when `θ = 0`.
    pub fn sparsity_budget_ratio(&self, r: usize, n_sources: usize) -> f64 {
        if self.alpha == 0.0 {
            return 0.0;
        }
        let budget = self.theta.powi(2)
            / (self.mu.powi(4) * (r as f64).powi(2) * (n_sources as f64).powi(2));
        self.alpha / budget
    }
}

struct SourceStats {
    alpha: f64,
    mu: f64,
    sigmas: Vec<f64>,
}

fn component_stats(component: &Matrix, rank: usize) -> Result<(f64, Vec<f64>)> {
    if rank == 0 {
        return Ok((0.0, Vec::new()));
    }
    let svd = truncated_svd(component, rank)?;
    let mu = measure_incoherence(&svd.u)?.max(measure_incoherence(&svd.v)?);
    Ok((mu, svd.sigma))
}

pub fn identifiability_report(gt: &GroundTruth) -> Result<IdentifiabilityReport> {
    gt.validate()?;
    let r1 = gt.r1();
    let per_source: Vec<SourceStats> = (0..gt.n_sources())
        .into_par_iter()
        .map(|i| -> Result<SourceStats> {
            let (mu_g, mut sigmas) = component_stats(&gt.global_part(i), r1)?;
            let (mu_l, sig_l) = component_stats(&gt.local_part(i), gt.u_l[i].ncols())?;
            sigmas.extend(sig_l);
            Ok(SourceStats {
                alpha: measure_sparsity(&gt.s[i]),
                mu: mu_g.max(mu_l),
                sigmas,
            })
        })
        .collect::<Result<_>>()?;

    let mut alpha = 0.0_f64;
    let mut mu = 0.0_f64;
    let mut sigma_max = 0.0_f64;
    let mut sigma_min = f64::INFINITY;
    for st in &per_source {
        alpha = alpha.max(st.alpha);
        mu = mu.max(st.mu);
        for &s in &st.sigmas {
            sigma_max = sigma_max.max(s);
        }
    }
    let floor = 1e-12 * sigma_max.max(f64::MIN_POSITIVE);
    for st in &per_source {
        for &s in st.sigmas.iter().filter(|&&s| s > floor) {
            sigma_min = sigma_min.min(s);
        }
    }
    if !sigma_min.is_finite() {
        sigma_min = 0.0;
    }
    let theta = if gt.r2() == 0 {
        1.0
    } else {
        measure_misalignment(&gt.u_l)?
    };
    Ok(IdentifiabilityReport {
        alpha,
        mu,
        theta,
        sigma_max,
        sigma_min,
    })
}
