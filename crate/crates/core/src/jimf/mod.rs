//! Joint and individual matrix factorization (JIMF).
//!
//! Given denoised matrices `M̂_i`, find a shared feature matrix `U_g`, per-source
//! local features `U_{l,i}` with `U_gᵀ U_{l,i} = 0`, and coefficients so that
//! `Σ_i ‖M̂_i − U_g V_{g,i}ᵀ − U_{l,i} V_{l,i}ᵀ‖_F²` is minimized.
//! Two backends are provided: [`hmf`] (regularized gradient descent with an
//! orthogonality correction) and [`perpca`] (Stiefel gradient ascent with a
//! polar retraction).

pub mod hmf;
pub mod perpca;

use rayon::prelude::*;

use crate::error::{Result, TcmfError};
use crate::numerics::{
    deflate, frob_sq, gram_deviation, hconcat, max_abs, orthonormalize_against, qr_thin,
    truncated_svd, Matrix,
};

pub use hmf::HmfParams;
pub use perpca::PerpcaParams;

/// Tolerance on `‖U_gᵀ U_{l,i}‖∞` for a feasible estimate.
pub const ORTHOGONALITY_TOL: f64 = 1e-8;

/// Factor estimates for every source.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorEstimate {
    pub u_g: Matrix,
    pub v_g: Vec<Matrix>,
    pub u_l: Vec<Matrix>,
    pub v_l: Vec<Matrix>,
}

impl FactorEstimate {
    /// All-zero factors with the right shapes.
    pub fn zeros(n1: usize, n2s: &[usize], r1: usize, r2: usize) -> Self {
        FactorEstimate {
            u_g: Matrix::zeros(n1, r1),
            v_g: n2s.iter().map(|&n2| Matrix::zeros(n2, r1)).collect(),
            u_l: n2s.iter().map(|_| Matrix::zeros(n1, r2)).collect(),
            v_l: n2s.iter().map(|&n2| Matrix::zeros(n2, r2)).collect(),
        }
    }

    pub fn n_sources(&self) -> usize {
        self.v_g.len()
    }

    pub fn r1(&self) -> usize {
        self.u_g.ncols()
    }

    pub fn global_part(&self, i: usize) -> Matrix {
        &self.u_g * self.v_g[i].transpose()
    }

    pub fn local_part(&self, i: usize) -> Matrix {
        &self.u_l[i] * self.v_l[i].transpose()
    }

    /// `L̂_i = U_g V_{g,i}ᵀ + U_{l,i} V_{l,i}ᵀ`.
    pub fn reconstruction(&self, i: usize) -> Matrix {
        self.global_part(i) + self.local_part(i)
    }

    pub fn reconstructions(&self) -> Vec<Matrix> {
        (0..self.n_sources())
            .into_par_iter()
            .map(|i| self.reconstruction(i))
            .collect()
    }

    /// `max_i ‖U_gᵀ U_{l,i}‖∞`.
    pub fn max_cross_term(&self) -> f64 {
        let ugt = self.u_g.transpose();
        self.u_l
            .iter()
            .map(|u| max_abs(&(&ugt * u)))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        let fin = |m: &Matrix| crate::numerics::all_finite(m);
        fin(&self.u_g)
            && self.v_g.iter().all(fin)
            && self.u_l.iter().all(fin)
            && self.v_l.iter().all(fin)
    }

    /// Checks the estimate against the matrices it is meant to factor.
    pub fn check_shapes(&self, matrices: &[Matrix]) -> Result<()> {
        let n = matrices.len();
        if self.v_g.len() != n || self.u_l.len() != n || self.v_l.len() != n {
            return Err(TcmfError::dim(format!(
                "estimate has {} sources, data has {n}",
                self.v_g.len()
            )));
        }
        let n1 = self.u_g.nrows();
        let r1 = self.u_g.ncols();
        for (i, m) in matrices.iter().enumerate() {
            let r2 = self.u_l[i].ncols();
            let ok = m.nrows() == n1
                && self.v_g[i].shape() == (m.ncols(), r1)
                && self.u_l[i].nrows() == n1
                && self.v_l[i].shape() == (m.ncols(), r2);
            if !ok {
                return Err(TcmfError::dim(format!(
                    "estimate/source {i} shape mismatch"
                )));
            }
        }
        Ok(())
    }

    /// Same products with orthonormal feature matrices: `U = QR`, `V ← V Rᵀ`.
    pub fn renormalized(&self) -> FactorEstimate {
        let (q_g, r_g) = qr_thin(&self.u_g);
        let mut u_l = Vec::with_capacity(self.n_sources());
        let mut v_l = Vec::with_capacity(self.n_sources());
        for (u, v) in self.u_l.iter().zip(&self.v_l) {
            let (q, r) = qr_thin(u);
            u_l.push(q);
            v_l.push(v * r.transpose());
        }
        FactorEstimate {
            u_g: q_g,
            v_g: self.v_g.iter().map(|v| v * r_g.transpose()).collect(),
            u_l,
            v_l,
        }
    }

    pub fn feasibility(&self) -> Feasibility {
        Feasibility {
            gram_g: gram_deviation(&self.u_g),
            gram_l: self.u_l.iter().map(gram_deviation).fold(0.0, f64::max),
            cross: self.max_cross_term(),
        }
    }
}

/// Constraint violations of an iterate, all in the entrywise ∞-norm.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Feasibility {
    /// `‖U_gᵀU_g − I‖∞`
    pub gram_g: f64,
    /// `max_i ‖U_{l,i}ᵀU_{l,i} − I‖∞`
    pub gram_l: f64,
    /// `max_i ‖U_gᵀU_{l,i}‖∞`
    pub cross: f64,
}

/// Per-iteration record of a backend run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JimfTrace {
    /// Objective at each feasible iterate, ending with the returned estimate.
    pub objective: Vec<f64>,
    /// Constraint violations at each feasible iterate.
    pub feasibility: Vec<Feasibility>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Hmf(HmfParams),
    PerPca(PerpcaParams),
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Hmf(_) => "hmf",
            Backend::PerPca(_) => "perpca",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JimfRequest {
    /// The denoised matrices `M̂_i = M_i − Ŝ_i`.
    pub matrices: Vec<Matrix>,
    pub r1: usize,
    pub r2: usize,
    pub epsilon: f64,
    pub backend: Backend,
    pub warm_start: Option<FactorEstimate>,
}

impl JimfRequest {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(TcmfError::config("JIMF epsilon must be nonnegative"));
        }
        let Some(first) = self.matrices.first() else {
            return Err(TcmfError::dim("JIMF request has no matrices"));
        };
        let n1 = first.nrows();
        for (i, m) in self.matrices.iter().enumerate() {
            if m.nrows() != n1 {
                return Err(TcmfError::dim(format!("source {i} row count differs")));
            }
            if self.r1 + self.r2 > n1.min(m.ncols()) {
                return Err(TcmfError::dim(format!(
                    "r1+r2={} too large for source {i}",
                    self.r1 + self.r2
                )));
            }
        }
        if let Some(ws) = &self.warm_start {
            ws.check_shapes(&self.matrices)?;
            if ws.r1() != self.r1 || ws.u_l.iter().any(|u| u.ncols() != self.r2) {
                return Err(TcmfError::dim("warm start ranks differ from request"));
            }
        }
        Ok(())
    }

    /// Warm start if supplied, spectral initialization otherwise.
    pub(crate) fn initial_estimate(&self) -> Result<FactorEstimate> {
        match &self.warm_start {
            Some(ws) => Ok(ws.clone()),
            None => spectral_init(&self.matrices, self.r1, self.r2),
        }
    }
}

/// Spectral initialization.
///
/// `U_g` holds the top-`r1` left singular vectors of `[M_1, ..., M_N]`; each
/// `U_{l,i}` the top-`r2` left singular vectors of `M_i − U_g U_gᵀ M_i`;
/// coefficients are `V_{g,i} = M_iᵀ U_g` and `V_{l,i} = M_iᵀ U_{l,i}`.
pub fn spectral_init(matrices: &[Matrix], r1: usize, r2: usize) -> Result<FactorEstimate> {
    if matrices.is_empty() {
        return Err(TcmfError::dim("spectral_init: no matrices"));
    }
    if matrices.iter().all(|m| max_abs(m) == 0.0) {
        return Err(TcmfError::singular("spectral_init: all matrices are zero"));
    }
    let n1 = matrices[0].nrows();
    let u_g = if r1 > 0 {
        let concat = hconcat(matrices)?;
        let svd = truncated_svd(&concat, r1)?;
        if svd.sigma[r1 - 1] <= 1e-12 {
            return Err(TcmfError::singular(format!(
                "spectral_init: concatenation has rank below r1={r1}"
            )));
        }
        svd.u
    } else {
        Matrix::zeros(n1, 0)
    };

    let locals: Vec<(Matrix, Matrix, Matrix)> = matrices
        .par_iter()
        .map(|m| -> Result<_> {
            let u_l = if r2 > 0 {
                let deflated = deflate(m, &u_g);
                let svd = truncated_svd(&deflated, r2)?;
                orthonormalize_against(&svd.u, &u_g)
            } else {
                Matrix::zeros(n1, 0)
            };
            let mt = m.transpose();
            Ok((&mt * &u_g, &mt * &u_l, u_l))
        })
        .collect::<Result<_>>()?;

    let mut v_g = Vec::with_capacity(matrices.len());
    let mut v_l = Vec::with_capacity(matrices.len());
    let mut u_l = Vec::with_capacity(matrices.len());
    for (vg, vl, ul) in locals {
        v_g.push(vg);
        v_l.push(vl);
        u_l.push(ul);
    }
    Ok(FactorEstimate { u_g, v_g, u_l, v_l })
}

/// Runs the requested backend.
pub fn solve(req: &JimfRequest) -> Result<FactorEstimate> {
    solve_traced(req).map(|(est, _)| est)
}

pub fn solve_traced(req: &JimfRequest) -> Result<(FactorEstimate, JimfTrace)> {
    req.validate()?;
    let (est, trace) = match &req.backend {
        Backend::Hmf(p) => hmf::hmf_solve(req, p)?,
        Backend::PerPca(p) => perpca::perpca_solve(req, p)?,
    };
    if !est.is_finite() {
        return Err(TcmfError::Divergence {
            reason: "non-finite factors".into(),
            objective: trace.objective,
        });
    }
    Ok((est, trace))
}

/// Product-level closeness to `reference` within `epsilon` for every source,
/// plus the orthogonality constraint on the candidate.
pub fn check_epsilon_optimality(
    candidate: &FactorEstimate,
    reference: &FactorEstimate,
    epsilon: f64,
) -> bool {
    if candidate.n_sources() != reference.n_sources() {
        return false;
    }
    if candidate.max_cross_term() > ORTHOGONALITY_TOL {
        return false;
    }
    (0..candidate.n_sources()).all(|i| {
        let a = candidate.reconstruction(i);
        let b = reference.reconstruction(i);
        a.shape() == b.shape() && max_abs(&(a - b)) <= epsilon
    })
}

/// Stationarity residuals of the JIMF subproblem, in Frobenius norm, plus the
/// constraint violation in ∞-norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidualReport {
    /// `‖Σ_i E_i V_{g,i}‖_F`
    pub r_vg: f64,
    /// `max_i ‖E_i V_{l,i}‖_F`
    pub r_vl: f64,
    /// `max_i ‖E_iᵀ U_g‖_F`
    pub r_ug: f64,
    /// `max_i ‖E_iᵀ U_{l,i}‖_F`
    pub r_ul: f64,
    /// Largest violation of `UᵀU = I` or `U_gᵀU_{l,i} = 0`.
    pub r_orth: f64,
}

impl KktResidualReport {
    pub fn max(&self) -> f64 {
        [self.r_vg, self.r_vl, self.r_ug, self.r_ul, self.r_orth]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Residuals with `E_i = L̂_i − M̂_i`, evaluated after a QR renormalization
/// of the feature matrices (products are unchanged by it).
pub fn kkt_residuals(est: &FactorEstimate, matrices: &[Matrix]) -> Result<KktResidualReport> {
    est.check_shapes(matrices)?;
    let est = est.renormalized();
    let per_source: Vec<(Matrix, f64, f64, f64)> = matrices
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let e = est.reconstruction(i) - m;
            let evg = &e * &est.v_g[i];
            let r_vl = frob_sq(&(&e * &est.v_l[i])).sqrt();
            let et = e.transpose();
            let r_ul = frob_sq(&(&et * &est.u_l[i])).sqrt();
            let r_ug = frob_sq(&(&et * &est.u_g)).sqrt();
            (evg, r_vl, r_ul, r_ug)
        })
        .collect();

    let mut sum_evg = Matrix::zeros(est.u_g.nrows(), est.r1());
    let (mut r_vl, mut r_ul, mut r_ug) = (0.0_f64, 0.0_f64, 0.0_f64);
    for (evg, vl, ul, ug) in per_source {
        sum_evg += evg;
        r_vl = r_vl.max(vl);
        r_ul = r_ul.max(ul);
        r_ug = r_ug.max(ug);
    }
    let f = est.feasibility();
    Ok(KktResidualReport {
        r_vg: frob_sq(&sum_evg).sqrt(),
        r_vl,
        r_ug,
        r_ul,
        r_orth: f.gram_g.max(f.gram_l).max(f.cross),
    })
}

/// Flags a run whose objective rises for `window` consecutive iterations or
/// stops being finite.
pub(crate) struct DivergenceGuard {
    window: usize,
    rising: usize,
    last: Option<f64>,
}

impl DivergenceGuard {
    pub(crate) fn new(window: usize) -> Self {
        DivergenceGuard {
            window: window.max(1),
            rising: 0,
            last: None,
        }
    }

    pub(crate) fn observe(&mut self, value: f64, trace: &JimfTrace) -> Result<()> {
        if !value.is_finite() {
            return Err(TcmfError::Divergence {
                reason: "objective is not finite".into(),
                objective: trace.objective.clone(),
            });
        }
        if let Some(prev) = self.last {
            if value > prev {
                self.rising += 1;
            } else {
                self.rising = 0;
            }
        }
        self.last = Some(value);
        if self.rising >= self.window {
            return Err(TcmfError::Divergence {
                reason: format!(
                    "objective increased for {} consecutive iterations",
                    self.rising
                ),
                objective: trace.objective.clone(),
            });
        }
        Ok(())
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn spectral_init_single_source_matches_svd() {
        let (_, ms) = tiny_noiseless(1);
        let m = ms[0].clone();
        let est = spectral_init(std::slice::from_ref(&m), 3, 0).unwrap();
        let svd = truncated_svd(&m, 3).unwrap();
        assert!(max_abs(&(&est.u_g - &svd.u)) < 1e-12);
        assert_eq!(est.u_l[0].ncols(), 0);
        assert!(max_abs(&(&est.v_g[0] - m.transpose() * &svd.u)) < 1e-12);
    }

    #[test]
    fn spectral_init_locals_are_orthogonal() {
        let (_, ms) = tiny_noiseless(2);
        let est = spectral_init(&ms, 2, 2).unwrap();
        assert!(est.max_cross_term() < 1e-8);
        assert!(est.feasibility().gram_l < 1e-10);
        assert!(est.feasibility().gram_g < 1e-10);
    }

    #[test]
    fn spectral_init_rejects_zero_data() {
        let zeros = vec![Matrix::zeros(5, 6); 2];
        assert!(matches!(
            spectral_init(&zeros, 1, 1),
            Err(TcmfError::Singularity(_))
        ));
    }

    #[test]
    fn epsilon_optimality_examples() {
        let (gt, _) = tiny_noiseless(3);
        let truth = truth_estimate(&gt);
        assert!(check_epsilon_optimality(&truth, &truth, 0.0));

        let mut perturbed = truth.clone();
        let eps = 1e-3;
        // shift one reconstruction entry by 2ε through V_l (keeps feasibility)
        let u = perturbed.u_l[1].column(0).clone_owned();
        let row = u.iamax();
        let bump = 2.0 * eps / u[row];
        perturbed.v_l[1][(4, 0)] += bump;
        assert!(!check_epsilon_optimality(&perturbed, &truth, eps));
        assert!(check_epsilon_optimality(
            &perturbed,
            &truth,
            2.0 * eps * 1.000001
        ));

        let mut flipped = truth.clone();
        flipped.u_g.neg_mut();
        for v in &mut flipped.v_g {
            v.neg_mut();
        }
        assert!(check_epsilon_optimality(&flipped, &truth, 1e-12));
    }

    #[test]
    fn epsilon_optimality_is_monotone() {
        let (gt, ms) = tiny_noiseless(4);
        let truth = truth_estimate(&gt);
        let init = spectral_init(&ms, 2, 2).unwrap();
        let gap = (0..3)
            .map(|i| max_abs(&(init.reconstruction(i) - truth.reconstruction(i))))
            .fold(0.0, f64::max);
        for eps in [gap * 0.5, gap, gap * 2.0] {
            if check_epsilon_optimality(&init, &truth, eps) {
                assert!(check_epsilon_optimality(&init, &truth, eps * 1.5));
            }
        }
        assert!(check_epsilon_optimality(&init, &truth, gap));
    }

    #[test]
    fn kkt_residuals_vanish_at_truth() {
        let (gt, ms) = tiny_noiseless(5);
        let rep = kkt_residuals(&truth_estimate(&gt), &ms).unwrap();
        assert!(rep.max() < 1e-8, "{rep:?}");
    }

    #[test]
    fn kkt_residuals_positive_at_random_point() {
        let (_, ms) = tiny_noiseless(6);
        let mut est = spectral_init(&ms, 2, 2).unwrap();
        est.u_g[(0, 0)] += 0.3;
        for v in &mut est.v_l {
            v[(0, 0)] += 1.0;
        }
        let rep = kkt_residuals(&est, &ms).unwrap();
        assert!(rep.r_vg > 0.0 && rep.r_vl > 0.0 && rep.r_ug > 0.0 && rep.r_ul > 0.0);
    }

    #[test]
    fn renormalization_keeps_products() {
        let (_, ms) = tiny_noiseless(7);
        let mut est = spectral_init(&ms, 2, 2).unwrap();
        est.u_g *= 1.7;
        est.u_l[0] *= 0.4;
        let re = est.renormalized();
        for i in 0..3 {
            assert!(max_abs(&(re.reconstruction(i) - est.reconstruction(i))) < 1e-12);
        }
        assert!(re.feasibility().gram_g < 1e-12);
    }

    #[test]
    fn request_validation() {
        let (_, ms) = tiny_noiseless(8);
        let req = JimfRequest {
            matrices: ms.clone(),
            r1: 2,
            r2: 2,
            epsilon: -1.0,
            backend: Backend::Hmf(HmfParams::default()),
            warm_start: None,
        };
        assert!(matches!(req.validate(), Err(TcmfError::Config(_))));
        let req = JimfRequest {
            epsilon: 1e-3,
            r1: 9,
            ..req
        };
        assert!(matches!(req.validate(), Err(TcmfError::Dimension(_))));
    }
}
