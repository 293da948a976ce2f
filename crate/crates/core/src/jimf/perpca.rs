//! Personalized PCA: Stiefel-manifold gradient ascent on the captured variance
//! with a polar-projection retraction. Coefficients come last, as `M̂ᵀU`.

use rayon::prelude::*;

use super::{DivergenceGuard, FactorEstimate, Feasibility, JimfRequest, JimfTrace};
use crate::error::{Result, TcmfError};
use crate::numerics::{
    gram_deviation, hconcat, inv_sqrt_psd, max_abs, orthonormalize_against, qr_thin, Matrix,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PerpcaParams {
    pub step_size: f64,
    pub iterations: usize,
    pub divergence_window: usize,
}

impl Default for PerpcaParams {
    fn default() -> Self {
        PerpcaParams {
            step_size: 0.1,
            iterations: 500,
            divergence_window: 50,
        }
    }
}

impl PerpcaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(TcmfError::config(
                "PerPCA step size must be finite and nonnegative",
            ));
        }
        if self.divergence_window == 0 {
            return Err(TcmfError::config("divergence window must be positive"));
        }
        Ok(())
    }
}

const POWER_STEPS: usize = 20;

/// `GR(U, V) = (U+V)((U+V)ᵀ(U+V))^{-1/2}`.
pub fn generalized_retraction(u: &Matrix, v: &Matrix) -> Result<Matrix> {
    if u.shape() != v.shape() {
        return Err(TcmfError::dim("retraction operands differ in shape"));
    }
    let w = u + v;
    if w.ncols() == 0 {
        return Ok(w);
    }
    let gram = w.transpose() * &w;
    let inv = inv_sqrt_psd(&gram)
        .map_err(|_| TcmfError::singular("retraction of a rank-deficient matrix"))?;
    Ok(w * inv)
}

/// `(I − U_gU_gᵀ − U_lU_lᵀ) S [U_g, U_l]`.
pub fn perpca_gradient(u_g: &Matrix, u_l: &Matrix, s: &Matrix) -> Result<Matrix> {
    let w = hconcat(&[u_g.clone(), u_l.clone()])?;
    if s.shape() != (w.nrows(), w.nrows()) {
        return Err(TcmfError::dim("S must be n1 x n1"));
    }
    let sw = s * &w;
    let proj = &w * (w.transpose() * &sw);
    Ok(sw - proj)
}

/// Largest eigenvalue of a PSD matrix by power iteration.
fn power_estimate(s: &Matrix) -> f64 {
    let n = s.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = nalgebra::DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..POWER_STEPS {
        let w = s * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        est = v.dot(&(s * &v));
    }
    est
}

/// `½ Σ_i (tr S_i − tr U_gᵀS_iU_g − tr U_{l,i}ᵀS_iU_{l,i})`, the residual energy when
/// `[U_g, U_{l,i}]` is orthonormal.
fn residual_energy(u_g: &Matrix, u_l: &Matrix, s: &Matrix) -> f64 {
    let captured = |u: &Matrix| (u.transpose() * s * u).trace();
    0.5 * (s.trace() - captured(u_g) - captured(u_l))
}

fn cross(u_g: &Matrix, u_l: &Matrix) -> f64 {
    max_abs(&(u_g.transpose() * u_l))
}

pub fn perpca_solve(
    req: &JimfRequest,
    params: &PerpcaParams,
) -> Result<(FactorEstimate, JimfTrace)> {
    params.validate()?;
    let init = req.initial_estimate()?;
    let matrices = &req.matrices;
    let n = matrices.len();
    let r1 = req.r1;
    let eta = params.step_size;

    let mut u_g = if r1 > 0 {
        qr_thin(&init.u_g).0
    } else {
        init.u_g.clone()
    };
    if gram_deviation(&u_g) > 1e-8 {
        return Err(TcmfError::singular("initial U_g is rank deficient"));
    }
    let mut u_l = init.u_l;

    let grams: Vec<Matrix> = matrices.par_iter().map(|m| m * m.transpose()).collect();
    let scale = grams.iter().map(power_estimate).fold(0.0, f64::max);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let s: Vec<Matrix> = grams.into_iter().map(|g| g / scale).collect();

    let mut trace = JimfTrace::default();
    let mut guard = DivergenceGuard::new(params.divergence_window);

    for _ in 0..params.iterations {
        let ug = &u_g;
        let steps: Vec<(Matrix, Matrix, f64, Feasibility)> = (0..n)
            .into_par_iter()
            .map(|i| -> Result<_> {
                let ul = &u_l[i];
                let corrected = if ul.ncols() > 0 {
                    let disp = -(ug * (ug.transpose() * ul));
                    generalized_retraction(ul, &disp)?
                } else {
                    ul.clone()
                };
                let feas = Feasibility {
                    gram_g: gram_deviation(ug),
                    gram_l: gram_deviation(&corrected),
                    cross: cross(ug, &corrected),
                };
                let energy = residual_energy(ug, &corrected, &s[i]);
                let g = perpca_gradient(ug, &corrected, &s[i])?;
                let u_ig = ug + g.columns(0, r1) * eta;
                let next_l = if corrected.ncols() > 0 {
                    let step = g.columns(r1, corrected.ncols()) * eta;
                    generalized_retraction(&corrected, &step)?
                } else {
                    corrected
                };
                Ok((u_ig, next_l, energy, feas))
            })
            .collect::<Result<_>>()
            .map_err(|e| with_trace(e, &trace))?;

        let mut sum = Matrix::zeros(u_g.nrows(), r1);
        let mut energy = 0.0;
        let mut feas = Feasibility::default();
        for (i, (u_ig, next_l, e, f)) in steps.into_iter().enumerate() {
            sum += u_ig;
            energy += e;
            feas.gram_g = feas.gram_g.max(f.gram_g);
            feas.gram_l = feas.gram_l.max(f.gram_l);
            feas.cross = feas.cross.max(f.cross);
            u_l[i] = next_l;
        }
        if r1 > 0 {
            let mean = sum / n as f64;
            let disp = mean - &u_g;
            u_g = generalized_retraction(&u_g, &disp).map_err(|e| with_trace(e, &trace))?;
        }

        let objective = energy * scale;
        trace.objective.push(objective);
        trace.feasibility.push(feas);
        guard.observe(objective, &trace)?;
    }

    // exact deflation against U_g, then coefficients
    let finished: Vec<(Matrix, Matrix, Matrix, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ul = orthonormalize_against(&u_l[i], &u_g);
            let mt = matrices[i].transpose();
            let energy = residual_energy(&u_g, &ul, &s[i]);
            (&mt * &u_g, &mt * &ul, ul, energy)
        })
        .collect();
    let mut est = FactorEstimate {
        u_g,
        v_g: Vec::with_capacity(n),
        u_l: Vec::with_capacity(n),
        v_l: Vec::with_capacity(n),
    };
    let mut energy = 0.0;
    for (vg, vl, ul, e) in finished {
        est.v_g.push(vg);
        est.v_l.push(vl);
        est.u_l.push(ul);
        energy += e;
    }
    trace.objective.push(energy * scale);
    trace.feasibility.push(est.feasibility());
    Ok((est, trace))
}

fn with_trace(err: TcmfError, trace: &JimfTrace) -> TcmfError {
    match err {
        TcmfError::Singularity(reason) => TcmfError::Divergence {
            reason: format!("singular retraction: {reason}"),
            objective: trace.objective.clone(),
        },
        other => other,
    }
}
