//! Heterogeneous matrix factorization: gradient descent on the regularized
//! objective, with an orthogonality correction of `U_{l,i}` before every step.

use nalgebra::SymmetricEigen;
use rayon::prelude::*;

use super::{DivergenceGuard, FactorEstimate, JimfRequest, JimfTrace};
use crate::error::{Result, TcmfError};
use crate::numerics::{frob_sq, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct HmfParams {
    pub step_size: f64,
    pub iterations: usize,
    pub beta: f64,
    pub divergence_window: usize,
    /// Stop once the objective moves less than 1e-12 for 20 iterations.
    pub early_stop: bool,
}

impl Default for HmfParams {
    fn default() -> Self {
        HmfParams {
            step_size: 5e-3,
            iterations: 500,
            beta: 1e-5,
            divergence_window: 50,
            early_stop: false,
        }
    }
}

impl HmfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(TcmfError::config(
                "HMF step size must be finite and nonnegative",
            ));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(TcmfError::config("HMF beta must be finite and nonnegative"));
        }
        if self.divergence_window == 0 {
            return Err(TcmfError::config("divergence window must be positive"));
        }
        Ok(())
    }
}

const EARLY_STOP_TOL: f64 = 1e-12;
const EARLY_STOP_RUN: usize = 20;

fn identity_dev_sq(u: &Matrix) -> f64 {
    let mut g = u.transpose() * u;
    for k in 0..g.nrows() {
        g[(k, k)] -= 1.0;
    }
    frob_sq(&g)
}

fn source_objective(
    u_g: &Matrix,
    v_g: &Matrix,
    u_l: &Matrix,
    v_l: &Matrix,
    m: &Matrix,
    beta: f64,
) -> f64 {
    let e = u_g * v_g.transpose() + u_l * v_l.transpose() - m;
    0.5 * frob_sq(&e) + 0.5 * beta * (identity_dev_sq(u_g) + identity_dev_sq(u_l))
}

/// `Σ_i ½‖M̂_i − U_gV_{g,i}ᵀ − U_{l,i}V_{l,i}ᵀ‖² + β/2‖U_gᵀU_g − I‖² + β/2‖U_{l,i}ᵀU_{l,i} − I‖²`.
pub fn hmf_objective(est: &FactorEstimate, matrices: &[Matrix], beta: f64) -> Result<f64> {
    est.check_shapes(matrices)?;
    Ok(matrices
        .iter()
        .enumerate()
        .map(|(i, m)| source_objective(&est.u_g, &est.v_g[i], &est.u_l[i], &est.v_l[i], m, beta))
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmfGradients {
    pub u_g: Matrix,
    pub v_g: Matrix,
    pub u_l: Matrix,
    pub v_l: Matrix,
}

fn gradients(
    u_g: &Matrix,
    v_g: &Matrix,
    u_l: &Matrix,
    v_l: &Matrix,
    e: &Matrix,
    beta: f64,
) -> HmfGradients {
    let reg = |u: &Matrix| {
        let mut g = u.transpose() * u;
        for k in 0..g.nrows() {
            g[(k, k)] -= 1.0;
        }
        u * g * (2.0 * beta)
    };
    let et = e.transpose();
    HmfGradients {
        u_g: e * v_g + reg(u_g),
        v_g: &et * u_g,
        u_l: e * v_l + reg(u_l),
        v_l: &et * u_l,
    }
}

/// Gradients of source `i`'s share of [`hmf_objective`].
pub fn hmf_gradients(
    est: &FactorEstimate,
    source_index: usize,
    matrix: &Matrix,
    beta: f64,
) -> Result<HmfGradients> {
    let i = source_index;
    if i >= est.n_sources() {
        return Err(TcmfError::dim(format!("source index {i} out of range")));
    }
    if matrix.shape() != (est.u_g.nrows(), est.v_g[i].nrows())
        || est.v_l[i].nrows() != matrix.ncols()
    {
        return Err(TcmfError::dim("matrix shape does not match factors"));
    }
    let e = est.reconstruction(i) - matrix;
    Ok(gradients(
        &est.u_g,
        &est.v_g[i],
        &est.u_l[i],
        &est.v_l[i],
        &e,
        beta,
    ))
}

/// `(U_gᵀU_g)⁻¹`, or a singularity error when `U_g` is rank deficient.
fn gram_inverse(u_g: &Matrix) -> Result<Matrix> {
    let g = u_g.transpose() * u_g;
    if g.nrows() == 0 {
        return Ok(g);
    }
    let eig = SymmetricEigen::new(crate::numerics::symmetrize(&g));
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(TcmfError::singular("U_g is rank deficient"));
    }
    let inv = eig.eigenvalues.map(|l| 1.0 / l);
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&inv) * eig.eigenvectors.transpose())
}

/// Removes the `U_g` component of `u_l` and moves it into `v_g`.
fn correct_in_place(
    u_g: &Matrix,
    g_inv: &Matrix,
    u_l: &mut Matrix,
    v_g: &mut Matrix,
    v_l: &Matrix,
) {
    if u_g.ncols() == 0 || u_l.ncols() == 0 {
        return;
    }
    let coef = g_inv * (u_g.transpose() * &*u_l);
    *u_l -= u_g * &coef;
    *v_g += v_l * coef.transpose();
}

/// Orthogonality correction of source `i`; the reconstruction is unchanged.
pub fn hmf_correct(est: &FactorEstimate, source_index: usize) -> Result<FactorEstimate> {
    let i = source_index;
    if i >= est.n_sources() {
        return Err(TcmfError::dim(format!("source index {i} out of range")));
    }
    let g_inv = gram_inverse(&est.u_g)?;
    let mut out = est.clone();
    correct_in_place(
        &est.u_g,
        &g_inv,
        &mut out.u_l[i],
        &mut out.v_g[i],
        &est.v_l[i],
    );
    Ok(out)
}

fn correct_all(est: &mut FactorEstimate) -> Result<()> {
    let g_inv = gram_inverse(&est.u_g)?;
    let u_g = &est.u_g;
    est.u_l
        .par_iter_mut()
        .zip(est.v_g.par_iter_mut())
        .zip(est.v_l.par_iter())
        .for_each(|((u_l, v_g), v_l)| correct_in_place(u_g, &g_inv, u_l, v_g, v_l));
    Ok(())
}

pub fn hmf_solve(req: &JimfRequest, params: &HmfParams) -> Result<(FactorEstimate, JimfTrace)> {
    params.validate()?;
    let mut est = req.initial_estimate()?;
    let matrices = &req.matrices;
    let n = matrices.len();
    let eta = params.step_size;
    let beta = params.beta;
    let mut trace = JimfTrace::default();
    let mut guard = DivergenceGuard::new(params.divergence_window);
    let mut flat_run = 0usize;

    for _ in 0..params.iterations {
        let g_inv = gram_inverse(&est.u_g)?;
        let u_g = est.u_g.clone();
        let steps: Vec<(Matrix, Matrix, Matrix, Matrix, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let m = &matrices[i];
                let mut u_l = est.u_l[i].clone();
                let mut v_g = est.v_g[i].clone();
                let mut v_l = est.v_l[i].clone();
                correct_in_place(&u_g, &g_inv, &mut u_l, &mut v_g, &v_l);
                let e = &u_g * v_g.transpose() + &u_l * v_l.transpose() - m;
                let obj = 0.5 * frob_sq(&e)
                    + 0.5 * beta * (identity_dev_sq(&u_g) + identity_dev_sq(&u_l));
                let grad = gradients(&u_g, &v_g, &u_l, &v_l, &e, beta);
                let u_ig = &u_g - grad.u_g * eta;
                v_g -= grad.v_g * eta;
                u_l -= grad.u_l * eta;
                v_l -= grad.v_l * eta;
                (u_ig, v_g, u_l, v_l, obj)
            })
            .collect();

        let mut sum_ug = Matrix::zeros(u_g.nrows(), u_g.ncols());
        let mut objective = 0.0;
        for (i, (u_ig, v_g, u_l, v_l, obj)) in steps.into_iter().enumerate() {
            sum_ug += u_ig;
            objective += obj;
            est.v_g[i] = v_g;
            est.u_l[i] = u_l;
            est.v_l[i] = v_l;
        }
        est.u_g = sum_ug / n as f64;

        let prev = trace.objective.last().copied();
        trace.objective.push(objective);
        guard.observe(objective, &trace)?;
        if params.early_stop {
            match prev {
                Some(p) if (objective - p).abs() < EARLY_STOP_TOL => flat_run += 1,
                _ => flat_run = 0,
            }
            if flat_run >= EARLY_STOP_RUN {
                break;
            }
        }
    }

    correct_all(&mut est)?;
    let final_obj = hmf_objective(&est, matrices, beta)?;
    trace.objective.push(final_obj);
    if !final_obj.is_finite() {
        return Err(TcmfError::Divergence {
            reason: "objective is not finite".into(),
            objective: trace.objective,
        });
    }
    trace.feasibility.push(est.feasibility());
    Ok((est, trace))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{solve_traced, spectral_init, Backend};
    use super::*;
    use crate::numerics::{max_abs, qr_thin};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_single(
        rng: &mut ChaCha8Rng,
        n1: usize,
        n2: usize,
        r1: usize,
        r2: usize,
    ) -> (FactorEstimate, Matrix) {
        let est = FactorEstimate {
            u_g: random(rng, n1, r1),
            v_g: vec![random(rng, n2, r1)],
            u_l: vec![random(rng, n1, r2)],
            v_l: vec![random(rng, n2, r2)],
        };
        (est, random(rng, n1, n2))
    }

    /// Central differences of the single-source objective, one block at a time.
    fn finite_difference(est: &FactorEstimate, m: &Matrix, beta: f64, h: f64) -> HmfGradients {
        let ms = std::slice::from_ref(m);
        let fd_block = |pick: &dyn Fn(&mut FactorEstimate) -> &mut Matrix| {
            let mut probe = est.clone();
            let (r, c) = pick(&mut probe).shape();
            Matrix::from_fn(r, c, |a, b| {
                let mut plus = est.clone();
                pick(&mut plus)[(a, b)] += h;
                let mut minus = est.clone();
                pick(&mut minus)[(a, b)] -= h;
                (hmf_objective(&plus, ms, beta).unwrap() - hmf_objective(&minus, ms, beta).unwrap())
                    / (2.0 * h)
            })
        };
        HmfGradients {
            u_g: fd_block(&|e| &mut e.u_g),
            v_g: fd_block(&|e| &mut e.v_g[0]),
            u_l: fd_block(&|e| &mut e.u_l[0]),
            v_l: fd_block(&|e| &mut e.v_l[0]),
        }
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        max_abs(&(a - b)) / max_abs(b).max(1e-8)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n1, n2, r1, r2) in &[(6, 8, 1, 1), (7, 5, 2, 1), (9, 12, 2, 3)] {
            for _ in 0..5 {
                let (est, m) = random_single(&mut rng, n1, n2, r1, r2);
                let beta = 0.3;
                let g = hmf_gradients(&est, 0, &m, beta).unwrap();
                let fd = finite_difference(&est, &m, beta, 1e-5);
                for (a, b) in [
                    (&g.u_g, &fd.u_g),
                    (&g.v_g, &fd.v_g),
                    (&g.u_l, &fd.u_l),
                    (&g.v_l, &fd.v_l),
                ] {
                    assert!(rel_err(a, b) < 1e-4, "{}", rel_err(a, b));
                }
            }
        }
    }

    #[test]
    fn gradients_vanish_at_optimum() {
        let (gt, ms) = tiny_noiseless(1);
        let est = truth_estimate(&gt);
        for (i, m) in ms.iter().enumerate() {
            let g = hmf_gradients(&est, i, m, 1e-5).unwrap();
            for b in [&g.u_g, &g.v_g, &g.u_l, &g.v_l] {
                assert!(max_abs(b) < 1e-10);
            }
        }
    }

    #[test]
    fn beta_zero_gradient_is_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (est, m) = random_single(&mut rng, 5, 4, 2, 1);
        let g = hmf_gradients(&est, 0, &m, 0.0).unwrap();
        let e = est.reconstruction(0) - &m;
        assert_eq!(g.u_g, &e * &est.v_g[0]);
    }

    #[test]
    fn objective_examples() {
        let (gt, ms) = tiny_noiseless(2);
        assert!(hmf_objective(&truth_estimate(&gt), &ms, 1e-5).unwrap() < 1e-20);

        let beta = 0.2;
        let zeros = FactorEstimate::zeros(10, &[20, 20, 20], 2, 2);
        let expected = 0.5 * ms.iter().map(frob_sq).sum::<f64>() + 0.5 * beta * 3.0 * 4.0;
        assert!((hmf_objective(&zeros, &ms, beta).unwrap() - expected).abs() < 1e-9);

        let mut scaled = truth_estimate(&gt);
        let c: f64 = 1.3;
        scaled.u_g *= c;
        for v in &mut scaled.v_g {
            *v /= c;
        }
        let extra = 0.5 * beta * 3.0 * 2.0 * (c * c - 1.0).powi(2);
        assert!((hmf_objective(&scaled, &ms, beta).unwrap() - extra).abs() < 1e-9);
    }

    #[test]
    fn correction_examples() {
        let (gt, _) = tiny_noiseless(3);
        let truth = truth_estimate(&gt);
        let same = hmf_correct(&truth, 1).unwrap();
        assert!(max_abs(&(&same.u_l[1] - &truth.u_l[1])) < 1e-14);
        assert!(max_abs(&(&same.v_g[1] - &truth.v_g[1])) < 1e-14);

        let mut aligned = truth.clone();
        aligned.u_l[0] = aligned.u_g.clone();
        let out = hmf_correct(&aligned, 0).unwrap();
        assert!(max_abs(&out.u_l[0]) < 1e-12);

        let mut singular = truth.clone();
        singular.u_g.fill(0.0);
        assert!(matches!(
            hmf_correct(&singular, 0),
            Err(TcmfError::Singularity(_))
        ));
    }

    #[test]
    fn correction_preserves_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(n1, r1, r2) in &[(5, 1, 1), (8, 2, 3), (12, 4, 2)] {
            let (est, _) = random_single(&mut rng, n1, 7, r1, r2);
            let out = hmf_correct(&est, 0).unwrap();
            assert!(max_abs(&(out.reconstruction(0) - est.reconstruction(0))) < 1e-10);
            assert!(max_abs(&(out.u_g.transpose() * &out.u_l[0])) < 1e-10);
            assert_eq!(out.v_l, est.v_l);
        }
    }

    fn request(ms: Vec<Matrix>, params: HmfParams) -> (JimfRequest, HmfParams) {
        (
            JimfRequest {
                matrices: ms,
                r1: 2,
                r2: 2,
                epsilon: 1e-3,
                backend: Backend::Hmf(params.clone()),
                warm_start: None,
            },
            params,
        )
    }

    #[test]
    fn converges_on_tiny_noiseless_instance() {
        let (gt, ms) = tiny_noiseless(5);
        // 2000 iterations leave weakly misaligned instances short of 1e-3
        let (req, _) = request(
            ms,
            HmfParams {
                step_size: 0.01,
                iterations: 10_000,
                ..HmfParams::default()
            },
        );
        let (est, trace) = solve_traced(&req).unwrap();
        for i in 0..3 {
            assert!(max_abs(&(est.reconstruction(i) - gt.low_rank(i))) <= 1e-3);
        }
        assert!(est.max_cross_term() < 1e-10);
        for w in trace.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn zero_iterations_returns_corrected_init() {
        let (_, ms) = tiny_noiseless(6);
        let init = spectral_init(&ms, 2, 2).unwrap();
        let (req, p) = request(
            ms,
            HmfParams {
                iterations: 0,
                ..HmfParams::default()
            },
        );
        let (est, trace) = hmf_solve(&req, &p).unwrap();
        assert_eq!(trace.objective.len(), 1);
        for i in 0..3 {
            assert!(max_abs(&(est.reconstruction(i) - init.reconstruction(i))) < 1e-12);
        }
    }

    #[test]
    fn zero_step_keeps_objective_constant() {
        let (_, ms) = tiny_noiseless(7);
        let (req, p) = request(
            ms,
            HmfParams {
                step_size: 0.0,
                iterations: 20,
                ..HmfParams::default()
            },
        );
        let (_, trace) = hmf_solve(&req, &p).unwrap();
        let first = trace.objective[0];
        for v in &trace.objective {
            assert!((v - first).abs() <= 1e-12 * first.max(1.0));
        }
    }

    #[test]
    fn huge_step_diverges_with_trace() {
        let (_, ms) = tiny_noiseless(8);
        let (req, p) = request(
            ms,
            HmfParams {
                step_size: 10.0,
                iterations: 500,
                ..HmfParams::default()
            },
        );
        match hmf_solve(&req, &p) {
            Err(TcmfError::Divergence { objective, .. }) => assert!(!objective.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn early_stop_shortens_converged_runs() {
        let (gt, ms) = tiny_noiseless(9);
        let mut warm = truth_estimate(&gt);
        let (q, _) = qr_thin(&warm.u_g);
        warm.u_g = q;
        let (mut req, _) = request(ms, HmfParams::default());
        req.warm_start = Some(warm);
        let p = HmfParams {
            iterations: 400,
            early_stop: true,
            ..HmfParams::default()
        };
        let (_, trace) = hmf_solve(&req, &p).unwrap();
        assert!(trace.objective.len() < 401);
    }
}
