//! Hard thresholding and the decaying threshold schedule.

use crate::error::{Result, TcmfError};
use crate::model::{IdentifiabilityReport, ObservationSet};
use crate::numerics::{max_abs, Matrix};

/// `λ_{t+1} = ρ λ_t + ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub lambda_1: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl LambdaSchedule {
    pub fn new(lambda_1: f64, rho: f64, epsilon: f64) -> Result<Self> {
        let s = LambdaSchedule {
            lambda_1,
            rho,
            epsilon,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_1 > 0.0 && self.lambda_1.is_finite()) {
            return Err(TcmfError::config(format!(
                "lambda_1 must be positive and finite, got {}",
                self.lambda_1
            )));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(TcmfError::config(format!(
                "rho must lie in (0, 1), got {}",
                self.rho
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(TcmfError::config("epsilon must be nonnegative"));
        }
        if self.rho >= 1.0 - self.epsilon / self.lambda_1 {
            return Err(TcmfError::config(format!(
                "rho={} must stay below 1 - epsilon/lambda_1 = {}",
                self.rho,
                1.0 - self.epsilon / self.lambda_1
            )));
        }
        Ok(())
    }

    /// Limit `ε/(1−ρ)` of the recurrence.
    pub fn fixed_point(&self) -> f64 {
        self.epsilon / (1.0 - self.rho)
    }

    /// `λ_1, λ_2, ..., λ_epochs`.
    pub fn values(&self, epochs: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(epochs);
        let mut lam = self.lambda_1;
        for _ in 0..epochs {
            out.push(lam);
            lam = next_lambda(self, lam);
        }
        out
    }
}

/// Keeps entries with `|x| > λ`; entries in `[−λ, λ]` become zero.
pub fn hard_threshold(x: &Matrix, lambda: f64) -> Matrix {
    x.map(|v| if v.abs() > lambda { v } else { 0.0 })
}

pub fn next_lambda(schedule: &LambdaSchedule, lambda_t: f64) -> f64 {
    schedule.rho * lambda_t + schedule.epsilon
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaMode {
    /// `σ_max μ² r / √(n1 n2)` from an identifiability report.
    Theoretical,
    /// `max_i ‖M_i‖∞`.
    DataDriven,
}

pub fn initial_lambda(
    obs: &ObservationSet,
    mode: LambdaMode,
    report: Option<&IdentifiabilityReport>,
) -> Result<f64> {
    let lambda = match mode {
        LambdaMode::Theoretical => {
            let rep = report.ok_or_else(|| {
                TcmfError::config("theoretical lambda_1 requires an identifiability report")
            })?;
            let n1 = obs.n1() as f64;
            // mean column count; sources share n2 in the theory
            let n2 = obs.matrices.iter().map(|m| m.ncols() as f64).sum::<f64>()
                / obs.n_sources().max(1) as f64;
            let r = (obs.r1 + obs.r2) as f64;
            rep.sigma_max * rep.mu * rep.mu * r / (n1 * n2).sqrt()
        }
        LambdaMode::DataDriven => obs.matrices.iter().map(max_abs).fold(0.0, f64::max),
    };
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(TcmfError::config(format!(
            "initial lambda must be positive, got {lambda}"
        )));
    }
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundary_entries_are_zeroed() {
        let x = Matrix::from_row_slice(2, 2, &[0.5, -2.0, 1.0, 3.0]);
        let y = hard_threshold(&x, 1.0);
        assert_eq!(y, Matrix::from_row_slice(2, 2, &[0.0, -2.0, 0.0, 3.0]));
        let neg = Matrix::from_row_slice(1, 2, &[-1.0, -1.0000001]);
        assert_eq!(
            hard_threshold(&neg, 1.0),
            Matrix::from_row_slice(1, 2, &[0.0, -1.0000001])
        );
    }

    #[test]
    fn zero_lambda_keeps_everything() {
        let x = Matrix::from_row_slice(2, 3, &[0.0, 1e-300, -4.0, 0.0, 2.0, -0.0]);
        assert_eq!(hard_threshold(&x, 0.0), x);
    }

    #[test]
    fn lambda_at_sup_norm_kills_all() {
        let x = Matrix::from_row_slice(2, 2, &[0.3, -7.5, 2.0, 7.5]);
        assert_eq!(hard_threshold(&x, max_abs(&x)), Matrix::zeros(2, 2));
    }

    #[test]
    fn schedule_arithmetic() {
        let s = LambdaSchedule::new(1.0, 0.5, 0.1).unwrap();
        assert!((next_lambda(&s, 1.0) - 0.6).abs() < 1e-15);
        let s = LambdaSchedule::new(1.0, 0.9, 0.0).unwrap();
        assert_eq!(next_lambda(&s, 1.0), 0.9);
        let s = LambdaSchedule::new(2.0, 0.7, 0.03).unwrap();
        let fp = s.fixed_point();
        assert!((next_lambda(&s, fp) - fp).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(LambdaSchedule::new(1.0, 1.0, 0.0).is_err());
        assert!(LambdaSchedule::new(1.0, 0.0, 0.0).is_err());
        assert!(LambdaSchedule::new(0.0, 0.5, 0.0).is_err());
        // rho must stay below 1 - eps/lambda_1 = 0.5
        assert!(LambdaSchedule::new(1.0, 0.6, 0.5).is_err());
    }

    fn obs(m: Matrix) -> ObservationSet {
        ObservationSet {
            matrices: vec![m],
            r1: 3,
            r2: 3,
        }
    }

    #[test]
    fn theoretical_lambda() {
        let o = obs(Matrix::zeros(15, 1000));
        let rep = IdentifiabilityReport {
            alpha: 0.0,
            mu: 1.0,
            theta: 0.5,
            sigma_max: 10.0,
            sigma_min: 1.0,
        };
        let lam = initial_lambda(&o, LambdaMode::Theoretical, Some(&rep)).unwrap();
        assert!((lam - 60.0 / 15000f64.sqrt()).abs() < 1e-12);
        assert!((lam - 0.4899).abs() < 1e-4);
        assert!(matches!(
            initial_lambda(&o, LambdaMode::Theoretical, None),
            Err(TcmfError::Config(_))
        ));
    }

    #[test]
    fn data_driven_lambda() {
        assert!(matches!(
            initial_lambda(&obs(Matrix::zeros(6, 6)), LambdaMode::DataDriven, None),
            Err(TcmfError::Config(_))
        ));
        let mut m = Matrix::zeros(6, 6);
        m[(2, 3)] = -100.0;
        m[(1, 1)] = 4.0;
        assert_eq!(
            initial_lambda(&obs(m), LambdaMode::DataDriven, None).unwrap(),
            100.0
        );
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            prop::collection::vec(-10.0f64..10.0, r * c)
                .prop_map(move |v| Matrix::from_vec(r, c, v))
        })
    }

    proptest! {
        #[test]
        fn threshold_is_idempotent(x in matrix_strategy(), lam in 0.0f64..10.0) {
            let once = hard_threshold(&x, lam);
            prop_assert_eq!(hard_threshold(&once, lam), once);
        }

        #[test]
        fn support_shrinks_with_lambda(x in matrix_strategy(), a in 0.0f64..10.0, b in 0.0f64..10.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let small = hard_threshold(&x, lo);
            let big = hard_threshold(&x, hi);
            for (s, g) in small.iter().zip(big.iter()) {
                prop_assert!(*g == 0.0 || *s != 0.0);
            }
        }

        #[test]
        fn residual_bounded_by_lambda(x in matrix_strategy(), lam in 0.0f64..10.0) {
            prop_assert!(max_abs(&(&x - hard_threshold(&x, lam))) <= lam);
        }

        #[test]
        fn schedule_decreases_to_fixed_point(rho in 0.05f64..0.95, eps in 0.0f64..0.1) {
            let lam1 = 1.0;
            prop_assume!(rho < 1.0 - eps / lam1 && lam1 > eps / (1.0 - rho));
            let s = LambdaSchedule::new(lam1, rho, eps).unwrap();
            let vals = s.values(60);
            for w in vals.windows(2) {
                prop_assert!(w[1] <= w[0]);
                prop_assert!(w[1] >= s.fixed_point() - 1e-12);
            }
        }
    }
}
