//! The outer loop: hard-threshold the residual, factor the denoised matrices,
//! shrink the threshold, repeat.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Result, TcmfError};
use crate::jimf::{self, Backend, FactorEstimate, JimfRequest};
use crate::metrics::{recovery_errors, support_violations};
use crate::model::{GroundTruth, ObservationSet};
use crate::numerics::{low_rank_approx, Matrix};
use crate::thresholding::{hard_threshold, next_lambda, LambdaSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WarmStartPolicy {
    /// Each epoch starts from the previous epoch's factors.
    #[default]
    CarryForward,
    /// Each epoch starts from a spectral initialization.
    FreshSpectral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcmfConfig {
    pub schedule: LambdaSchedule,
    pub epochs: usize,
    pub backend: Backend,
    pub warm_start: WarmStartPolicy,
}

impl TcmfConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.epochs == 0 {
            return Err(TcmfError::config("epochs must be at least 1"));
        }
        match &self.backend {
            Backend::Hmf(p) => p.validate(),
            Backend::PerPca(p) => p.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseEstimate {
    pub s: Vec<Matrix>,
    pub support_sizes: Vec<usize>,
}

impl SparseEstimate {
    pub fn new(s: Vec<Matrix>) -> Self {
        let support_sizes = s
            .iter()
            .map(|m| m.iter().filter(|v| **v != 0.0).count())
            .collect();
        SparseEstimate { s, support_sizes }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub lambda: f64,
    pub linf_g: Option<f64>,
    pub linf_l: Option<f64>,
    pub linf_s: Option<f64>,
    pub log_g: Option<f64>,
    pub log_l: Option<f64>,
    pub log_s: Option<f64>,
    pub support_violations: Option<usize>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TcmfOutput {
    pub factors: FactorEstimate,
    pub sparse: SparseEstimate,
    pub trace: Vec<EpochTrace>,
}

fn check_ground_truth(obs: &ObservationSet, gt: &GroundTruth) -> Result<()> {
    if gt.n_sources() != obs.n_sources()
        || gt.r1() != obs.r1
        || gt.r2() != obs.r2
        || gt
            .s
            .iter()
            .zip(&obs.matrices)
            .any(|(s, m)| s.shape() != m.shape())
    {
        return Err(TcmfError::dim("ground truth does not match observations"));
    }
    Ok(())
}

pub fn run(obs: &ObservationSet, cfg: &TcmfConfig, gt: Option<&GroundTruth>) -> Result<TcmfOutput> {
    obs.validate()?;
    cfg.validate()?;
    if let Some(gt) = gt {
        check_ground_truth(obs, gt)?;
    }

    let mut low_rank: Vec<Matrix> = obs
        .matrices
        .iter()
        .map(|m| Matrix::zeros(m.nrows(), m.ncols()))
        .collect();
    let mut factors: Option<FactorEstimate> = None;
    let mut sparse = SparseEstimate::new(low_rank.clone());
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut lambda = cfg.schedule.lambda_1;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let s: Vec<Matrix> = obs
            .matrices
            .par_iter()
            .zip(low_rank.par_iter())
            .map(|(m, l)| hard_threshold(&(m - l), lambda))
            .collect();
        let denoised: Vec<Matrix> = obs.matrices.iter().zip(&s).map(|(m, s)| m - s).collect();
        let req = JimfRequest {
            matrices: denoised,
            r1: obs.r1,
            r2: obs.r2,
            epsilon: cfg.schedule.epsilon,
            backend: cfg.backend.clone(),
            warm_start: match cfg.warm_start {
                WarmStartPolicy::CarryForward => factors.take(),
                WarmStartPolicy::FreshSpectral => None,
            },
        };
        let est = jimf::solve(&req).map_err(|e| TcmfError::Epoch {
            epoch,
            source: Box::new(e),
            partial: trace.clone(),
        })?;
        low_rank = est.reconstructions();
        sparse = SparseEstimate::new(s);

        let mut row = EpochTrace {
            epoch,
            lambda,
            linf_g: None,
            linf_l: None,
            linf_s: None,
            log_g: None,
            log_l: None,
            log_s: None,
            support_violations: None,
            wall_ms: 0.0,
        };
        if let Some(gt) = gt {
            let e = recovery_errors(&est, &sparse, gt)?;
            row.linf_g = Some(e.linf_g);
            row.linf_l = Some(e.linf_l);
            row.linf_s = Some(e.linf_s);
            row.log_g = Some(e.log_g);
            row.log_l = Some(e.log_l);
            row.log_s = Some(e.log_s);
            row.support_violations = Some(support_violations(&sparse.s, &gt.s));
        }
        row.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        trace.push(row);
        factors = Some(est);
        lambda = next_lambda(&cfg.schedule, lambda);
    }

    Ok(TcmfOutput {
        factors: factors.expect("at least one epoch"),
        sparse,
        trace,
    })
}

/// Single-matrix robust PCA: alternate hard thresholding with a rank-`r`
/// truncated SVD. Returns `(L̂, Ŝ)`.
pub fn rpca_baseline(
    m: &Matrix,
    r: usize,
    schedule: &LambdaSchedule,
    epochs: usize,
) -> Result<(Matrix, Matrix)> {
    schedule.validate()?;
    if r > m.nrows().min(m.ncols()) {
        return Err(TcmfError::dim(format!(
            "rank {r} exceeds matrix dimensions"
        )));
    }
    let mut l = Matrix::zeros(m.nrows(), m.ncols());
    let mut s = l.clone();
    let mut lambda = schedule.lambda_1;
    for _ in 0..epochs {
        s = hard_threshold(&(m - &l), lambda);
        l = low_rank_approx(&(m - &s), r)?;
        lambda = next_lambda(schedule, lambda);
    }
    Ok((l, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jimf::{HmfParams, PerpcaParams};
    use crate::model::{assemble_observations, generate, SynthConfig};
    use crate::numerics::max_abs;
    use crate::thresholding::{initial_lambda, LambdaMode};

    fn tiny(noise_prob: f64, seed: u64) -> (GroundTruth, ObservationSet) {
        let gt = generate(&SynthConfig {
            n_sources: 3,
            n1: 10,
            n2: 20,
            r1: 2,
            r2: 2,
            noise_prob,
            noise_magnitude: 10.0,
            seed,
        })
        .unwrap();
        let obs = assemble_observations(&gt);
        (gt, obs)
    }

    fn cfg(lambda_1: f64, epochs: usize, backend: Backend) -> TcmfConfig {
        TcmfConfig {
            schedule: LambdaSchedule::new(lambda_1, 0.5, 1e-3).unwrap(),
            epochs,
            backend,
            warm_start: WarmStartPolicy::CarryForward,
        }
    }

    #[test]
    fn noiseless_first_epoch_has_empty_sparse_part() {
        let (gt, obs) = tiny(0.0, 1);
        let lam = initial_lambda(&obs, LambdaMode::DataDriven, None).unwrap();
        let backend = Backend::PerPca(PerpcaParams {
            iterations: 2000,
            ..Default::default()
        });
        let out = run(&obs, &cfg(lam, 1, backend), Some(&gt)).unwrap();
        assert!(out.sparse.support_sizes.iter().all(|&k| k == 0));
        for i in 0..3 {
            assert!(max_abs(&(out.factors.reconstruction(i) - gt.low_rank(i))) <= 1e-3);
        }
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace[0].linf_s, Some(0.0));
    }

    #[test]
    fn lambda_trace_follows_recurrence() {
        let (_, obs) = tiny(0.05, 2);
        let c = cfg(
            50.0,
            6,
            Backend::Hmf(HmfParams {
                iterations: 20,
                ..Default::default()
            }),
        );
        let out = run(&obs, &c, None).unwrap();
        let expected = c.schedule.values(6);
        for (row, lam) in out.trace.iter().zip(expected) {
            assert_eq!(row.lambda, lam);
            assert!(row.linf_s.is_none() && row.support_violations.is_none());
        }
    }

    #[test]
    fn divergence_reports_partial_trace() {
        let (_, obs) = tiny(0.05, 3);
        let c = cfg(
            50.0,
            3,
            Backend::Hmf(HmfParams {
                step_size: 50.0,
                iterations: 200,
                ..Default::default()
            }),
        );
        match run(&obs, &c, None) {
            Err(TcmfError::Epoch {
                epoch,
                partial,
                source,
            }) => {
                assert_eq!(epoch, 1);
                assert!(partial.is_empty());
                assert!(matches!(*source, TcmfError::Divergence { .. }));
            }
            other => panic!("expected epoch failure, got {other:?}"),
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let (gt, obs) = tiny(0.05, 4);
        let c = cfg(
            30.0,
            4,
            Backend::Hmf(HmfParams {
                iterations: 50,
                ..Default::default()
            }),
        );
        let a = run(&obs, &c, Some(&gt)).unwrap();
        let b = run(&obs, &c, Some(&gt)).unwrap();
        assert_eq!(a.factors, b.factors);
        let strip = |t: &[EpochTrace]| {
            t.iter()
                .map(|r| EpochTrace {
                    wall_ms: 0.0,
                    ..r.clone()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.trace), strip(&b.trace));
    }

    #[test]
    fn single_source_matches_rpca_baseline() {
        let (gt, _) = tiny(0.0, 5);
        let m = gt.global_part(0);
        let obs = ObservationSet::new(vec![m.clone()], 2, 0).unwrap();
        let schedule = LambdaSchedule::new(max_abs(&m), 0.5, 1e-3).unwrap();
        let c = TcmfConfig {
            schedule,
            epochs: 3,
            backend: Backend::PerPca(PerpcaParams {
                iterations: 200,
                ..Default::default()
            }),
            warm_start: WarmStartPolicy::CarryForward,
        };
        let out = run(&obs, &c, None).unwrap();
        let (l, _) = rpca_baseline(&m, 2, &schedule, 3).unwrap();
        assert!(max_abs(&(out.factors.reconstruction(0) - l)) <= 1e-4);
    }

    #[test]
    fn rpca_on_clean_low_rank_recovers_it() {
        let (gt, _) = tiny(0.0, 6);
        let m = gt.low_rank(0);
        let schedule = LambdaSchedule::new(max_abs(&m), 0.5, 0.0).unwrap();
        let (l, s) = rpca_baseline(&m, 4, &schedule, 10).unwrap();
        assert!(max_abs(&(l - &m)) < 1e-10);
        assert!(max_abs(&s) < 1e-10);
    }

    #[test]
    fn rpca_residual_decays_on_spiky_matrix() {
        let (gt, _) = tiny(0.0, 7);
        let mut m = gt.global_part(0).columns(0, 1).into_owned() * Matrix::from_element(1, 20, 1.0);
        for k in 0..10 {
            m[(k, 2 * k)] += if k % 2 == 0 { 100.0 } else { -100.0 };
        }
        let schedule = LambdaSchedule::new(max_abs(&m), 0.7, 0.0).unwrap();
        let mut first = None;
        let mut last = f64::INFINITY;
        for epochs in [2, 6, 12, 24] {
            let (l, s) = rpca_baseline(&m, 1, &schedule, epochs).unwrap();
            let resid = max_abs(&(&m - l - s));
            assert!(resid <= last + 1e-12);
            first.get_or_insert(resid);
            last = resid;
        }
        assert!(last < first.unwrap() * 1e-2);
    }

    #[test]
    fn config_validation() {
        let (_, obs) = tiny(0.0, 8);
        let mut c = cfg(1.0, 1, Backend::Hmf(HmfParams::default()));
        c.epochs = 0;
        assert!(matches!(run(&obs, &c, None), Err(TcmfError::Config(_))));
    }
}
