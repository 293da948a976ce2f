//! Triple component matrix factorization.
//!
//! Each observed matrix `M_i` (sharing its row space across sources) is split into
//! a shared low-rank part `U_g V_{g,i}ᵀ`, a source-specific low-rank part
//! `U_{l,i} V_{l,i}ᵀ` with `U_gᵀ U_{l,i} = 0`, and a sparse part `S_i`.
//! [`altmin::run`] alternates hard thresholding of the residual with a joint
//! factorization of the denoised matrices.

// `!(x > 0.0)` guards also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod altmin;
pub mod cli;
pub mod error;
pub mod io;
pub mod jimf;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod thresholding;

pub use altmin::{
    rpca_baseline, run, EpochTrace, SparseEstimate, TcmfConfig, TcmfOutput, WarmStartPolicy,
};
pub use error::{Result, TcmfError};
pub use jimf::{Backend, FactorEstimate, HmfParams, JimfRequest, PerpcaParams};
pub use model::{GroundTruth, IdentifiabilityReport, ObservationSet, SynthConfig};
pub use numerics::Matrix;
pub use thresholding::{LambdaMode, LambdaSchedule};
