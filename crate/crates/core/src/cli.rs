//! Command-line driver behind the `tcmf` binary.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::altmin::{run, TcmfOutput};
use crate::error::{Result, TcmfError};
use crate::io::config::RunConfig;
use crate::io::dataset::{
    load_estimates, load_ground_truth, load_observations, observation_files, save_estimates,
    write_synth_dataset,
};
use crate::io::trace::write_trace;
use crate::io::write_atomic;
use crate::metrics::{recovery_errors, support_violations};
use crate::model::{assemble_observations, generate, identifiability_report, GroundTruth};
use crate::thresholding::initial_lambda;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_CONFIG: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_MISSING: i32 = 66;
pub const EXIT_IO: i32 = 74;

#[derive(Debug, Parser)]
#[command(
    name = "tcmf",
    version,
    about = "Triple component matrix factorization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the alternating solver and write the epoch trace as CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; when absent, data is synthesized from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trace CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the final estimates to this directory.
        #[arg(long)]
        save_estimates: Option<PathBuf>,
        /// Leave the wall_ms column empty so reruns are byte-identical.
        #[arg(long)]
        omit_timing: bool,
    },
    /// Print the identifiability report of a synthesized dataset.
    Check {
        #[arg(long)]
        data: PathBuf,
    },
    /// Recompute recovery errors from saved estimates.
    Metrics {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        estimates: PathBuf,
        /// Write the key=value report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Process exit code for an error.
pub fn exit_code(err: &TcmfError) -> i32 {
    match err.root() {
        TcmfError::Divergence { .. } => EXIT_DIVERGED,
        TcmfError::Config(_) => EXIT_CONFIG,
        TcmfError::Dimension(_)
        | TcmfError::CorruptData { .. }
        | TcmfError::Singularity(_)
        | TcmfError::ContractViolation(_) => EXIT_DATA,
        TcmfError::MissingInput(_) => EXIT_MISSING,
        TcmfError::Io { .. } | TcmfError::Epoch { .. } => EXIT_IO,
    }
}

/// Sizes the global rayon pool from `TCMF_THREADS` (unset or 0 means automatic).
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("TCMF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| TcmfError::config(format!("TCMF_THREADS: cannot parse {raw:?}")))?;
    // a second call in the same process finds the pool already built
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Runs a parsed command, reporting errors on stderr, and returns the exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth { config, out, seed } => synth(&config, &out, seed),
        Command::Run {
            config,
            data,
            out,
            seed,
            save_estimates,
            omit_timing,
        } => run_cmd(
            &config,
            data.as_deref(),
            &out,
            seed,
            save_estimates.as_deref(),
            omit_timing,
        ),
        Command::Check { data } => check(&data),
        Command::Metrics {
            data,
            estimates,
            out,
        } => metrics(&data, &estimates, out.as_deref()),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("tcmf: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).map_err(|e| match e {
        TcmfError::CorruptData { .. } => TcmfError::Config(e.to_string()),
        other => other,
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let gt = generate(&cfg.synth_config())?;
    let report = identifiability_report(&gt)?;
    write_synth_dataset(out, &gt, &report)?;
    println!("wrote {} sources to {}", gt.n_sources(), out.display());
    Ok(())
}

fn run_cmd(
    config: &Path,
    data: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    estimates_dir: Option<&Path>,
    omit_timing: bool,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let (obs, gt) = match data {
        Some(dir) => {
            let obs = load_observations(dir, cfg.r1, cfg.r2)?;
            let gt = load_ground_truth(dir, obs.n_sources())?;
            (obs, gt)
        }
        None => {
            let gt = generate(&cfg.synth_config())?;
            (assemble_observations(&gt), Some(gt))
        }
    };
    let report = gt.as_ref().map(identifiability_report).transpose()?;
    let lambda_1 = initial_lambda(&obs, cfg.lambda1_mode, report.as_ref())?;
    let tcmf_cfg = cfg.tcmf_config(lambda_1)?;

    match run(&obs, &tcmf_cfg, gt.as_ref()) {
        Ok(TcmfOutput {
            factors,
            sparse,
            trace,
        }) => {
            write_trace(out, &trace, omit_timing)?;
            if let Some(dir) = estimates_dir {
                save_estimates(dir, &factors, &sparse)?;
            }
            if let Some(last) = trace.last() {
                let shown =
                    |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
                println!(
                    "{} epochs, final lambda {:.4e}, log_g {}, log_l {}, log_s {}",
                    trace.len(),
                    last.lambda,
                    shown(last.log_g),
                    shown(last.log_l),
                    shown(last.log_s)
                );
            }
            Ok(())
        }
        Err(e) => {
            if let TcmfError::Epoch { partial, .. } = &e {
                write_trace(out, partial, omit_timing)?;
            }
            Err(e)
        }
    }
}

fn require_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let n = observation_files(dir)?.len();
    load_ground_truth(dir, n)?
        .ok_or_else(|| TcmfError::MissingInput(format!("no ground truth in {}", dir.display())))
}

fn check(data: &Path) -> Result<()> {
    let gt = require_ground_truth(data)?;
    load_observations(data, gt.r1(), gt.r2())?;
    let report = identifiability_report(&gt)?;
    let r = gt.r1() + gt.r2();
    println!("n_sources={}", gt.n_sources());
    println!("r1={}", gt.r1());
    println!("r2={}", gt.r2());
    println!("alpha={}", report.alpha);
    println!("mu={}", report.mu);
    println!("theta={}", report.theta);
    println!("sigma_max={}", report.sigma_max);
    println!("sigma_min={}", report.sigma_min);
    println!(
        "budget_ratio={}",
        report.sparsity_budget_ratio(r, gt.n_sources())
    );
    Ok(())
}

fn metrics(data: &Path, estimates: &Path, out: Option<&Path>) -> Result<()> {
    let gt = require_ground_truth(data)?;
    let (est, sparse) = load_estimates(estimates, gt.n_sources())?;
    let e = recovery_errors(&est, &sparse, &gt)?;
    let text = format!(
        "linf_g={}\nlinf_l={}\nlinf_s={}\nlog_g={}\nlog_l={}\nlog_s={}\nsupport_violations={}\n",
        e.linf_g,
        e.linf_l,
        e.linf_s,
        e.log_g,
        e.log_l,
        e.log_s,
        support_violations(&sparse.s, &gt.s)
    );
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| TcmfError::io("<stdout>", e)),
    }
}
