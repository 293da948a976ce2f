//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::{parse_key_values, read_text};
use crate::altmin::{TcmfConfig, WarmStartPolicy};
use crate::error::{Result, TcmfError};
use crate::jimf::{Backend, HmfParams, PerpcaParams};
use crate::model::SynthConfig;
use crate::thresholding::{LambdaMode, LambdaSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Hmf,
    PerPca,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_sources: usize,
    pub n1: usize,
    pub n2: usize,
    pub r1: usize,
    pub r2: usize,
    pub noise_prob: f64,
    pub noise_magnitude: f64,
    pub seed: u64,
    pub lambda1_mode: LambdaMode,
    pub rho: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub backend: BackendKind,
    pub step_size: f64,
    pub inner_iterations: usize,
    pub beta: f64,
    pub warm_start: WarmStartPolicy,
}

const REQUIRED: [&str; 15] = [
    "n_sources",
    "n1",
    "n2",
    "r1",
    "r2",
    "noise_prob",
    "noise_magnitude",
    "seed",
    "lambda1_mode",
    "rho",
    "epsilon",
    "epochs",
    "backend",
    "step_size",
    "inner_iterations",
];
const OPTIONAL: [&str; 2] = ["beta", "warm_start"];

fn value<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = &map[key];
    raw.parse()
        .map_err(|_| TcmfError::config(format!("{key}: cannot parse {raw:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_key_values(text).map_err(TcmfError::Config)?;
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            if !REQUIRED.contains(&k.as_str()) && !OPTIONAL.contains(&k.as_str()) {
                return Err(TcmfError::config(format!("unknown key {k:?}")));
            }
            if map.insert(k.clone(), v).is_some() {
                return Err(TcmfError::config(format!("duplicate key {k:?}")));
            }
        }
        let missing: Vec<&str> = REQUIRED
            .iter()
            .copied()
            .filter(|k| !map.contains_key(*k))
            .collect();
        if !missing.is_empty() {
            return Err(TcmfError::config(format!(
                "missing keys: {}",
                missing.join(", ")
            )));
        }

        let lambda1_mode = match map["lambda1_mode"].as_str() {
            "theoretical" => LambdaMode::Theoretical,
            "data_driven" => LambdaMode::DataDriven,
            other => {
                return Err(TcmfError::config(format!(
                    "lambda1_mode: unknown {other:?}"
                )))
            }
        };
        let backend = match map["backend"].as_str() {
            "hmf" => BackendKind::Hmf,
            "perpca" => BackendKind::PerPca,
            other => return Err(TcmfError::config(format!("backend: unknown {other:?}"))),
        };
        let warm_start = match map.get("warm_start").map(String::as_str) {
            None | Some("carry_forward") => WarmStartPolicy::CarryForward,
            Some("fresh_spectral") => WarmStartPolicy::FreshSpectral,
            Some(other) => return Err(TcmfError::config(format!("warm_start: unknown {other:?}"))),
        };
        let beta = match map.get("beta") {
            Some(_) => value(&map, "beta")?,
            None => HmfParams::default().beta,
        };
        let cfg = RunConfig {
            n_sources: value(&map, "n_sources")?,
            n1: value(&map, "n1")?,
            n2: value(&map, "n2")?,
            r1: value(&map, "r1")?,
            r2: value(&map, "r2")?,
            noise_prob: value(&map, "noise_prob")?,
            noise_magnitude: value(&map, "noise_magnitude")?,
            seed: value(&map, "seed")?,
            lambda1_mode,
            rho: value(&map, "rho")?,
            epsilon: value(&map, "epsilon")?,
            epochs: value(&map, "epochs")?,
            backend,
            step_size: value(&map, "step_size")?,
            inner_iterations: value(&map, "inner_iterations")?,
            beta,
            warm_start,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate().map_err(|e| match e {
            TcmfError::Dimension(msg) => TcmfError::Config(msg),
            other => other,
        })?;
        if self.epochs == 0 {
            return Err(TcmfError::config("epochs must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(TcmfError::config("step_size must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(TcmfError::config("beta must be nonnegative"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(TcmfError::config("rho must lie in (0, 1)"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(TcmfError::config("epsilon must be nonnegative"));
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_sources: self.n_sources,
            n1: self.n1,
            n2: self.n2,
            r1: self.r1,
            r2: self.r2,
            noise_prob: self.noise_prob,
            noise_magnitude: self.noise_magnitude,
            seed: self.seed,
        }
    }

    pub fn backend(&self) -> Backend {
        match self.backend {
            BackendKind::Hmf => Backend::Hmf(HmfParams {
                step_size: self.step_size,
                iterations: self.inner_iterations,
                beta: self.beta,
                ..HmfParams::default()
            }),
            BackendKind::PerPca => Backend::PerPca(PerpcaParams {
                step_size: self.step_size,
                iterations: self.inner_iterations,
                ..PerpcaParams::default()
            }),
        }
    }

    pub fn tcmf_config(&self, lambda_1: f64) -> Result<TcmfConfig> {
        Ok(TcmfConfig {
            schedule: LambdaSchedule::new(lambda_1, self.rho, self.epsilon)?,
            epochs: self.epochs,
            backend: self.backend(),
            warm_start: self.warm_start,
        })
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n_sources={}", self.n_sources)?;
        writeln!(f, "n1={}", self.n1)?;
        writeln!(f, "n2={}", self.n2)?;
        writeln!(f, "r1={}", self.r1)?;
        writeln!(f, "r2={}", self.r2)?;
        writeln!(f, "noise_prob={}", self.noise_prob)?;
        writeln!(f, "noise_magnitude={}", self.noise_magnitude)?;
        writeln!(f, "seed={}", self.seed)?;
        let mode = match self.lambda1_mode {
            LambdaMode::Theoretical => "theoretical",
            LambdaMode::DataDriven => "data_driven",
        };
        writeln!(f, "lambda1_mode={mode}")?;
        writeln!(f, "rho={}", self.rho)?;
        writeln!(f, "epsilon={}", self.epsilon)?;
        writeln!(f, "epochs={}", self.epochs)?;
        let backend = match self.backend {
            BackendKind::Hmf => "hmf",
            BackendKind::PerPca => "perpca",
        };
        writeln!(f, "backend={backend}")?;
        writeln!(f, "step_size={}", self.step_size)?;
        writeln!(f, "inner_iterations={}", self.inner_iterations)?;
        writeln!(f, "beta={}", self.beta)?;
        let ws = match self.warm_start {
            WarmStartPolicy::CarryForward => "carry_forward",
            WarmStartPolicy::FreshSpectral => "fresh_spectral",
        };
        writeln!(f, "warm_start={ws}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# desk-scale run
n_sources = 10
n1=15
n2=100
r1=3
r2=3
noise_prob=0.01
noise_magnitude=100
seed=7
lambda1_mode=theoretical
rho=0.9
epsilon=1e-3
epochs=20
backend=hmf
step_size=5e-3
inner_iterations=300
";

    #[test]
    fn parses_sample_with_defaults() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.n_sources, 10);
        assert_eq!(c.seed, 7);
        assert_eq!(c.lambda1_mode, LambdaMode::Theoretical);
        assert_eq!(c.beta, 1e-5);
        assert_eq!(c.warm_start, WarmStartPolicy::CarryForward);
        assert_eq!(c.backend, BackendKind::Hmf);
    }

    #[test]
    fn display_round_trips() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(RunConfig::parse(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            format!("{SAMPLE}colour=blue\n"),
            SAMPLE.replace("epochs=20\n", ""),
            format!("{SAMPLE}seed=8\n"),
            SAMPLE.replace("backend=hmf", "backend=jive"),
            SAMPLE.replace("rho=0.9", "rho=1.5"),
            SAMPLE.replace("n1=15", "n1=fifteen"),
            SAMPLE.replace("r1=3", "r1=60"),
            format!("{SAMPLE}just some words\n"),
        ];
        for text in &cases {
            assert!(
                matches!(RunConfig::parse(text), Err(TcmfError::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn backend_params_follow_kind() {
        let c = RunConfig::parse(&SAMPLE.replace("backend=hmf", "backend=perpca")).unwrap();
        match c.backend() {
            Backend::PerPca(p) => assert_eq!((p.step_size, p.iterations), (5e-3, 300)),
            other => panic!("{other:?}"),
        }
    }
}
