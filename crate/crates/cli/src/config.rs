//! Optional TOML run configuration. Flags override file values, which
//! override built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use warca::dataset::FeatureFormat;
use warca::eval::ProtocolConfig;
use warca::linear::AdamParams;
use warca::{Error, KernelSpec, Optimizer, RankWeighting, Regularizer, TrainConfig};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub protocol: ProtocolSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
            .context("reading config file")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Csv,
    Binary,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub format: Option<FormatArg>,
    pub l1_normalize: Option<bool>,
    pub skip_header: Option<bool>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct DataArgs {
    /// Feature file: CSV rows `label,f1,...,fD` or the binary container.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Input format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// L1-normalize every row after loading.
    #[arg(long)]
    pub l1_normalize: bool,
    /// Skip the first CSV line.
    #[arg(long)]
    pub skip_header: bool,
}

pub struct DataSpec {
    pub path: PathBuf,
    pub format: FeatureFormat,
    pub l1_normalize: bool,
    pub skip_header: bool,
}

impl DataArgs {
    pub fn resolve(&self, file: &DataSection) -> Result<DataSpec> {
        let path = self
            .data
            .clone()
            .or_else(|| file.path.clone())
            .ok_or_else(|| Error::Config("no input data: pass --data or set [data] path".into()))?;
        let format = match self.format.or(file.format) {
            Some(FormatArg::Csv) => FeatureFormat::Csv,
            Some(FormatArg::Binary) => FeatureFormat::Binary,
            None => FeatureFormat::from_path(&path),
        };
        Ok(DataSpec {
            path,
            format,
            l1_normalize: self.l1_normalize || file.l1_normalize.unwrap_or(false),
            skip_header: self.skip_header || file.skip_header.unwrap_or(false),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerArg {
    Aon,
    Frobenius,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum WeightingArg {
    Harmonic,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum KernelArg {
    /// Plain linear projection `W` (no Gram matrix).
    None,
    Linear,
    Chi2,
    Rbf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub d_out: Option<usize>,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub lambda: Option<f64>,
    pub eta: Option<f64>,
    pub gamma: Option<f64>,
    pub regularizer: Option<RegularizerArg>,
    pub optimizer: Option<OptimizerArg>,
    pub weighting: Option<WeightingArg>,
    pub max_draws: Option<usize>,
    pub kernel: Option<KernelArg>,
    pub bandwidth: Option<f64>,
    pub kernel_cap: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainArgs {
    /// Output dimension D′.
    #[arg(long)]
    pub d_out: Option<usize>,
    /// Number of mini-batch updates.
    #[arg(long = "iters")]
    pub iterations: Option<usize>,
    /// Triplets per mini-batch.
    #[arg(long = "batch")]
    pub batch_size: Option<usize>,
    /// Regularization strength λ.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Step size η.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Margin γ.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum)]
    pub regularizer: Option<RegularizerArg>,
    /// Update rule for the linear model (the kernel path always uses
    /// preconditioned SGD).
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long, value_enum)]
    pub weighting: Option<WeightingArg>,
    /// Cap on violator draws per sampled pair.
    #[arg(long)]
    pub max_draws: Option<usize>,
    #[arg(long, value_enum)]
    pub kernel: Option<KernelArg>,
    /// RBF bandwidth σ in `exp(−‖x−y‖²/2σ²)`.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Largest training set accepted by the kernel path.
    #[arg(long)]
    pub kernel_cap: Option<usize>,
}

/// Model family plus training hyperparameters.
#[derive(Debug, Clone, Serialize)]
pub struct TrainPlan {
    pub config: TrainConfig,
    pub kernel: Option<KernelSpec>,
}

impl TrainArgs {
    pub fn resolve(&self, file: &TrainSection, seed: u64) -> Result<TrainPlan> {
        let mut cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        if let Some(v) = self.d_out.or(file.d_out) {
            cfg.d_out = v;
        }
        if let Some(v) = self.iterations.or(file.iterations) {
            cfg.iterations = v;
        }
        if let Some(v) = self.batch_size.or(file.batch_size) {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lambda.or(file.lambda) {
            cfg.loss.lambda = v;
        }
        if let Some(v) = self.eta.or(file.eta) {
            cfg.eta = v;
        }
        if let Some(v) = self.gamma.or(file.gamma) {
            cfg.loss.gamma = v;
        }
        if let Some(v) = self.kernel_cap.or(file.kernel_cap) {
            cfg.kernel_cap = v;
        }
        cfg.loss.max_draws = self.max_draws.or(file.max_draws);
        cfg.regularizer = match self.regularizer.or(file.regularizer) {
            Some(RegularizerArg::Frobenius) => Regularizer::Frobenius,
            _ => Regularizer::Aon,
        };
        cfg.optimizer = match self.optimizer.or(file.optimizer) {
            Some(OptimizerArg::Sgd) => Optimizer::Sgd,
            _ => Optimizer::Adam(AdamParams::default()),
        };
        cfg.loss.weighting = match self.weighting.or(file.weighting) {
            Some(WeightingArg::Uniform) => RankWeighting::Uniform,
            _ => RankWeighting::Harmonic,
        };
        cfg.validate()?;
        let bandwidth = self.bandwidth.or(file.bandwidth);
        let kernel = match self.kernel.or(file.kernel).unwrap_or(KernelArg::None) {
            KernelArg::None => None,
            KernelArg::Linear => Some(KernelSpec::linear()),
            KernelArg::Chi2 => Some(KernelSpec::chi2()),
            KernelArg::Rbf => Some(KernelSpec::rbf(bandwidth.unwrap_or(1.0))),
        };
        if let Some(spec) = &kernel {
            spec.validate()?;
        }
        Ok(TrainPlan { config: cfg, kernel })
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub p_test: Option<usize>,
    pub splits: Option<usize>,
    pub trials: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ProtocolArgs {
    /// Identities held out for testing in each split.
    #[arg(long)]
    pub p_test: Option<usize>,
    /// Number of random train/test splits.
    #[arg(long)]
    pub splits: Option<usize>,
    /// Single-shot probe draws per split.
    #[arg(long)]
    pub trials: Option<usize>,
}

impl ProtocolArgs {
    pub fn p_test(&self, file: &ProtocolSection) -> Option<usize> {
        self.p_test.or(file.p_test)
    }

    pub fn trials(&self, file: &ProtocolSection) -> usize {
        self.trials.or(file.trials).unwrap_or(10)
    }

    pub fn resolve(&self, file: &ProtocolSection, seed: u64, q: usize) -> ProtocolConfig {
        ProtocolConfig {
            p_test: self.p_test(file).unwrap_or(q / 2),
            n_splits: self.splits.or(file.splits).unwrap_or(10),
            n_trials: self.trials(file),
            seed,
        }
    }
}
