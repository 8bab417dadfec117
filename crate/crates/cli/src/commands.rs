use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde_json::{json, Value};
use warca::dataset::{build_pair_index, load_features, synth_gaussian, write_features, FeatureFormat};
use warca::eval::{
    aggregate_padded, evaluate_embedder, run_protocol, Embedder, EmbeddedPoints, Euclidean,
};
use warca::kernel::{gram_matrix, train_kernel};
use warca::linear::train;
use warca::model_io::{encode_gram, load_model, save_model, SavedModel};
use warca::ranking::capped_warp_loss;
use warca::sweep::{log_grid, run_sweep, Method};
use warca::{derive_seed, Error, KernelSpec, LabeledDataset};

use crate::config::{DataArgs, DataSpec, FileConfig, FormatArg, KernelArg, ProtocolArgs, TrainArgs, TrainPlan};

/// Seed tag for the pair subsample behind the reported training loss.
const LOSS_SUBSAMPLE_TAG: u64 = 300;

fn load(spec: &DataSpec) -> Result<LabeledDataset> {
    load_features(&spec.path, spec.format, spec.l1_normalize, spec.skip_header)
        .with_context(|| format!("loading {}", spec.path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn to_pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values always serialize");
    s.push('\n');
    s
}

fn method_of(plan: &TrainPlan) -> Method {
    match plan.kernel {
        Some(spec) => Method::Kernel(spec),
        None => Method::Linear,
    }
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Where to write the trained model.
    #[arg(long)]
    pub model: PathBuf,
    /// Same-label pairs used for the reported loss; larger sets are subsampled.
    #[arg(long, default_value_t = 20_000)]
    pub loss_pairs: usize,
}

pub fn train_cmd(cmd: &TrainCmd, file: &FileConfig, seed: u64) -> Result<()> {
    let plan = cmd.train.resolve(&file.train, seed)?;
    let ds = load(&cmd.data.resolve(&file.data)?)?;
    let all: Vec<usize> = (0..ds.n()).collect();
    let cfg = &plan.config;

    let (saved, embedder, iterations_run, converged_early, penalty): (SavedModel, Box<dyn Embedder>, _, _, _) =
        match plan.kernel {
            None => {
                let out = train(&ds, &all, cfg)?;
                let model = out.model.clone();
                (
                    SavedModel::Linear(out.model),
                    Box::new(model),
                    out.iterations_run,
                    out.converged_early,
                    out.final_penalty,
                )
            }
            Some(spec) => {
                let out = train_kernel(&ds, &all, &spec, cfg)?;
                let model = out.model.clone();
                (
                    SavedModel::Kernel(out.model),
                    Box::new(model),
                    out.iterations_run,
                    out.converged_early,
                    out.final_penalty,
                )
            }
        };

    let points = EmbeddedPoints::compute(embedder.as_ref(), &ds, &all)?;
    let pairs = build_pair_index(&ds, &all)?;
    let loss = capped_warp_loss(
        &points,
        &pairs,
        &cfg.loss,
        cmd.loss_pairs,
        derive_seed(seed, LOSS_SUBSAMPLE_TAG),
    );
    let cond = embedder.condition_number();

    let metadata = json!({
        "train": plan,
        "n": ds.n(),
        "d": ds.d(),
        "classes": ds.q(),
        "iterations_run": iterations_run,
        "converged_early": converged_early,
    });
    save_model(&cmd.model, &saved, &metadata)?;
    let summary = json!({
        "model": cmd.model.display().to_string(),
        "iterations_run": iterations_run,
        "converged_early": converged_early,
        "final_loss": loss,
        "loss_pairs": pairs.same_pairs.len().min(cmd.loss_pairs),
        "regularizer_penalty": penalty,
        "cond_w": cond.map(cond_value),
    });
    print!("{}", to_pretty(&summary));
    Ok(())
}

/// Condition numbers may be infinite, which JSON cannot carry as a number.
fn cond_value(c: f64) -> Value {
    if c.is_finite() {
        json!(c)
    } else {
        json!("inf")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    Euclidean,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Evaluate a fixed baseline instead of a model.
    #[arg(long, value_enum, conflicts_with = "model")]
    pub baseline: Option<Baseline>,
    /// Evaluate a saved model. Without `--p-test` every identity in the data
    /// is used for testing.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Report JSON path (stdout when omitted).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// CMC curve CSV path.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

fn saved_embedder(saved: &SavedModel) -> Box<dyn Embedder> {
    match saved {
        SavedModel::Linear(m) => Box::new(m.clone()),
        SavedModel::Kernel(m) => Box::new(m.clone()),
    }
}

pub fn eval_cmd(cmd: &EvalCmd, file: &FileConfig, seed: u64) -> Result<()> {
    let ds = load(&cmd.data.resolve(&file.data)?)?;
    let fixed: Option<SavedModel> = match &cmd.model {
        Some(path) => Some(
            load_model(path)
                .with_context(|| format!("loading model {}", path.display()))?
                .0,
        ),
        None => None,
    };
    let mut echo = json!({ "seed": seed });
    let (report, curves) = if cmd.baseline.is_some() || fixed.is_some() {
        let method = if cmd.baseline.is_some() { "euclidean" } else { "model" };
        echo["method"] = json!(method);
        let embedder = || -> Box<dyn Embedder> {
            match &fixed {
                Some(saved) => saved_embedder(saved),
                None => Box::new(Euclidean),
            }
        };
        match cmd.protocol.p_test(&file.protocol) {
            Some(_) => {
                let pc = cmd.protocol.resolve(&file.protocol, seed, ds.q());
                echo["protocol"] = json!(pc);
                let r = run_protocol(&ds, &pc, |_, _| Ok(embedder()))?;
                (r.report, r.curves.len())
            }
            None => {
                let trials = cmd.protocol.trials(&file.protocol);
                echo["protocol"] = json!({ "p_test": ds.q(), "n_splits": 1, "n_trials": trials, "seed": seed });
                let all: Vec<usize> = (0..ds.n()).collect();
                let e = embedder();
                let curves = evaluate_embedder(e.as_ref(), &ds, &all, trials, derive_seed(seed, 200))?;
                let (mut report, curves) = aggregate_padded(&curves)?;
                report.cond_w = e.condition_number();
                (report, curves.len())
            }
        }
    } else {
        let plan = cmd.train.resolve(&file.train, seed)?;
        let pc = cmd.protocol.resolve(&file.protocol, seed, ds.q());
        let method = method_of(&plan);
        echo["method"] = json!(method);
        echo["protocol"] = json!(pc);
        echo["train"] = json!(plan);
        let r = run_protocol(&ds, &pc, |_, tr| method.fit(&ds, tr, &plan.config))?;
        (r.report, r.curves.len())
    };

    let out = json!({
        "rank1": report.rank1,
        "rank5": report.rank5,
        "auc": report.auc,
        "cond_w": report.cond_w.map(cond_value),
        "curves": curves,
        "config": echo,
    });
    if let Some(path) = &cmd.curve {
        write_file(path, report.curve_csv().as_bytes())?;
    }
    match &cmd.report {
        Some(path) => {
            write_file(path, to_pretty(&out).as_bytes())?;
            println!(
                "rank1 {:.4} ± {:.4}  rank5 {:.4}  auc {:.4}",
                report.rank1.mean, report.rank1.std, report.rank5.mean, report.auc.mean
            );
        }
        None => print!("{}", to_pretty(&out)),
    }
    Ok(())
}

/// `lo:hi:points`, log-spaced.
fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Config(format!("grid must look like lo:hi:points, got {spec:?}"));
    if parts.len() != 3 {
        return Err(bad().into());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let points: usize = parts[2].trim().parse().map_err(|_| bad())?;
    Ok(log_grid(lo, hi, points)?)
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// λ grid as `lo:hi:points`.
    #[arg(long, default_value = "1e-8:1:9")]
    pub lambda_grid: String,
    /// η grid as `lo:hi:points`.
    #[arg(long, default_value = "1e-3:1:4")]
    pub eta_grid: String,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn sweep_cmd(cmd: &SweepCmd, file: &FileConfig, seed: u64) -> Result<()> {
    let lambdas = parse_grid(&cmd.lambda_grid)?;
    let etas = parse_grid(&cmd.eta_grid)?;
    let plan = cmd.train.resolve(&file.train, seed)?;
    let ds = load(&cmd.data.resolve(&file.data)?)?;
    let pc = cmd.protocol.resolve(&file.protocol, seed, ds.q());
    let result = run_sweep(&ds, method_of(&plan), &plan.config, &lambdas, &etas, &pc)?;
    let best = json!({ "best": result.best_cell() });
    match &cmd.out {
        Some(path) => {
            write_file(path, result.to_csv().as_bytes())?;
            print!("{}", to_pretty(&best));
        }
        None => {
            print!("{}", result.to_csv());
            eprint!("{}", to_pretty(&best));
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthCmd {
    #[arg(long, default_value_t = 50)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub per_class: usize,
    /// Informative dimensions.
    #[arg(long, default_value_t = 20)]
    pub signal: usize,
    /// Label-independent nuisance dimensions.
    #[arg(long, default_value_t = 100)]
    pub noise: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Output format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

pub fn synth_cmd(cmd: &SynthCmd, seed: u64) -> Result<()> {
    let ds = synth_gaussian(cmd.classes, cmd.per_class, cmd.signal, cmd.noise, cmd.noise_scale, seed)?;
    let format = match cmd.format {
        Some(FormatArg::Csv) => FeatureFormat::Csv,
        Some(FormatArg::Binary) => FeatureFormat::Binary,
        None => FeatureFormat::from_path(&cmd.out),
    };
    write_features(&ds, &cmd.out, format)?;
    println!("wrote {} samples x {} dims to {}", ds.n(), ds.d(), cmd.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct GramCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "chi2")]
    pub kernel: KernelArg,
    #[arg(long, default_value_t = 1.0)]
    pub bandwidth: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gram_cmd(cmd: &GramCmd, file: &FileConfig) -> Result<()> {
    let spec = match cmd.kernel {
        KernelArg::Linear => KernelSpec::linear(),
        KernelArg::Chi2 => KernelSpec::chi2(),
        KernelArg::Rbf => KernelSpec::rbf(cmd.bandwidth),
        KernelArg::None => return Err(Error::Config("gram needs a kernel".into()).into()),
    };
    let ds = load(&cmd.data.resolve(&file.data)?)?;
    let gram = gram_matrix(&spec, &ds)?;
    write_file(&cmd.out, &encode_gram(&gram)?)?;
    println!("wrote {}x{} Gram matrix to {}", gram.n(), gram.n(), cmd.out.display());
    Ok(())
}
