//! Grid search over `(λ, η)` on validation splits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::eval::{run_protocol, Embedder, ProtocolConfig};
use crate::kernel::{train_kernel, KernelSpec};
use crate::linear::{train, TrainConfig};

/// Which model family to fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum Method {
    Linear,
    Kernel(KernelSpec),
}

impl Method {
    pub fn fit(&self, ds: &LabeledDataset, train_indices: &[usize], cfg: &TrainConfig) -> Result<Box<dyn Embedder>> {
        Ok(match self {
            Method::Linear => Box::new(train(ds, train_indices, cfg)?.model),
            Method::Kernel(spec) => Box::new(train_kernel(ds, train_indices, spec, cfg)?.model),
        })
    }
}

/// `points` values from `lo` to `hi`, evenly spaced in log10.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || points == 0 {
        return Err(Error::Config(format!(
            "log grid needs 0 < lo <= hi and points >= 1, got {lo}:{hi}:{points}"
        )));
    }
    if points == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.log10(), hi.log10());
    let step = (b - a) / (points - 1) as f64;
    Ok((0..points)
        .map(|i| match i {
            0 => lo,
            _ if i == points - 1 => hi,
            _ => 10f64.powf(a + step * i as f64),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub eta: f64,
    pub rank1_mean: f64,
    pub rank1_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Row-major over `(λ, η)`: all etas for the first lambda, then the next.
    pub cells: Vec<SweepCell>,
    pub best: usize,
}

impl SweepResult {
    pub fn best_cell(&self) -> &SweepCell {
        &self.cells[self.best]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,eta,rank1_mean,rank1_std\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{},{}\n", c.lambda, c.eta, c.rank1_mean, c.rank1_std));
        }
        out
    }
}

/// Highest mean rank-1; ties go to smaller λ, then smaller η.
pub fn select_best(cells: &[SweepCell]) -> Option<usize> {
    (0..cells.len()).reduce(|best, i| {
        let (b, c) = (&cells[best], &cells[i]);
        let better = c.rank1_mean > b.rank1_mean
            || (c.rank1_mean == b.rank1_mean
                && (c.lambda < b.lambda || (c.lambda == b.lambda && c.eta < b.eta)));
        if better {
            i
        } else {
            best
        }
    })
}

/// Evaluates every grid cell with `validation` on `ds` (cells in parallel).
pub fn run_sweep(
    ds: &LabeledDataset,
    method: Method,
    base: &TrainConfig,
    lambdas: &[f64],
    etas: &[f64],
    validation: &ProtocolConfig,
) -> Result<SweepResult> {
    if lambdas.is_empty() || etas.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let grid: Vec<(f64, f64)> = lambdas
        .iter()
        .flat_map(|&l| etas.iter().map(move |&e| (l, e)))
        .collect();
    let cells = grid
        .par_iter()
        .map(|&(lambda, eta)| {
            let mut cfg = base.clone();
            cfg.loss.lambda = lambda;
            cfg.eta = eta;
            let result = run_protocol(ds, validation, |_, train_idx| method.fit(ds, train_idx, &cfg))?;
            Ok(SweepCell {
                lambda,
                eta,
                rank1_mean: result.report.rank1.mean,
                rank1_std: result.report.rank1.std,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = select_best(&cells).expect("grid is nonempty");
    Ok(SweepResult { cells, best })
}
