//! Retrieval evaluation under the single-shot protocol.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_splits, single_shot_trials, LabeledDataset, SingleShotTrial};
use crate::error::{Error, Result};
use crate::kernel::{project_new, KernelKind, KernelMetricModel};
use crate::linear::LinearMetricModel;
use crate::ranking::PairDistance;
use crate::seed::derive_seed;

/// Maps raw feature vectors into the space where distances are Euclidean.
pub trait Embedder: Sync {
    fn embed(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Condition number of the underlying linear map, when there is one.
    fn condition_number(&self) -> Option<f64> {
        None
    }
}

/// Identity embedding: plain Euclidean distance on the raw features.
pub struct Euclidean;

impl Embedder for Euclidean {
    fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.to_vec())
    }
}

impl Embedder for LinearMetricModel {
    fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.project(x)
    }

    fn condition_number(&self) -> Option<f64> {
        condition_number(self).ok()
    }
}

impl Embedder for KernelMetricModel {
    fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        project_new(self, x)
    }

    fn condition_number(&self) -> Option<f64> {
        if self.spec().kind == KernelKind::Linear {
            self.linear_equivalent().ok().and_then(|w| condition_number(&w).ok())
        } else {
            None
        }
    }
}

/// Embedded points addressed by dataset index; only some indices are filled.
pub struct EmbeddedPoints {
    points: Vec<Option<Vec<f64>>>,
}

impl EmbeddedPoints {
    pub fn compute<E: Embedder + ?Sized>(embedder: &E, ds: &LabeledDataset, indices: &[usize]) -> Result<Self> {
        let computed: Vec<(usize, Vec<f64>)> = indices
            .par_iter()
            .map(|&i| embedder.embed(ds.row(i)).map(|v| (i, v)))
            .collect::<Result<_>>()?;
        let mut points = vec![None; ds.n()];
        for (i, v) in computed {
            points[i] = Some(v);
        }
        Ok(Self { points })
    }

    /// Builds from explicit vectors indexed `0..len`.
    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Self {
        Self {
            points: vectors.into_iter().map(Some).collect(),
        }
    }

    fn get(&self, i: usize) -> Result<&[f64]> {
        self.points
            .get(i)
            .and_then(|p| p.as_deref())
            .ok_or_else(|| Error::Validation(format!("index {i} was not embedded")))
    }
}

/// Distances between embedded dataset indices. Panics if either index was
/// not embedded.
impl PairDistance for EmbeddedPoints {
    fn distance(&self, a: usize, b: usize) -> f64 {
        let (x, y) = (self.get(a).expect("embedded index"), self.get(b).expect("embedded index"));
        sq_dist(x, y).sqrt()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cumulative match characteristic: `values[r]` is the fraction of probes
/// whose first correct match is at rank `r + 1` or better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve {
    pub values: Vec<f64>,
    pub trials: usize,
}

impl CmcCurve {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Extends to `len` ranks by repeating the terminal value.
    pub fn padded(&self, len: usize) -> CmcCurve {
        let mut values = self.values.clone();
        let last = values.last().copied().unwrap_or(1.0);
        values.resize(len.max(values.len()), last);
        CmcCurve {
            values,
            trials: self.trials,
        }
    }
}

/// Match rank of every probe (1 = best). Distance ties with wrong gallery
/// items count against the probe.
pub fn match_ranks(points: &EmbeddedPoints, trial: &SingleShotTrial, labels: &[u32]) -> Result<Vec<usize>> {
    let gallery: Vec<(&[f64], u32)> = trial
        .gallery_indices
        .iter()
        .map(|&g| Ok((points.get(g)?, labels[g])))
        .collect::<Result<_>>()?;
    trial
        .probe_indices
        .par_iter()
        .map(|&p| {
            let (x, y) = (points.get(p)?, labels[p]);
            let dists: Vec<f64> = gallery.iter().map(|(g, _)| sq_dist(x, g)).collect();
            let best = gallery
                .iter()
                .zip(&dists)
                .filter(|((_, gy), _)| *gy == y)
                .map(|(_, d)| *d)
                .fold(f64::INFINITY, f64::min);
            if best == f64::INFINITY {
                return Err(Error::Protocol(format!(
                    "probe {p} (identity {y}) has no match in the gallery"
                )));
            }
            let ahead = gallery
                .iter()
                .zip(&dists)
                .filter(|((_, gy), d)| *gy != y && **d <= best)
                .count();
            Ok(ahead + 1)
        })
        .collect()
}

pub fn cmc_single_trial(points: &EmbeddedPoints, trial: &SingleShotTrial, labels: &[u32]) -> Result<CmcCurve> {
    let ranks = match_ranks(points, trial, labels)?;
    let g = trial.gallery_indices.len();
    Ok(cmc_from_ranks(&ranks, g))
}

/// CMC over `g` ranks from 1-based match ranks.
pub fn cmc_from_ranks(ranks: &[usize], g: usize) -> CmcCurve {
    let mut hist = vec![0usize; g];
    for &r in ranks {
        hist[r - 1] += 1;
    }
    let total = ranks.len() as f64;
    let mut acc = 0;
    let values = hist
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / total
        })
        .collect();
    CmcCurve { values, trials: 1 }
}

pub fn rank_k(curve: &CmcCurve, k: usize) -> Result<f64> {
    if k == 0 || k > curve.len() {
        return Err(Error::Validation(format!(
            "rank {k} outside 1..={}",
            curve.len()
        )));
    }
    Ok(curve.values[k - 1])
}

/// Normalized area: the mean of the curve values.
pub fn auc(curve: &CmcCurve) -> f64 {
    curve.values.iter().sum::<f64>() / curve.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: MeanStd,
    pub rank5: MeanStd,
    pub auc: MeanStd,
    pub curve: CmcCurve,
    /// Per-rank population standard deviation across trials.
    pub curve_std: Vec<f64>,
    pub cond_w: Option<f64>,
}

impl EvalReport {
    /// `rank,cmc_mean,cmc_std` rows.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("rank,cmc_mean,cmc_std\n");
        for (r, (m, s)) in self.curve.values.iter().zip(&self.curve_std).enumerate() {
            out.push_str(&format!("{},{},{}\n", r + 1, m, s));
        }
        out
    }
}

pub fn aggregate(curves: &[CmcCurve]) -> Result<EvalReport> {
    let first = curves
        .first()
        .ok_or_else(|| Error::Validation("no curves to aggregate".into()))?;
    let g = first.len();
    if g == 0 {
        return Err(Error::Validation("empty CMC curve".into()));
    }
    if let Some(c) = curves.iter().find(|c| c.len() != g) {
        return Err(Error::Validation(format!(
            "curve length mismatch: {} vs {g}",
            c.len()
        )));
    }
    let k5 = g.min(5);
    let r1: Vec<f64> = curves.iter().map(|c| c.values[0]).collect();
    let r5: Vec<f64> = curves.iter().map(|c| c.values[k5 - 1]).collect();
    let au: Vec<f64> = curves.iter().map(auc).collect();
    let per_rank: Vec<MeanStd> = (0..g)
        .map(|r| MeanStd::of(&curves.iter().map(|c| c.values[r]).collect::<Vec<_>>()))
        .collect();
    Ok(EvalReport {
        rank1: MeanStd::of(&r1),
        rank5: MeanStd::of(&r5),
        auc: MeanStd::of(&au),
        curve: CmcCurve {
            values: per_rank.iter().map(|m| m.mean).collect(),
            trials: curves.iter().map(|c| c.trials).sum(),
        },
        curve_std: per_rank.iter().map(|m| m.std).collect(),
        cond_w: None,
    })
}

/// Ratio of extreme singular values of `W`; infinite when rank-deficient.
pub fn condition_number(m: &LinearMetricModel) -> Result<f64> {
    let sv = m.w().singular_values();
    let max = sv.max();
    let min = sv.min();
    if max == 0.0 {
        return Err(Error::Numerical("condition number of a zero matrix".into()));
    }
    if min < 1e-14 * max {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

/// Splits × single-shot trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub p_test: usize,
    pub n_splits: usize,
    pub n_trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ProtocolResult {
    pub report: EvalReport,
    pub curves: Vec<CmcCurve>,
    /// Condition number of each split's model, when defined.
    pub cond_per_split: Vec<Option<f64>>,
}

/// Single-shot trials over `test_indices` for a fixed embedding.
pub fn evaluate_embedder<E: Embedder + ?Sized>(
    embedder: &E,
    ds: &LabeledDataset,
    test_indices: &[usize],
    n_trials: usize,
    seed: u64,
) -> Result<Vec<CmcCurve>> {
    let trials = single_shot_trials(ds, test_indices, n_trials, seed)?;
    let points = EmbeddedPoints::compute(embedder, ds, test_indices)?;
    trials
        .iter()
        .map(|t| cmc_single_trial(&points, t, ds.labels()))
        .collect()
}

/// Pads to a common length with terminal values, then aggregates.
pub fn aggregate_padded(curves: &[CmcCurve]) -> Result<(EvalReport, Vec<CmcCurve>)> {
    let len = curves.iter().map(CmcCurve::len).max().unwrap_or(0);
    let curves: Vec<CmcCurve> = curves.iter().map(|c| c.padded(len)).collect();
    Ok((aggregate(&curves)?, curves))
}

/// Runs `fit` on each split's training indices and evaluates the returned
/// embedding on that split's single-shot trials. Curves of different gallery
/// sizes are padded with their terminal value before aggregation.
pub fn run_protocol<F>(ds: &LabeledDataset, cfg: &ProtocolConfig, mut fit: F) -> Result<ProtocolResult>
where
    F: FnMut(usize, &[usize]) -> Result<Box<dyn Embedder>>,
{
    if cfg.n_splits == 0 || cfg.n_trials == 0 {
        return Err(Error::Config("need at least one split and one trial".into()));
    }
    let plan = make_splits(ds, cfg.p_test, cfg.n_splits, derive_seed(cfg.seed, 100))?;
    let mut curves = Vec::new();
    let mut conds = Vec::new();
    for (s, split) in plan.splits.iter().enumerate() {
        let embedder = fit(s, &split.train)?;
        conds.push(embedder.condition_number());
        curves.extend(evaluate_embedder(
            embedder.as_ref(),
            ds,
            &split.test,
            cfg.n_trials,
            derive_seed(cfg.seed, 200 + s as u64),
        )?);
    }
    let (mut report, curves) = aggregate_padded(&curves)?;
    let finite: Vec<f64> = conds.iter().flatten().copied().collect();
    if finite.len() == conds.len() && !finite.is_empty() {
        report.cond_w = Some(finite.iter().sum::<f64>() / finite.len() as f64);
    }
    Ok(ProtocolResult {
        report,
        curves,
        cond_per_split: conds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn curve(v: &[f64]) -> CmcCurve {
        CmcCurve {
            values: v.to_vec(),
            trials: 1,
        }
    }

    #[test]
    fn rank_k_and_auc() {
        let c = curve(&[0.4, 0.7, 1.0]);
        assert_eq!(rank_k(&c, 2).unwrap(), 0.7);
        assert_eq!(rank_k(&c, 3).unwrap(), 1.0);
        assert!(rank_k(&c, 0).is_err());
        assert!(rank_k(&c, 4).is_err());
        assert_eq!(auc(&curve(&[0.5, 1.0])), 0.75);
        assert_eq!(auc(&curve(&[1.0, 1.0, 1.0])), 1.0);
    }

    #[test]
    fn aggregate_mean_and_population_std() {
        let r = aggregate(&[curve(&[0.4, 1.0]), curve(&[0.6, 1.0])]).unwrap();
        assert!((r.rank1.mean - 0.5).abs() < 1e-15);
        assert!((r.rank1.std - 0.1).abs() < 1e-15);
        let single = aggregate(&[curve(&[0.3, 0.8, 1.0])]).unwrap();
        assert_eq!(single.rank1.std, 0.0);
        assert!(aggregate(&[curve(&[0.4, 1.0]), curve(&[1.0])]).is_err());
        assert!(r.curve.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn condition_number_examples() {
        let d = LinearMetricModel::new(DMatrix::from_diagonal(&nalgebra::dvector![4.0, 1.0])).unwrap();
        assert!((condition_number(&d).unwrap() - 4.0).abs() < 1e-12);
        let o = crate::linear::init_model(7, 3, 2).unwrap();
        assert!((condition_number(&o).unwrap() - 1.0).abs() < 1e-8);
        let z = LinearMetricModel::new(DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(condition_number(&z).unwrap(), f64::INFINITY);
        let zero = LinearMetricModel::new(DMatrix::zeros(2, 2)).unwrap();
        assert!(condition_number(&zero).is_err());
    }

    #[test]
    fn perfect_and_collapsed_embeddings() {
        // identities 1..=4, two images each; images of one identity coincide
        let labels: Vec<u32> = (1..=4).flat_map(|y| [y, y]).collect();
        let perfect = EmbeddedPoints::from_vectors(labels.iter().map(|&y| vec![y as f64, 0.0]).collect());
        let collapsed = EmbeddedPoints::from_vectors(labels.iter().map(|_| vec![0.0, 0.0]).collect());
        let trial = SingleShotTrial {
            probe_indices: vec![0, 2, 5, 7],
            gallery_indices: vec![1, 3, 4, 6],
        };
        let c = cmc_single_trial(&perfect, &trial, &labels).unwrap();
        assert_eq!(c.values, vec![1.0; 4]);
        let c = cmc_single_trial(&collapsed, &trial, &labels).unwrap();
        assert_eq!(c.values, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn missing_gallery_match_is_protocol_error() {
        let labels = vec![1, 2, 2];
        let pts = EmbeddedPoints::from_vectors(vec![vec![0.0], vec![1.0], vec![2.0]]);
        let trial = SingleShotTrial {
            probe_indices: vec![0],
            gallery_indices: vec![1, 2],
        };
        assert!(matches!(
            cmc_single_trial(&pts, &trial, &labels),
            Err(Error::Protocol(_))
        ));
    }
}
