//! Weighted approximate-rank machinery: rank weighting `L(r)`, the
//! margin-penalized rank, the two-step violator sampler and the exact
//! data term of the hinge loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PairIndex;
use crate::error::{Error, Result};

/// Distances between dataset indices under some learned metric.
pub trait PairDistance: Sync {
    fn distance(&self, a: usize, b: usize) -> f64;
}

impl<F> PairDistance for F
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    fn distance(&self, a: usize, b: usize) -> f64 {
        self(a, b)
    }
}

/// Rank weighting `L(r) = Σ_{s≤r} α_s` with nonincreasing `α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankWeighting {
    /// `α_s = 1/s`
    Harmonic,
    /// `α_s = 1`
    Uniform,
    /// Explicit `α_1, α_2, …`; the last value repeats past the end.
    Custom(Vec<f64>),
}

impl RankWeighting {
    pub fn custom(alphas: Vec<f64>) -> Result<Self> {
        let w = RankWeighting::Custom(alphas);
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if let RankWeighting::Custom(alphas) = self {
            if alphas.is_empty() {
                return Err(Error::Config("custom rank weights are empty".into()));
            }
            if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
                return Err(Error::Config(
                    "custom rank weights must be finite and nonnegative".into(),
                ));
            }
            if alphas.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::Config(
                    "custom rank weights must be nonincreasing".into(),
                ));
            }
        }
        Ok(())
    }

    /// `α_s` for `s ≥ 1`.
    pub fn alpha(&self, s: usize) -> f64 {
        debug_assert!(s >= 1);
        match self {
            RankWeighting::Harmonic => 1.0 / s as f64,
            RankWeighting::Uniform => 1.0,
            RankWeighting::Custom(a) => a[(s - 1).min(a.len() - 1)],
        }
    }

    /// `L(r)`; `L(0) = 0`.
    pub fn weight(&self, r: usize) -> f64 {
        match self {
            RankWeighting::Uniform => r as f64,
            _ => (1..=r).map(|s| self.alpha(s)).sum(),
        }
    }

    /// `L(0..=max_r)` as a lookup table.
    pub fn table(&self, max_r: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(max_r + 1);
        let mut acc = 0.0;
        out.push(0.0);
        for s in 1..=max_r {
            acc += self.alpha(s);
            out.push(acc);
        }
        out
    }
}

/// Hyper-parameters of the hinge surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub weighting: RankWeighting,
    /// Cap on violator draws per pair; `None` means `|T_y|`.
    pub max_draws: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 1e-3,
            weighting: RankWeighting::Harmonic,
            max_draws: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.max_draws == Some(0) {
            return Err(Error::Config("max_draws must be >= 1".into()));
        }
        self.weighting.validate()
    }
}

/// A violating triplet found by the sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletSample {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    /// Number of uniform draws until the violator was hit.
    pub draws: usize,
    pub rank_estimate: usize,
    /// `γ + d(i,j) − d(i,k)`, strictly positive.
    pub hinge: f64,
}

/// Number of negatives `k` with `γ + d(i,j) − d(i,k) > 0`.
pub fn margin_rank<D: PairDistance + ?Sized>(
    dist: &D,
    i: usize,
    j: usize,
    negatives: &[usize],
    gamma: f64,
) -> usize {
    let dij = dist.distance(i, j);
    negatives
        .iter()
        .filter(|&&k| gamma + dij - dist.distance(i, k) > 0.0)
        .count()
}

/// `floor(|T| / draws)`, at least 1.
pub fn rank_from_draws(negatives: usize, draws: usize) -> usize {
    (negatives / draws).max(1)
}

/// Two-step sampling: a uniform pair from `S`, then uniform draws (with
/// replacement) from the anchor's negatives until one violates the margin.
pub fn sample_triplet<R: Rng + ?Sized, D: PairDistance + ?Sized>(
    rng: &mut R,
    pairs: &PairIndex,
    dist: &D,
    cfg: &LossConfig,
) -> Option<TripletSample> {
    if pairs.same_pairs.is_empty() {
        return None;
    }
    let (i, j) = pairs.same_pairs[rng.random_range(0..pairs.same_pairs.len())];
    let negatives = pairs.negatives_for(i);
    if negatives.is_empty() {
        return None;
    }
    let max_draws = cfg.max_draws.unwrap_or(negatives.len());
    let dij = dist.distance(i, j);
    for draws in 1..=max_draws {
        let k = negatives[rng.random_range(0..negatives.len())];
        let hinge = cfg.gamma + dij - dist.distance(i, k);
        if hinge > 0.0 {
            return Some(TripletSample {
                i,
                j,
                k,
                draws,
                rank_estimate: rank_from_draws(negatives.len(), draws),
                hinge,
            });
        }
    }
    None
}

/// `L(rank_estimate) · hinge`.
pub fn triplet_contribution(t: &TripletSample, w: &RankWeighting) -> f64 {
    w.weight(t.rank_estimate) * t.hinge
}

/// Exact data term `(1/|S|) Σ_{(i,j)} L(r_ij)/r_ij Σ_k |γ + ξ_ijk|₊`.
///
/// Parallel over pairs; the reduction runs in pair order so the result does
/// not depend on the thread count.
pub fn exact_warp_loss<D: PairDistance + ?Sized>(dist: &D, pairs: &PairIndex, cfg: &LossConfig) -> f64 {
    if pairs.same_pairs.is_empty() {
        return 0.0;
    }
    let per_pair: Vec<f64> = pairs
        .same_pairs
        .par_iter()
        .map(|&(i, j)| pair_loss(dist, pairs, cfg, i, j))
        .collect();
    per_pair.iter().sum::<f64>() / pairs.same_pairs.len() as f64
}

/// Exact data term over a subset of pairs (by position in `same_pairs`).
pub fn exact_warp_loss_on<D: PairDistance + ?Sized>(
    dist: &D,
    pairs: &PairIndex,
    cfg: &LossConfig,
    pair_positions: &[usize],
) -> f64 {
    if pair_positions.is_empty() {
        return 0.0;
    }
    let per_pair: Vec<f64> = pair_positions
        .par_iter()
        .map(|&p| {
            let (i, j) = pairs.same_pairs[p];
            pair_loss(dist, pairs, cfg, i, j)
        })
        .collect();
    per_pair.iter().sum::<f64>() / pair_positions.len() as f64
}

/// Exact data term over at most `cap` pairs, drawn without replacement from
/// a seeded stream when `|S|` exceeds the cap.
pub fn capped_warp_loss<D: PairDistance + ?Sized>(
    dist: &D,
    pairs: &PairIndex,
    cfg: &LossConfig,
    cap: usize,
    seed: u64,
) -> f64 {
    let total = pairs.same_pairs.len();
    if total <= cap {
        return exact_warp_loss(dist, pairs, cfg);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = rand::seq::index::sample(&mut rng, total, cap).into_vec();
    positions.sort_unstable();
    exact_warp_loss_on(dist, pairs, cfg, &positions)
}

fn pair_loss<D: PairDistance + ?Sized>(
    dist: &D,
    pairs: &PairIndex,
    cfg: &LossConfig,
    i: usize,
    j: usize,
) -> f64 {
    let dij = dist.distance(i, j);
    let mut rank = 0usize;
    let mut hinge_sum = 0.0;
    for &k in pairs.negatives_for(i) {
        let h = cfg.gamma + dij - dist.distance(i, k);
        if h > 0.0 {
            rank += 1;
            hinge_sum += h;
        }
    }
    if rank == 0 {
        0.0
    } else {
        cfg.weighting.weight(rank) / rank as f64 * hinge_sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_pair_index, LabeledDataset};

    #[test]
    fn harmonic_and_uniform_weights() {
        assert!((RankWeighting::Harmonic.weight(3) - 11.0 / 6.0).abs() < 1e-15);
        assert_eq!(RankWeighting::Uniform.weight(7), 7.0);
        for w in [
            RankWeighting::Harmonic,
            RankWeighting::Uniform,
            RankWeighting::custom(vec![2.0, 1.0]).unwrap(),
        ] {
            assert_eq!(w.weight(0), 0.0);
        }
    }

    #[test]
    fn custom_weights_repeat_last_alpha() {
        let w = RankWeighting::custom(vec![3.0, 2.0, 0.5]).unwrap();
        assert_eq!(w.weight(2), 5.0);
        assert_eq!(w.weight(5), 6.5);
        assert_eq!(w.table(5), vec![0.0, 3.0, 5.0, 5.5, 6.0, 6.5]);
        assert!(RankWeighting::custom(vec![1.0, 2.0]).is_err());
        assert!(RankWeighting::custom(vec![1.0, -0.1]).is_err());
        assert!(RankWeighting::custom(vec![]).is_err());
    }

    #[test]
    fn table_matches_weight() {
        let t = RankWeighting::Harmonic.table(50);
        for (r, v) in t.iter().enumerate() {
            assert!((v - RankWeighting::Harmonic.weight(r)).abs() < 1e-12);
        }
    }

    #[test]
    fn contributions() {
        let mut t = TripletSample {
            i: 0,
            j: 1,
            k: 2,
            draws: 1,
            rank_estimate: 1,
            hinge: 0.5,
        };
        assert_eq!(triplet_contribution(&t, &RankWeighting::Harmonic), 0.5);
        t.rank_estimate = 3;
        t.hinge = 2.0;
        assert!((triplet_contribution(&t, &RankWeighting::Harmonic) - 11.0 / 3.0).abs() < 1e-12);
        t.rank_estimate = 2;
        t.hinge = 1.0;
        assert_eq!(triplet_contribution(&t, &RankWeighting::Uniform), 2.0);
    }

    #[test]
    fn rank_estimates_from_draw_counts() {
        assert_eq!(rank_from_draws(100, 1), 100);
        assert_eq!(rank_from_draws(100, 4), 25);
        assert_eq!(rank_from_draws(3, 7), 1);
    }

    fn line_dataset(xs: &[f64], labels: &[u32]) -> LabeledDataset {
        LabeledDataset::new(xs.to_vec(), labels.to_vec(), 1).unwrap()
    }

    #[test]
    fn margin_rank_zero_when_negatives_far() {
        // d(0,1) = 0.1, negatives at 1.2 and 2.0
        let ds = line_dataset(&[0.0, 0.1, 1.2, 2.0], &[1, 1, 2, 2]);
        let dist = |a: usize, b: usize| (ds.row(a)[0] - ds.row(b)[0]).abs();
        assert_eq!(margin_rank(&dist, 0, 1, &[2, 3], 1.0), 0);
        assert_eq!(margin_rank(&dist, 0, 1, &[2, 3], 0.0), 0);
        assert_eq!(margin_rank(&dist, 0, 1, &[2, 3], 1.5), 1);
    }

    #[test]
    fn ties_are_not_violations() {
        let ds = line_dataset(&[0.0, 1.0, 2.0], &[1, 1, 2]);
        let dist = |a: usize, b: usize| (ds.row(a)[0] - ds.row(b)[0]).abs();
        // γ + 1 − 2 = 0 exactly
        assert_eq!(margin_rank(&dist, 0, 1, &[2], 1.0), 0);
    }

    #[test]
    fn sampler_returns_none_without_violators() {
        let ds = line_dataset(&[0.0, 0.1, 5.0, 6.0], &[1, 1, 2, 2]);
        let dist = |a: usize, b: usize| (ds.row(a)[0] - ds.row(b)[0]).abs();
        let pairs = build_pair_index(&ds, &[0, 1, 2, 3]).unwrap();
        let cfg = LossConfig {
            max_draws: Some(5),
            ..LossConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert!(sample_triplet(&mut rng, &pairs, &dist, &cfg).is_none());
        }
    }

    #[test]
    fn sampler_emits_valid_violators() {
        let ds = line_dataset(&[0.0, 0.9, 0.5, 0.7, 3.0, 0.2], &[1, 1, 2, 2, 2, 1]);
        let dist = |a: usize, b: usize| (ds.row(a)[0] - ds.row(b)[0]).abs();
        let all: Vec<usize> = (0..6).collect();
        let pairs = build_pair_index(&ds, &all).unwrap();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = 0;
        for _ in 0..500 {
            if let Some(t) = sample_triplet(&mut rng, &pairs, &dist, &cfg) {
                seen += 1;
                assert_eq!(ds.label(t.i), ds.label(t.j));
                assert_ne!(ds.label(t.k), ds.label(t.i));
                assert!(t.hinge > 0.0);
                let negs = pairs.negatives_for(t.i).len();
                assert!(t.rank_estimate >= 1 && t.rank_estimate <= negs);
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn exact_loss_zero_when_separated() {
        let ds = line_dataset(&[0.0, 0.1, 10.0, 10.1], &[1, 1, 2, 2]);
        let dist = |a: usize, b: usize| (ds.row(a)[0] - ds.row(b)[0]).abs();
        let pairs = build_pair_index(&ds, &[0, 1, 2, 3]).unwrap();
        assert_eq!(exact_warp_loss(&dist, &pairs, &LossConfig::default()), 0.0);
    }

    #[test]
    fn scaling_changes_hinge_but_not_zero_margin_rank() {
        let ds = line_dataset(&[0.0, 0.5, 0.4, 1.3, 2.0, 0.1], &[1, 1, 2, 2, 1, 2]);
        let pairs = build_pair_index(&ds, &(0..6).collect::<Vec<_>>()).unwrap();
        let d1 = |a: usize, b: usize| (ds.row(a)[0] - ds.row(b)[0]).abs();
        let d3 = |a: usize, b: usize| 3.0 * (ds.row(a)[0] - ds.row(b)[0]).abs();
        let cfg = LossConfig::default();
        assert!((exact_warp_loss(&d1, &pairs, &cfg) - exact_warp_loss(&d3, &pairs, &cfg)).abs() > 1e-6);
        for &(i, j) in &pairs.same_pairs {
            let negs = pairs.negatives_for(i);
            assert_eq!(margin_rank(&d1, i, j, negs, 0.0), margin_rank(&d3, i, j, negs, 0.0));
        }
    }
}
