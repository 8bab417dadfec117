use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use warca::dataset::{build_pair_index, LabeledDataset, PairIndex};
use warca::linear::{LinearMetricModel, ProjectionCache};
use warca::ranking::{
    exact_warp_loss, margin_rank, rank_from_draws, sample_triplet, triplet_contribution, LossConfig, RankWeighting,
};

fn random_dataset(n: usize, q: u32, d: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|i| (i as u32 % q) + 1).collect();
    LabeledDataset::new(features, labels, d).unwrap()
}

fn random_model(d_out: usize, d_in: usize, seed: u64) -> LinearMetricModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LinearMetricModel::new(DMatrix::from_fn(d_out, d_in, |_, _| rng.random_range(-1.0..1.0))).unwrap()
}

fn euclid(ds: &LabeledDataset, m: &LinearMetricModel, a: usize, b: usize) -> f64 {
    warca::linear::distance(m, ds.row(a), ds.row(b)).unwrap()
}

/// Loss written straight from its definition, with no shared helpers.
fn brute_force_loss(ds: &LabeledDataset, m: &LinearMetricModel, cfg: &LossConfig) -> f64 {
    let n = ds.n();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..n {
        for j in 0..n {
            if i == j || ds.label(i) != ds.label(j) {
                continue;
            }
            pairs += 1;
            let dij = euclid(ds, m, i, j);
            let hinges: Vec<f64> = (0..n)
                .filter(|&k| ds.label(k) != ds.label(i))
                .map(|k| cfg.gamma + dij - euclid(ds, m, i, k))
                .filter(|&h| h > 0.0)
                .collect();
            let r = hinges.len();
            if r > 0 {
                let l: f64 = (1..=r).map(|s| 1.0 / s as f64).sum();
                total += l / r as f64 * hinges.iter().sum::<f64>();
            }
        }
    }
    total / pairs as f64
}

#[test]
fn exact_loss_matches_brute_force_on_six_points() {
    let ds = random_dataset(6, 2, 3, 11);
    let m = random_model(2, 3, 12);
    let cfg = LossConfig::default();
    let all: Vec<usize> = (0..6).collect();
    let pairs = build_pair_index(&ds, &all).unwrap();
    let cache = ProjectionCache::new(&m, &ds);
    let got = exact_warp_loss(&cache, &pairs, &cfg);
    let want = brute_force_loss(&ds, &m, &cfg);
    assert!(want > 0.0);
    assert!((got - want).abs() <= 1e-12 * want);
}

#[test]
fn margin_rank_counts_violators() {
    let ds = random_dataset(9, 3, 2, 5);
    let m = random_model(2, 2, 6);
    let all: Vec<usize> = (0..9).collect();
    let pairs = build_pair_index(&ds, &all).unwrap();
    let cache = ProjectionCache::new(&m, &ds);
    for &(i, j) in &pairs.same_pairs {
        let dij = euclid(&ds, &m, i, j);
        let want = (0..9)
            .filter(|&k| ds.label(k) != ds.label(i) && 1.0 + dij - euclid(&ds, &m, i, k) > 0.0)
            .count();
        assert_eq!(margin_rank(&cache, i, j, pairs.negatives_for(i), 1.0), want);
    }
}

/// Expected sampled contribution per pair, summing over the geometric
/// distribution of the first violating draw (draws unbounded).
fn expected_floor_contribution(
    pairs: &PairIndex,
    dist: &dyn Fn(usize, usize) -> f64,
    weighting: &RankWeighting,
    gamma: f64,
) -> f64 {
    let mut total = 0.0;
    for &(i, j) in &pairs.same_pairs {
        let neg = pairs.negatives_for(i);
        let dij = dist(i, j);
        let hinges: Vec<f64> = neg
            .iter()
            .map(|&k| gamma + dij - dist(i, k))
            .filter(|&h| h > 0.0)
            .collect();
        if hinges.is_empty() {
            continue;
        }
        let p = hinges.len() as f64 / neg.len() as f64;
        let mean_hinge = hinges.iter().sum::<f64>() / hinges.len() as f64;
        let mut t = 1;
        let mut miss = 1.0;
        while miss > 1e-18 {
            let prob = miss * p;
            total += prob * weighting.weight(rank_from_draws(neg.len(), t)) * mean_hinge;
            miss *= 1.0 - p;
            t += 1;
        }
    }
    total / pairs.same_pairs.len() as f64
}

#[test]
fn sampler_matches_its_enumerated_expectation() {
    let ds = random_dataset(12, 3, 4, 21);
    let m = random_model(3, 4, 22);
    let all: Vec<usize> = (0..12).collect();
    let pairs = build_pair_index(&ds, &all).unwrap();
    let cache = ProjectionCache::new(&m, &ds);
    let cfg = LossConfig {
        max_draws: Some(100_000),
        ..LossConfig::default()
    };
    let dist = |a: usize, b: usize| euclid(&ds, &m, a, b);
    let want = expected_floor_contribution(&pairs, &dist, &cfg.weighting, cfg.gamma);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let trials = 200_000;
    let samples: Vec<f64> = (0..trials)
        .map(|_| {
            sample_triplet(&mut rng, &pairs, &cache, &cfg)
                .map(|t| triplet_contribution(&t, &cfg.weighting))
                .unwrap_or(0.0)
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / trials as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    let se = (var / trials as f64).sqrt();
    assert!((mean - want).abs() < 4.0 * se, "mean {mean} want {want} se {se}");
}

#[test]
fn sampler_respects_draw_cap_and_pair_support() {
    let ds = random_dataset(12, 3, 4, 31);
    let m = random_model(3, 4, 32);
    let all: Vec<usize> = (0..12).collect();
    let pairs = build_pair_index(&ds, &all).unwrap();
    let cache = ProjectionCache::new(&m, &ds);
    let cfg = LossConfig {
        max_draws: Some(2),
        ..LossConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2000 {
        if let Some(t) = sample_triplet(&mut rng, &pairs, &cache, &cfg) {
            assert!(t.draws <= 2);
            assert!(t.hinge > 0.0);
            assert_eq!(ds.label(t.i), ds.label(t.j));
            assert_ne!(ds.label(t.i), ds.label(t.k));
            assert_eq!(t.rank_estimate, rank_from_draws(pairs.negatives_for(t.i).len(), t.draws));
        }
    }
}

proptest! {
    #[test]
    fn projected_distance_is_a_pseudo_metric(
        seed in 0u64..1000,
        d_out in 1usize..4,
    ) {
        let ds = random_dataset(3, 3, 4, seed);
        let m = random_model(d_out, 4, seed + 1);
        let (a, b, c) = (euclid(&ds, &m, 0, 1), euclid(&ds, &m, 1, 2), euclid(&ds, &m, 0, 2));
        prop_assert!(a >= 0.0);
        prop_assert_eq!(euclid(&ds, &m, 0, 0), 0.0);
        prop_assert!((a - euclid(&ds, &m, 1, 0)).abs() <= 1e-15 * (1.0 + a));
        prop_assert!(c <= a + b + 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_and_vanishes_when_margins_hold(seed in 0u64..500) {
        let ds = random_dataset(8, 2, 3, seed);
        let all: Vec<usize> = (0..8).collect();
        let pairs = build_pair_index(&ds, &all).unwrap();
        let m = random_model(2, 3, seed + 7);
        let cache = ProjectionCache::new(&m, &ds);
        let cfg = LossConfig::default();
        prop_assert!(exact_warp_loss(&cache, &pairs, &cfg) >= 0.0);
        // zero margin with an all-zero metric: every hinge is exactly 0
        let zero = LossConfig { gamma: 0.0, ..LossConfig::default() };
        let collapse = |_: usize, _: usize| 0.0;
        prop_assert_eq!(exact_warp_loss(&collapse, &pairs, &zero), 0.0);
    }

    #[test]
    fn harmonic_weight_is_concave_and_increasing(r in 1usize..500) {
        let w = RankWeighting::Harmonic;
        let (a, b, c) = (w.weight(r), w.weight(r + 1), w.weight(r + 2));
        prop_assert!(b > a);
        prop_assert!(c - b <= b - a);
    }
}
