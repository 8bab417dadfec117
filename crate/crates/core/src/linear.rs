//! Linear metric learning: a `D′×D` projection `W` trained by mini-batch
//! stochastic sub-gradient steps on the sampled hinge loss plus a regularizer.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVectorView};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{build_pair_index, LabeledDataset, PairIndex};
use crate::error::{Error, Result};
use crate::ranking::{exact_warp_loss, sample_triplet, LossConfig, PairDistance, TripletSample};
use crate::seed::derive_seed;

/// Distances below this are treated as degenerate; the triplet is skipped.
pub const DISTANCE_FLOOR: f64 = 1e-12;

pub(crate) const SAMPLER_STREAM: u64 = 1;
pub(crate) const INIT_STREAM: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearMetricModel {
    w: DMatrix<f64>,
}

impl LinearMetricModel {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() == 0 || w.nrows() > w.ncols() {
            return Err(Error::Config(format!(
                "projection must satisfy 1 <= d_out <= d_in, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("projection has non-finite entries".into()));
        }
        Ok(Self { w })
    }

    /// The identity map, i.e. plain Euclidean distance.
    pub fn identity(d: usize) -> Self {
        Self {
            w: DMatrix::identity(d, d),
        }
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn d_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w.nrows()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in() {
            return Err(Error::DimensionMismatch {
                expected: self.d_in(),
                got: x.len(),
            });
        }
        Ok(self.project_unchecked(x))
    }

    pub(crate) fn project_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let v = DVectorView::from_slice(x, x.len());
        (&self.w * v).data.into()
    }
}

/// Orthonormal-row initialization from a seeded Gaussian matrix.
pub fn init_model(d_in: usize, d_out: usize, seed: u64) -> Result<LinearMetricModel> {
    if d_out == 0 || d_out > d_in {
        return Err(Error::Config(format!(
            "need 1 <= d_out <= d_in, got d_out={d_out}, d_in={d_in}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(d_in, d_out, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    LinearMetricModel::new(q.transpose())
}

/// `‖W(xi − xj)‖₂`.
pub fn distance(m: &LinearMetricModel, xi: &[f64], xj: &[f64]) -> Result<f64> {
    if xi.len() != m.d_in() || xj.len() != m.d_in() {
        return Err(Error::DimensionMismatch {
            expected: m.d_in(),
            got: if xi.len() != m.d_in() { xi.len() } else { xj.len() },
        });
    }
    let diff: Vec<f64> = xi.iter().zip(xj).map(|(a, b)| a - b).collect();
    Ok(norm(&m.project_unchecked(&diff)))
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gram_minus_identity(w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = w * w.transpose();
    for r in 0..g.nrows() {
        g[(r, r)] -= 1.0;
    }
    g
}

/// `(λ/2)‖W Wᵀ − I‖²_F`.
pub fn aon_penalty(m: &LinearMetricModel, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    0.5 * lambda * gram_minus_identity(&m.w).norm_squared()
}

/// `2λ(W Wᵀ − I)W`.
pub fn aon_gradient(m: &LinearMetricModel, lambda: f64) -> DMatrix<f64> {
    if lambda == 0.0 {
        return DMatrix::zeros(m.d_out(), m.d_in());
    }
    gram_minus_identity(&m.w) * &m.w * (2.0 * lambda)
}

/// `(λ/2)‖W‖²_F`.
pub fn frobenius_penalty(m: &LinearMetricModel, lambda: f64) -> f64 {
    0.5 * lambda * m.w.norm_squared()
}

/// `λW`.
pub fn frobenius_gradient(m: &LinearMetricModel, lambda: f64) -> DMatrix<f64> {
    &m.w * lambda
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    Aon,
    Frobenius,
}

impl Regularizer {
    pub fn penalty(self, m: &LinearMetricModel, lambda: f64) -> f64 {
        match self {
            Regularizer::Aon => aon_penalty(m, lambda),
            Regularizer::Frobenius => frobenius_penalty(m, lambda),
        }
    }

    pub fn gradient(self, m: &LinearMetricModel, lambda: f64) -> DMatrix<f64> {
        match self {
            Regularizer::Aon => aon_gradient(m, lambda),
            Regularizer::Frobenius => frobenius_gradient(m, lambda),
        }
    }
}

/// A triplet whose distances are too small for the sub-gradient to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegenerateTriplet;

/// Sub-gradient of `weight · |γ + d(xi,xj) − d(xi,xk)|₊` with respect to `W`.
///
/// Zero when the hinge is inactive (including the kink).
pub fn triplet_subgradient(
    m: &LinearMetricModel,
    xi: &[f64],
    xj: &[f64],
    xk: &[f64],
    weight: f64,
    gamma: f64,
) -> std::result::Result<DMatrix<f64>, DegenerateTriplet> {
    let vij: Vec<f64> = xi.iter().zip(xj).map(|(a, b)| a - b).collect();
    let vik: Vec<f64> = xi.iter().zip(xk).map(|(a, b)| a - b).collect();
    let uij = m.project_unchecked(&vij);
    let uik = m.project_unchecked(&vik);
    let (dij, dik) = (norm(&uij), norm(&uik));
    let mut g = DMatrix::zeros(m.d_out(), m.d_in());
    if gamma + dij - dik <= 0.0 {
        return Ok(g);
    }
    if dij < DISTANCE_FLOOR || dik < DISTANCE_FLOOR {
        return Err(DegenerateTriplet);
    }
    for c in 0..m.d_in() {
        for r in 0..m.d_out() {
            g[(r, c)] = weight * (uij[r] * vij[c] / dij - uik[r] * vik[c] / dik);
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: DMatrix<f64>,
    pub second_moment: DMatrix<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            first_moment: DMatrix::zeros(rows, cols),
            second_moment: DMatrix::zeros(rows, cols),
            step_count: 0,
        }
    }

    /// In-place bias-corrected Adam update of `params`.
    pub fn apply(&mut self, params: &mut DMatrix<f64>, grad: &DMatrix<f64>, eta: f64, hp: &AdamParams) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - hp.beta1.powi(t);
        let c2 = 1.0 - hp.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad.iter())
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= eta * m_hat / (v_hat.sqrt() + hp.epsilon);
        }
    }
}

/// Functional form of [`AdamState::apply`].
pub fn adam_step(
    state: &AdamState,
    params: &DMatrix<f64>,
    grad: &DMatrix<f64>,
    eta: f64,
    hp: &AdamParams,
) -> Result<(DMatrix<f64>, AdamState)> {
    if params.shape() != grad.shape() || params.shape() != state.first_moment.shape() {
        return Err(Error::Validation(format!(
            "shape mismatch: params {:?}, grad {:?}, state {:?}",
            params.shape(),
            grad.shape(),
            state.first_moment.shape()
        )));
    }
    let mut next = state.clone();
    let mut out = params.clone();
    next.apply(&mut out, grad, eta, hp);
    Ok((out, next))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam(AdamParams),
    /// Plain stochastic gradient descent, `W ← W − η g`.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub regularizer: Regularizer,
    pub eta: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub d_out: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Largest training set the kernel path accepts (Gram matrix is `N²`).
    pub kernel_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            regularizer: Regularizer::Aon,
            eta: 1e-2,
            batch_size: 512,
            iterations: 2000,
            d_out: 40,
            seed: 0,
            optimizer: Optimizer::Adam(AdamParams::default()),
            kernel_cap: 20_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.d_out == 0 {
            return Err(Error::Config("d_out must be >= 1".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if let Optimizer::Adam(hp) = &self.optimizer {
            let beta_ok = |b: f64| (0.0..1.0).contains(&b);
            if !beta_ok(hp.beta1) || !beta_ok(hp.beta2) || hp.epsilon.is_nan() || hp.epsilon <= 0.0 {
                return Err(Error::Config(
                    "adam needs 0 <= beta1, beta2 < 1 and epsilon > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Projections of dataset rows under a fixed model, computed on first use.
pub struct ProjectionCache<'a> {
    model: &'a LinearMetricModel,
    ds: &'a LabeledDataset,
    cells: Vec<OnceLock<Vec<f64>>>,
}

impl<'a> ProjectionCache<'a> {
    pub fn new(model: &'a LinearMetricModel, ds: &'a LabeledDataset) -> Self {
        Self {
            model,
            ds,
            cells: (0..ds.n()).map(|_| OnceLock::new()).collect(),
        }
    }

    /// Fills the cache for `indices` with one matrix product.
    pub fn prefetch(&self, indices: &[usize]) {
        let d = self.ds.d();
        let cols: Vec<f64> = indices.iter().flat_map(|&i| self.ds.row(i).iter().copied()).collect();
        let x = DMatrix::from_column_slice(d, indices.len(), &cols);
        let p = self.model.w() * x;
        for (c, &i) in indices.iter().enumerate() {
            let _ = self.cells[i].set(p.column(c).iter().copied().collect());
        }
    }

    pub fn get(&self, i: usize) -> &[f64] {
        self.cells[i].get_or_init(|| self.model.project_unchecked(self.ds.row(i)))
    }
}

impl PairDistance for ProjectionCache<'_> {
    fn distance(&self, a: usize, b: usize) -> f64 {
        self.get(a)
            .iter()
            .zip(self.get(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

/// Regularizer value plus exact data term over `pairs`.
pub fn objective(
    m: &LinearMetricModel,
    ds: &LabeledDataset,
    pairs: &PairIndex,
    cfg: &LossConfig,
    regularizer: Regularizer,
) -> (f64, f64) {
    let cache = ProjectionCache::new(m, ds);
    (regularizer.penalty(m, cfg.lambda), exact_warp_loss(&cache, pairs, cfg))
}

/// Data-term gradient of a batch of sampled triplets, normalized by
/// `batch_size`.
///
/// Each triplet contributes `a (x_i − x_j)ᵀ − b (x_i − x_k)ᵀ`, so the sum is
/// regrouped per touched point as `C X_touchedᵀ` with
/// `C[i] += a − b`, `C[j] −= a`, `C[k] += b`.
pub(crate) fn batch_data_gradient(
    m: &LinearMetricModel,
    ds: &LabeledDataset,
    cache: &ProjectionCache<'_>,
    triplets: &[TripletSample],
    rank_weights: &[f64],
    batch_size: usize,
) -> (DMatrix<f64>, usize) {
    let dout = m.d_out();
    let mut slot = vec![usize::MAX; ds.n()];
    let mut touched: Vec<usize> = Vec::new();
    let mut coef: Vec<f64> = Vec::new();
    let mut slot_of = |p: usize, coef: &mut Vec<f64>| {
        if slot[p] == usize::MAX {
            slot[p] = touched.len();
            touched.push(p);
            coef.resize(coef.len() + dout, 0.0);
        }
        slot[p] * dout
    };
    let mut used = 0;
    for t in triplets {
        let (pi, pj, pk) = (cache.get(t.i), cache.get(t.j), cache.get(t.k));
        let uij: Vec<f64> = pi.iter().zip(pj).map(|(a, b)| a - b).collect();
        let uik: Vec<f64> = pi.iter().zip(pk).map(|(a, b)| a - b).collect();
        let (dij, dik) = (norm(&uij), norm(&uik));
        if dij < DISTANCE_FLOOR || dik < DISTANCE_FLOOR {
            continue;
        }
        used += 1;
        let c = rank_weights[t.rank_estimate] / batch_size as f64;
        let (ca, cb) = (c / dij, c / dik);
        let (si, sj, sk) = (
            slot_of(t.i, &mut coef),
            slot_of(t.j, &mut coef),
            slot_of(t.k, &mut coef),
        );
        for r in 0..dout {
            let (a, b) = (ca * uij[r], cb * uik[r]);
            coef[si + r] += a - b;
            coef[sj + r] -= a;
            coef[sk + r] += b;
        }
    }
    if used == 0 {
        return (DMatrix::zeros(dout, m.d_in()), 0);
    }
    let c = DMatrix::from_vec(dout, touched.len(), coef);
    let rows: Vec<f64> = touched.iter().flat_map(|&p| ds.row(p).iter().copied()).collect();
    let x = DMatrix::from_row_slice(touched.len(), m.d_in(), &rows);
    (c * x, used)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub iterations_run: usize,
    /// Set when a batch found no violating triplet and training stopped.
    pub converged_early: bool,
    pub final_penalty: f64,
}

/// Per-update hook: `(iteration, model after the update, triplets used)`.
pub type Observer<'o, M> = &'o mut dyn FnMut(usize, &M, usize);

pub fn train(
    ds: &LabeledDataset,
    train_indices: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<LinearMetricModel>> {
    cfg.validate()?;
    let init = init_model(ds.d(), cfg.d_out, derive_seed(cfg.seed, INIT_STREAM))?;
    train_from(ds, train_indices, cfg, init, &mut |_, _, _| {})
}

/// Runs the training loop from a given starting model.
pub fn train_from(
    ds: &LabeledDataset,
    train_indices: &[usize],
    cfg: &TrainConfig,
    init: LinearMetricModel,
    observer: Observer<'_, LinearMetricModel>,
) -> Result<TrainOutcome<LinearMetricModel>> {
    cfg.validate()?;
    if init.d_in() != ds.d() {
        return Err(Error::DimensionMismatch {
            expected: ds.d(),
            got: init.d_in(),
        });
    }
    let pairs = build_pair_index(ds, train_indices)?;
    let max_neg = pairs.negatives_by_label.values().map(Vec::len).max().unwrap_or(0);
    let rank_weights = cfg.loss.weighting.table(max_neg.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SAMPLER_STREAM));
    let mut model = init;
    let mut adam = AdamState::new(model.d_out(), model.d_in());
    let prefetch_all = train_indices.len() <= 4 * cfg.batch_size;
    let mut iterations_run = 0;
    let mut converged_early = false;

    for it in 0..cfg.iterations {
        let (grad, used) = {
            let cache = ProjectionCache::new(&model, ds);
            if prefetch_all {
                cache.prefetch(train_indices);
            }
            let triplets: Vec<TripletSample> = (0..cfg.batch_size)
                .filter_map(|_| sample_triplet(&mut rng, &pairs, &cache, &cfg.loss))
                .collect();
            if triplets.is_empty() {
                converged_early = true;
                break;
            }
            let (mut g, used) =
                batch_data_gradient(&model, ds, &cache, &triplets, &rank_weights, cfg.batch_size);
            g += cfg.regularizer.gradient(&model, cfg.loss.lambda);
            (g, used)
        };
        match &cfg.optimizer {
            Optimizer::Adam(hp) => adam.apply(&mut model.w, &grad, cfg.eta, hp),
            Optimizer::Sgd => model.w -= grad * cfg.eta,
        }
        if model.w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "projection diverged at iteration {}",
                it + 1
            )));
        }
        iterations_run = it + 1;
        observer(iterations_run, &model, used);
    }
    let final_penalty = cfg.regularizer.penalty(&model, cfg.loss.lambda);
    Ok(TrainOutcome {
        model,
        iterations_run,
        converged_early,
        final_penalty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn init_is_orthonormal_and_deterministic() {
        let m = init_model(10, 4, 3).unwrap();
        let g = m.w() * m.w().transpose() - DMatrix::identity(4, 4);
        assert!(max_abs(&g) < 1e-10);
        assert_eq!(m, init_model(10, 4, 3).unwrap());
        assert_ne!(m, init_model(10, 4, 4).unwrap());
        assert!(init_model(3, 4, 0).is_err());
    }

    #[test]
    fn square_init_has_unit_determinant() {
        let m = init_model(3, 3, 17).unwrap();
        assert!((m.w().determinant().abs() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn distance_examples() {
        let id = LinearMetricModel::identity(2);
        assert_eq!(distance(&id, &[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(distance(&id, &[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let m = LinearMetricModel::new(DMatrix::from_row_slice(1, 2, &[2.0, 0.0])).unwrap();
        assert_eq!(distance(&m, &[1.0, 1.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert!(distance(&m, &[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn aon_penalty_examples() {
        let m = init_model(6, 3, 1).unwrap();
        assert!(aon_penalty(&m, 1.0) < 1e-20);
        let d = LinearMetricModel::new(DMatrix::from_diagonal(&nalgebra::dvector![2.0, 1.0])).unwrap();
        assert!((aon_penalty(&d, 1.0) - 4.5).abs() < 1e-12);
        assert_eq!(aon_penalty(&d, 0.0), 0.0);
        assert!(max_abs(&aon_gradient(&m, 1.0)) < 1e-10);
        assert_eq!(max_abs(&aon_gradient(&d, 0.0)), 0.0);
    }

    #[test]
    fn frobenius_examples() {
        let z = LinearMetricModel {
            w: DMatrix::zeros(2, 3),
        };
        assert_eq!(max_abs(&frobenius_gradient(&z, 1.0)), 0.0);
        let i2 = LinearMetricModel::identity(2);
        assert_eq!(frobenius_gradient(&i2, 2.0), DMatrix::identity(2, 2) * 2.0);
    }

    #[test]
    fn inactive_hinge_and_equal_negatives_give_zero() {
        let m = init_model(4, 2, 5).unwrap();
        let xi = [0.0, 0.0, 0.0, 0.0];
        let xj = [0.1, 0.0, 0.0, 0.0];
        let xk = [10.0, 10.0, 10.0, 10.0];
        let g = triplet_subgradient(&m, &xi, &xj, &xk, 1.0, 1.0).unwrap();
        assert_eq!(max_abs(&g), 0.0);
        let xj = [1.0, 2.0, -1.0, 0.5];
        let g = triplet_subgradient(&m, &xi, &xj, &xj, 1.0, 1.0).unwrap();
        assert_eq!(max_abs(&g), 0.0);
    }

    #[test]
    fn degenerate_triplet_is_flagged() {
        let m = init_model(3, 2, 5).unwrap();
        let x = [1.0, 2.0, 3.0];
        let far = [1.0, 2.5, 3.0];
        assert_eq!(
            triplet_subgradient(&m, &x, &x, &far, 1.0, 1.0),
            Err(DegenerateTriplet)
        );
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let s = AdamState::new(2, 2);
        let (q, s2) = adam_step(&s, &p, &DMatrix::zeros(2, 2), 0.1, &AdamParams::default()).unwrap();
        assert_eq!(q, p);
        assert_eq!(s2.step_count, 1);
        assert!(adam_step(&s, &p, &DMatrix::zeros(1, 2), 0.1, &AdamParams::default()).is_err());
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_eta() {
        let hp = AdamParams::default();
        let mut p = DMatrix::from_element(1, 2, 0.0);
        let g = DMatrix::from_row_slice(1, 2, &[0.3, -2.0]);
        let mut s = AdamState::new(1, 2);
        let mut last = p.clone();
        for _ in 0..5000 {
            last.copy_from(&p);
            s.apply(&mut p, &g, 0.01, &hp);
        }
        let step = &last - &p;
        assert!((step[(0, 0)] - 0.01).abs() < 1e-6);
        assert!((step[(0, 1)] + 0.01).abs() < 1e-6);
        assert!(s.second_moment.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
