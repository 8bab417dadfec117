//! Kernelized metric learning with `W = A Xᵀ`.
//!
//! Distances only depend on Gram columns: `d(i,j) = ‖A(κ_i − κ_j)‖`. Training
//! uses the sub-gradient preconditioned by `K⁻¹`, which turns the data term of
//! one triplet into a rank-two update touching only columns `i`, `j` and `k`
//! of `A`. The projections `P = A K` of the training points are maintained
//! alongside `A`, so neither `K⁻¹` nor a dense `A K` product is needed per
//! step.

use nalgebra::{DMatrix, DVectorView};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_pair_index, LabeledDataset, PairIndex};
use crate::error::{Error, Result};
use crate::linear::{
    norm, DegenerateTriplet, LinearMetricModel, Observer, Regularizer, TrainConfig, TrainOutcome,
    DISTANCE_FLOOR, INIT_STREAM, SAMPLER_STREAM,
};
use crate::ranking::{exact_warp_loss, sample_triplet, PairDistance, TripletSample};
use crate::seed::derive_seed;

/// Batches between full recomputations of `P = A K`.
const REFRESH_EVERY: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Chi2,
    Rbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// RBF bandwidth σ in `exp(−‖x−y‖²/2σ²)`; unused otherwise.
    pub bandwidth: f64,
    /// Denominator guard for χ².
    pub eps: f64,
}

impl KernelSpec {
    pub fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            bandwidth: 1.0,
            eps: 1e-12,
        }
    }

    pub fn chi2() -> Self {
        Self {
            kind: KernelKind::Chi2,
            ..Self::linear()
        }
    }

    pub fn rbf(bandwidth: f64) -> Self {
        Self {
            kind: KernelKind::Rbf,
            bandwidth,
            ..Self::linear()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == KernelKind::Rbf && !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Config(format!(
                "rbf bandwidth must be > 0, got {}",
                self.bandwidth
            )));
        }
        if self.eps.is_nan() || self.eps < 0.0 {
            return Err(Error::Config("chi2 eps must be >= 0".into()));
        }
        Ok(())
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(match spec.kind {
        KernelKind::Linear => x.iter().zip(y).map(|(a, b)| a * b).sum(),
        KernelKind::Chi2 => {
            if x.iter().chain(y).any(|v| *v < 0.0) {
                return Err(Error::Domain("chi2 kernel needs nonnegative inputs".into()));
            }
            x.iter()
                .zip(y)
                .map(|(a, b)| {
                    let s = a + b;
                    if s == 0.0 {
                        0.0
                    } else {
                        2.0 * a * b / (s + spec.eps)
                    }
                })
                .sum()
        }
        KernelKind::Rbf => {
            let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            (-sq / (2.0 * spec.bandwidth * spec.bandwidth)).exp()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub k: DMatrix<f64>,
    pub spec: KernelSpec,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    /// Column `i`, i.e. `κ_i`.
    pub fn column(&self, i: usize) -> &[f64] {
        let n = self.n();
        &self.k.as_slice()[i * n..(i + 1) * n]
    }
}

/// Pairwise kernel values over the rows of `ds`. Each unordered pair is
/// evaluated once and mirrored.
pub fn gram_matrix(spec: &KernelSpec, ds: &LabeledDataset) -> Result<GramMatrix> {
    spec.validate()?;
    let n = ds.n();
    if spec.kind == KernelKind::Chi2 {
        if let Some(i) = (0..n).find(|&i| ds.row(i).iter().any(|v| *v < 0.0)) {
            return Err(Error::Domain(format!(
                "chi2 kernel needs nonnegative inputs (row {i})"
            )));
        }
    }
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|a| {
            (a..n)
                .map(|b| kernel_eval(spec, ds.row(a), ds.row(b)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut k = DMatrix::zeros(n, n);
    for (a, row) in upper.iter().enumerate() {
        for (off, v) in row.iter().enumerate() {
            k[(a, a + off)] = *v;
            k[(a + off, a)] = *v;
        }
    }
    Ok(GramMatrix { k, spec: *spec })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMetricModel {
    a: DMatrix<f64>,
    spec: KernelSpec,
    basis: Vec<f64>,
    d: usize,
}

impl KernelMetricModel {
    /// `basis` is row-major `N×d` with `N = a.ncols()`.
    pub fn new(a: DMatrix<f64>, spec: KernelSpec, basis: Vec<f64>, d: usize) -> Result<Self> {
        spec.validate()?;
        if d == 0 || basis.len() != a.ncols() * d {
            return Err(Error::Validation(format!(
                "basis holds {} values, expected {} rows of dimension {d}",
                basis.len(),
                a.ncols()
            )));
        }
        if a.iter().chain(&basis).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("kernel model has non-finite entries".into()));
        }
        Ok(Self { a, spec, basis, d })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn a_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.a
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn basis_row(&self, n: usize) -> &[f64] {
        &self.basis[n * self.d..(n + 1) * self.d]
    }

    pub fn n_basis(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_in(&self) -> usize {
        self.d
    }

    pub fn d_out(&self) -> usize {
        self.a.nrows()
    }

    /// `W = A Xᵀ`, only meaningful for the linear kernel.
    pub fn linear_equivalent(&self) -> Result<LinearMetricModel> {
        if self.spec.kind != KernelKind::Linear {
            return Err(Error::Config("only a linear kernel has an explicit W".into()));
        }
        let x = DMatrix::from_row_slice(self.n_basis(), self.d, &self.basis);
        LinearMetricModel::new(&self.a * x)
    }
}

/// `‖A(κ_i − κ_j)‖₂`.
pub fn kernel_distance(m: &KernelMetricModel, ki: &[f64], kj: &[f64]) -> Result<f64> {
    let n = m.n_basis();
    if ki.len() != n || kj.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: if ki.len() != n { ki.len() } else { kj.len() },
        });
    }
    let diff: Vec<f64> = ki.iter().zip(kj).map(|(a, b)| a - b).collect();
    let p = &m.a * DVectorView::from_slice(&diff, n);
    Ok(p.norm())
}

/// `(λ/2)‖A K Aᵀ − I‖²_F`.
pub fn aon_kernel_penalty(m: &KernelMetricModel, k: &GramMatrix, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let mut g = &m.a * &k.k * m.a.transpose();
    for r in 0..g.nrows() {
        g[(r, r)] -= 1.0;
    }
    0.5 * lambda * g.norm_squared()
}

/// `A κ(x)` with `κ(x)_n = k(basis_n, x)`.
pub fn project_new(m: &KernelMetricModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != m.d {
        return Err(Error::DimensionMismatch {
            expected: m.d,
            got: x.len(),
        });
    }
    let kx = (0..m.n_basis())
        .map(|n| kernel_eval(&m.spec, m.basis_row(n), x))
        .collect::<Result<Vec<_>>>()?;
    Ok((&m.a * DVectorView::from_slice(&kx, kx.len())).data.into())
}

/// `E_ijk = (e_i−e_j)(e_i−e_j)ᵀ/d_ij − (e_i−e_k)(e_i−e_k)ᵀ/d_ik`, materialized.
pub fn explicit_e_matrix(n: usize, i: usize, j: usize, k: usize, dij: f64, dik: f64) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n, n);
    for (a, sa) in [(i, 1.0), (j, -1.0)] {
        for (b, sb) in [(i, 1.0), (j, -1.0)] {
            e[(a, b)] += sa * sb / dij;
        }
    }
    for (a, sa) in [(i, 1.0), (k, -1.0)] {
        for (b, sb) in [(i, 1.0), (k, -1.0)] {
            e[(a, b)] -= sa * sb / dik;
        }
    }
    e
}

/// Column `c` of `A K`, i.e. `A κ_c`.
fn projected_column(a: &DMatrix<f64>, k: &GramMatrix, c: usize) -> Vec<f64> {
    (a * DVectorView::from_slice(k.column(c), k.n())).data.into()
}

/// Data-term ingredients of one triplet: unit directions in output space.
struct SparseTerm {
    i: usize,
    j: usize,
    k: usize,
    /// Step multiplier `η · L(rank)` (already divided by the batch size).
    scale: f64,
    u: Vec<f64>,
    w: Vec<f64>,
}

impl SparseTerm {
    fn new(
        t: &TripletSample,
        pi: &[f64],
        pj: &[f64],
        pk: &[f64],
        scale: f64,
    ) -> std::result::Result<Self, DegenerateTriplet> {
        let uij: Vec<f64> = pi.iter().zip(pj).map(|(a, b)| a - b).collect();
        let uik: Vec<f64> = pi.iter().zip(pk).map(|(a, b)| a - b).collect();
        let (dij, dik) = (norm(&uij), norm(&uik));
        if dij < DISTANCE_FLOOR || dik < DISTANCE_FLOOR {
            return Err(DegenerateTriplet);
        }
        Ok(Self {
            i: t.i,
            j: t.j,
            k: t.k,
            scale,
            u: uij.into_iter().map(|v| v / dij).collect(),
            w: uik.into_iter().map(|v| v / dik).collect(),
        })
    }

    /// `A −= scale · A K E_ijk`; touches columns i, j, k only.
    fn apply_to_a(&self, a: &mut DMatrix<f64>) {
        for r in 0..a.nrows() {
            let (u, w) = (self.scale * self.u[r], self.scale * self.w[r]);
            a[(r, self.i)] -= u - w;
            a[(r, self.j)] += u;
            a[(r, self.k)] -= w;
        }
    }

    /// The matching change of column `n` of `P = A K`.
    fn apply_to_p_column(&self, col: &mut [f64], k: &GramMatrix, n: usize) {
        let kin = k.k[(n, self.i)];
        let cu = self.scale * (kin - k.k[(n, self.j)]);
        let cw = self.scale * (kin - k.k[(n, self.k)]);
        for ((p, u), w) in col.iter_mut().zip(&self.u).zip(&self.w) {
            *p -= cu * u - cw * w;
        }
    }
}

/// Dense regularizer factor `M` such that the preconditioned regularizer step
/// is `A ← M A`.
fn regularizer_factor(
    regularizer: Regularizer,
    a: &DMatrix<f64>,
    p: &DMatrix<f64>,
    eta: f64,
    lambda: f64,
) -> Option<DMatrix<f64>> {
    if lambda == 0.0 {
        return None;
    }
    let dout = a.nrows();
    Some(match regularizer {
        Regularizer::Aon => {
            // I − 2λη(A K Aᵀ − I), with A K Aᵀ = P Aᵀ
            let mut m = p * a.transpose() * (-2.0 * lambda * eta);
            for r in 0..dout {
                m[(r, r)] += 1.0 + 2.0 * lambda * eta;
            }
            m
        }
        Regularizer::Frobenius => DMatrix::identity(dout, dout) * (1.0 - lambda * eta),
    })
}

/// One preconditioned step for a single sampled triplet:
/// `A ← (I − 2λη(AKAᵀ − I))A − η L A K E_ijk`.
///
/// `weight` is `L(rank)`. The data term only modifies columns `i`, `j`, `k`.
pub fn preconditioned_update(
    m: &mut KernelMetricModel,
    k: &GramMatrix,
    t: &TripletSample,
    weight: f64,
    eta: f64,
    lambda: f64,
) -> std::result::Result<(), DegenerateTriplet> {
    let pi = projected_column(&m.a, k, t.i);
    let pj = projected_column(&m.a, k, t.j);
    let pk = projected_column(&m.a, k, t.k);
    // the indicator 1{γ + ξ > 0} switches the data term off
    let weight = if t.hinge > 0.0 { weight } else { 0.0 };
    let term = SparseTerm::new(t, &pi, &pj, &pk, eta * weight)?;
    if lambda != 0.0 {
        let p = &m.a * &k.k;
        if let Some(factor) = regularizer_factor(Regularizer::Aon, &m.a, &p, eta, lambda) {
            m.a = factor * &m.a;
        }
    }
    term.apply_to_a(&mut m.a);
    Ok(())
}

/// `2λ(AKAᵀ − I)A + L·A K E_ijk`, the preconditioned direction of one
/// triplet as a dense matrix (used for checks, not in training).
pub fn preconditioned_direction(
    m: &KernelMetricModel,
    k: &GramMatrix,
    t: &TripletSample,
    weight: f64,
    lambda: f64,
) -> std::result::Result<DMatrix<f64>, DegenerateTriplet> {
    let ak = &m.a * &k.k;
    let (pi, pj, pk) = (ak.column(t.i), ak.column(t.j), ak.column(t.k));
    let (dij, dik) = ((pi - pj).norm(), (pi - pk).norm());
    if dij < DISTANCE_FLOOR || dik < DISTANCE_FLOOR {
        return Err(DegenerateTriplet);
    }
    let e = explicit_e_matrix(k.n(), t.i, t.j, t.k, dij, dik);
    let mut g = &ak * m.a.transpose();
    for r in 0..g.nrows() {
        g[(r, r)] -= 1.0;
    }
    Ok(g * &m.a * (2.0 * lambda) + &ak * e * weight)
}

/// Distances from a projection matrix whose columns are embedded points.
pub struct ColumnDistance<'a>(pub &'a DMatrix<f64>);

impl PairDistance for ColumnDistance<'_> {
    fn distance(&self, a: usize, b: usize) -> f64 {
        self.0
            .column(a)
            .iter()
            .zip(self.0.column(b).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

/// Seeded Gaussian `A` scaled by `1/sqrt(N · mean(diag K))`.
pub fn init_coefficients(d_out: usize, k: &GramMatrix, seed: u64) -> DMatrix<f64> {
    let n = k.n();
    let mean_diag = (0..n).map(|i| k.k[(i, i)]).sum::<f64>() / n as f64;
    let scale = 1.0 / (n as f64 * mean_diag.max(f64::MIN_POSITIVE)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(d_out, n, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    })
}

/// Mini-batch preconditioned training state over a local training set
/// (indices `0..N` of `data`).
pub struct KernelTrainer {
    data: LabeledDataset,
    gram: GramMatrix,
    pairs: PairIndex,
    a: DMatrix<f64>,
    p: DMatrix<f64>,
    cfg: TrainConfig,
    rank_weights: Vec<f64>,
    rng: ChaCha8Rng,
    batches: usize,
}

impl KernelTrainer {
    pub fn new(data: LabeledDataset, gram: GramMatrix, cfg: &TrainConfig, a0: DMatrix<f64>) -> Result<Self> {
        cfg.validate()?;
        if gram.n() != data.n() || a0.ncols() != data.n() {
            return Err(Error::DimensionMismatch {
                expected: data.n(),
                got: if gram.n() != data.n() { gram.n() } else { a0.ncols() },
            });
        }
        let all: Vec<usize> = (0..data.n()).collect();
        let pairs = build_pair_index(&data, &all)?;
        let max_neg = pairs.negatives_by_label.values().map(Vec::len).max().unwrap_or(0);
        let rank_weights = cfg.loss.weighting.table(max_neg.max(1));
        let p = &a0 * &gram.k;
        Ok(Self {
            data,
            gram,
            pairs,
            a: a0,
            p,
            cfg: cfg.clone(),
            rank_weights,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SAMPLER_STREAM)),
            batches: 0,
        })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Current projections `A K` of the training points.
    pub fn projections(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn gram(&self) -> &GramMatrix {
        &self.gram
    }

    pub fn pairs(&self) -> &PairIndex {
        &self.pairs
    }

    pub fn data(&self) -> &LabeledDataset {
        &self.data
    }

    /// One mini-batch update. Returns the number of triplets applied, or
    /// `None` when the batch found no violator at all.
    pub fn step(&mut self) -> Option<usize> {
        let cfg = &self.cfg;
        let batch = cfg.batch_size;
        let triplets: Vec<TripletSample> = {
            let dist = ColumnDistance(&self.p);
            (0..batch)
                .filter_map(|_| sample_triplet(&mut self.rng, &self.pairs, &dist, &cfg.loss))
                .collect()
        };
        if triplets.is_empty() {
            return None;
        }
        let terms: Vec<SparseTerm> = triplets
            .iter()
            .filter_map(|t| {
                let scale = cfg.eta * self.rank_weights[t.rank_estimate] / batch as f64;
                SparseTerm::new(
                    t,
                    self.p.column(t.i).as_slice(),
                    self.p.column(t.j).as_slice(),
                    self.p.column(t.k).as_slice(),
                    scale,
                )
                .ok()
            })
            .collect();

        if let Some(m) = regularizer_factor(cfg.regularizer, &self.a, &self.p, cfg.eta, cfg.loss.lambda) {
            self.a = &m * &self.a;
            self.p = &m * &self.p;
        }
        for term in &terms {
            term.apply_to_a(&mut self.a);
        }
        let dout = self.p.nrows();
        let gram = &self.gram;
        self.p
            .as_mut_slice()
            .par_chunks_mut(dout)
            .enumerate()
            .for_each(|(n, col)| {
                for term in &terms {
                    term.apply_to_p_column(col, gram, n);
                }
            });

        self.batches += 1;
        if self.batches.is_multiple_of(REFRESH_EVERY) {
            self.p = &self.a * &self.gram.k;
        }
        Some(terms.len())
    }

    /// Regularizer value at the current coefficients, using `A K Aᵀ = P Aᵀ`.
    pub fn penalty(&self) -> f64 {
        let lambda = self.cfg.loss.lambda;
        let g = &self.p * self.a.transpose();
        match self.cfg.regularizer {
            Regularizer::Aon => {
                let dout = g.nrows();
                0.5 * lambda * (g - DMatrix::identity(dout, dout)).norm_squared()
            }
            Regularizer::Frobenius => 0.5 * lambda * g.trace(),
        }
    }

    /// Exact data term at the current coefficients.
    pub fn exact_loss(&self) -> f64 {
        exact_warp_loss(&ColumnDistance(&self.p), &self.pairs, &self.cfg.loss)
    }

    pub fn into_model(self) -> Result<KernelMetricModel> {
        let d = self.data.d();
        KernelMetricModel::new(self.a, self.gram.spec, self.data.features().to_vec(), d)
    }

    fn snapshot(&self) -> Result<KernelMetricModel> {
        KernelMetricModel::new(
            self.a.clone(),
            self.gram.spec,
            self.data.features().to_vec(),
            self.data.d(),
        )
    }
}

fn kernel_subset(
    ds: &LabeledDataset,
    train_indices: &[usize],
    spec: &KernelSpec,
    cfg: &TrainConfig,
) -> Result<(LabeledDataset, GramMatrix)> {
    cfg.validate()?;
    spec.validate()?;
    if train_indices.len() > cfg.kernel_cap {
        return Err(Error::Resource(format!(
            "{} training samples exceed the kernel cap of {}; use the linear model",
            train_indices.len(),
            cfg.kernel_cap
        )));
    }
    let sub = ds.subset(train_indices)?;
    let gram = gram_matrix(spec, &sub)?;
    Ok((sub, gram))
}

pub fn train_kernel(
    ds: &LabeledDataset,
    train_indices: &[usize],
    spec: &KernelSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<KernelMetricModel>> {
    let (sub, gram) = kernel_subset(ds, train_indices, spec, cfg)?;
    let a0 = init_coefficients(cfg.d_out, &gram, derive_seed(cfg.seed, INIT_STREAM));
    run(KernelTrainer::new(sub, gram, cfg, a0)?, cfg, &mut |_, _, _| {})
}

/// Training from given coefficients `a0` (`D′ × |train_indices|`).
pub fn train_kernel_from(
    ds: &LabeledDataset,
    train_indices: &[usize],
    spec: &KernelSpec,
    cfg: &TrainConfig,
    a0: DMatrix<f64>,
    observer: Observer<'_, KernelMetricModel>,
) -> Result<TrainOutcome<KernelMetricModel>> {
    let (sub, gram) = kernel_subset(ds, train_indices, spec, cfg)?;
    run(KernelTrainer::new(sub, gram, cfg, a0)?, cfg, observer)
}

fn run(
    mut trainer: KernelTrainer,
    cfg: &TrainConfig,
    observer: Observer<'_, KernelMetricModel>,
) -> Result<TrainOutcome<KernelMetricModel>> {
    let mut iterations_run = 0;
    let mut converged_early = false;
    for it in 0..cfg.iterations {
        let Some(used) = trainer.step() else {
            converged_early = true;
            break;
        };
        if trainer.a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "coefficients diverged at iteration {}",
                it + 1
            )));
        }
        iterations_run = it + 1;
        observer(iterations_run, &trainer.snapshot()?, used);
    }
    let final_penalty = trainer.penalty();
    let model = trainer.into_model()?;
    Ok(TrainOutcome {
        model,
        iterations_run,
        converged_early,
        final_penalty,
    })
}
