//! Labeled feature data: loading, validation, index structures, splits and
//! single-shot trials, plus a synthetic generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 4] = b"WRCA";
const FEATURE_VERSION: u32 = 1;

/// On-disk feature formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    Csv,
    Binary,
}

impl FeatureFormat {
    /// `.bin` / `.wrca` are binary, everything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("wrca") => FeatureFormat::Binary,
            _ => FeatureFormat::Csv,
        }
    }
}

/// `N` feature vectors of dimension `D` with positive integer class labels.
///
/// Features are stored row-major. Construction validates the invariants, so a
/// value of this type always has finite features and matching label count.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<u32>,
    n: usize,
    d: usize,
    q: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, labels: Vec<u32>, d: usize) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Validation("dataset is empty".into()));
        }
        if d == 0 {
            return Err(Error::Validation("feature dimension is zero".into()));
        }
        if features.len() != n * d {
            return Err(Error::Validation(format!(
                "{} labels but {} feature values for dimension {d}",
                n,
                features.len()
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        if labels.contains(&0) {
            return Err(Error::Validation("labels must be positive integers".into()));
        }
        let q = labels.iter().collect::<BTreeSet<_>>().len();
        Ok(Self {
            features,
            labels,
            n,
            d,
            q,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of distinct classes.
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    /// Row-major feature storage.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<u32> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Copies the given rows into a new dataset, preserving order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n {
                return Err(Error::Validation(format!(
                    "index {i} out of range for {} samples",
                    self.n
                )));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, labels, self.d)
    }

    /// Scales every row to unit L1 norm; all-zero rows stay zero.
    pub fn l1_normalize(&mut self) {
        for row in self.features.chunks_mut(self.d) {
            let norm: f64 = row.iter().map(|v| v.abs()).sum();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
}

/// Reads a dataset from `path`.
pub fn load_features(
    path: &Path,
    format: FeatureFormat,
    l1_normalize: bool,
    skip_header: bool,
) -> Result<LabeledDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut ds = match format {
        FeatureFormat::Csv => {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Validation("CSV file is not valid UTF-8".into()))?;
            parse_csv(&text, skip_header)?
        }
        FeatureFormat::Binary => parse_binary(&bytes)?,
    };
    if l1_normalize {
        ds.l1_normalize();
    }
    Ok(ds)
}

/// Parses `label,f1,...,fD` lines. Blank lines are ignored.
pub fn parse_csv(text: &str, skip_header: bool) -> Result<LabeledDataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if skip_header && lineno == 0 {
            continue;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label_field = fields.next().unwrap_or_default();
        let label: u32 = label_field.parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("label {label_field:?} is not a positive integer"),
        })?;
        if label == 0 {
            return Err(Error::Parse {
                line: line_no,
                message: "label must be positive".into(),
            });
        }
        let start = features.len();
        for field in fields {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("feature {field:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite feature on line {line_no}"
                )));
            }
            features.push(v);
        }
        let got = features.len() - start;
        match width {
            None if got == 0 => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "row has no features".into(),
                })
            }
            None => width = Some(got),
            Some(w) if w != got => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {w} features, found {got}"),
                })
            }
            Some(_) => {}
        }
        labels.push(label);
    }
    let Some(d) = width else {
        return Err(Error::Validation("file contains no samples".into()));
    };
    LabeledDataset::new(features, labels, d)
}

fn parse_binary(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.is_empty() {
        return Err(Error::Validation("file contains no samples".into()));
    }
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != FEATURE_MAGIC {
        return Err(Error::Format("missing WRCA magic".into()));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature version {version}")));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let labels = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let features = (0..n * d)
        .map(|_| r.f32().map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after feature payload".into()));
    }
    LabeledDataset::new(features, labels, d)
}

/// Writes a dataset. Binary output stores features as `f32`.
pub fn write_features(ds: &LabeledDataset, path: &Path, format: FeatureFormat) -> Result<()> {
    let bytes = match format {
        FeatureFormat::Csv => {
            let mut out = String::new();
            for i in 0..ds.n() {
                out.push_str(&ds.label(i).to_string());
                for v in ds.row(i) {
                    out.push(',');
                    out.push_str(&v.to_string());
                }
                out.push('\n');
            }
            out.into_bytes()
        }
        FeatureFormat::Binary => {
            let mut out = Vec::with_capacity(16 + 4 * ds.n() * (ds.d() + 1));
            out.extend_from_slice(FEATURE_MAGIC);
            out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
            out.extend_from_slice(&(ds.n() as u32).to_le_bytes());
            out.extend_from_slice(&(ds.d() as u32).to_le_bytes());
            for &y in ds.labels() {
                out.extend_from_slice(&y.to_le_bytes());
            }
            for &v in ds.features() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out
        }
    };
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor shared by the binary readers.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Same-label ordered pairs and per-label negative lists over a subset.
#[derive(Debug, Clone, PartialEq)]
pub struct PairIndex {
    pub same_pairs: Vec<(usize, usize)>,
    pub negatives_by_label: BTreeMap<u32, Vec<usize>>,
    labels: Vec<u32>,
}

impl PairIndex {
    /// Label of a dataset index covered by this index.
    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    /// Negatives for the anchor's label (empty if the anchor's class has none).
    pub fn negatives_for(&self, anchor: usize) -> &[usize] {
        self.negatives_by_label
            .get(&self.labels[anchor])
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.same_pairs.is_empty()
    }
}

pub fn build_pair_index(ds: &LabeledDataset, subset: &[usize]) -> Result<PairIndex> {
    let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in subset {
        if i >= ds.n() {
            return Err(Error::Validation(format!(
                "index {i} out of range for {} samples",
                ds.n()
            )));
        }
        by_label.entry(ds.label(i)).or_default().push(i);
    }
    let mut same_pairs = Vec::new();
    for members in by_label.values() {
        for &i in members {
            for &j in members {
                if i != j {
                    same_pairs.push((i, j));
                }
            }
        }
    }
    if same_pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let mut sorted: Vec<usize> = subset.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let negatives_by_label = by_label
        .keys()
        .map(|&y| {
            let negs = sorted
                .iter()
                .copied()
                .filter(|&k| ds.label(k) != y)
                .collect();
            (y, negs)
        })
        .collect();
    Ok(PairIndex {
        same_pairs,
        negatives_by_label,
        labels: ds.labels().to_vec(),
    })
}

/// One train/test partition by identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n_splits: usize,
    pub splits: Vec<Split>,
    pub p_test: usize,
    pub seed: u64,
}

/// Draws `n_splits` random partitions with `p_test` identities held out.
pub fn make_splits(ds: &LabeledDataset, p_test: usize, n_splits: usize, seed: u64) -> Result<SplitPlan> {
    let classes = ds.classes();
    if p_test == 0 || p_test >= classes.len() {
        return Err(Error::Config(format!(
            "p_test must be in 1..{} (number of identities), got {p_test}",
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splits = (0..n_splits)
        .map(|_| {
            let mut ids = classes.clone();
            ids.shuffle(&mut rng);
            let test_ids: BTreeSet<u32> = ids[..p_test].iter().copied().collect();
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..ds.n()).partition(|&i| test_ids.contains(&ds.label(i)));
            Split { train, test }
        })
        .collect();
    Ok(SplitPlan {
        n_splits,
        splits,
        p_test,
        seed,
    })
}

/// One probe per test identity; everything else in the test set is gallery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SingleShotTrial {
    pub probe_indices: Vec<usize>,
    pub gallery_indices: Vec<usize>,
}

pub fn single_shot_trials(
    ds: &LabeledDataset,
    test_indices: &[usize],
    n_trials: usize,
    seed: u64,
) -> Result<Vec<SingleShotTrial>> {
    let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in test_indices {
        by_label.entry(ds.label(i)).or_default().push(i);
    }
    if let Some((y, _)) = by_label.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::Protocol(format!(
            "identity {y} has a single image in the test set"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = (0..n_trials)
        .map(|_| {
            let probes: BTreeSet<usize> = by_label
                .values()
                .map(|members| members[rng.random_range(0..members.len())])
                .collect();
            let mut gallery: Vec<usize> = test_indices
                .iter()
                .copied()
                .filter(|i| !probes.contains(i))
                .collect();
            gallery.sort_unstable();
            SingleShotTrial {
                probe_indices: probes.into_iter().collect(),
                gallery_indices: gallery,
            }
        })
        .collect();
    Ok(trials)
}

/// Gaussian classes with unit-sphere means in the first `d_signal` dims and
/// `d_noise` label-independent nuisance dims.
///
/// Within-class noise has unit total variance (per-dimension standard
/// deviation `1/sqrt(d_signal)`). Labels run `1..=q`, samples grouped by class.
pub fn synth_gaussian(
    q: usize,
    per_class: usize,
    d_signal: usize,
    d_noise: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if q < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {q}")));
    }
    if per_class < 2 {
        return Err(Error::Config(format!(
            "need at least 2 samples per class, got {per_class}"
        )));
    }
    if d_signal == 0 {
        return Err(Error::Config("d_signal must be positive".into()));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::Config("noise_scale must be finite and nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = d_signal + d_noise;
    let within = 1.0 / (d_signal as f64).sqrt();
    let mut features = Vec::with_capacity(q * per_class * d);
    let mut labels = Vec::with_capacity(q * per_class);
    for class in 0..q {
        let mean = loop {
            let v: Vec<f64> = (0..d_signal).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect::<Vec<_>>();
            }
        };
        for _ in 0..per_class {
            for m in &mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(m + within * z);
            }
            for _ in 0..d_noise {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(if noise_scale == 0.0 { 0.0 } else { noise_scale * z });
            }
            labels.push(class as u32 + 1);
        }
    }
    LabeledDataset::new(features, labels, d)
}
