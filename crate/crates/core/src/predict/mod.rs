//! Outcome classification: median imputation, random projection, four
//! classifiers, hyperparameter search and nested stratified cross-validation.

mod bayes;
mod forest;
mod knn;
mod svm;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bayes::GnbModel;
pub use forest::ForestModel;
pub use knn::KnnModel;
pub use svm::{BinarySvm, SvmModel};

use crate::corpus::SessionKey;
use crate::error::{Error, Result};
use crate::grouping::{GroupFeatureTable, OutcomeLabel, OutcomeRecord};
use crate::stats::median;

pub const CLASSES: usize = 3;
pub const MODEL_FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Dataset

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<OutcomeLabel>,
    pub keys: Vec<SessionKey>,
}

/// Per-week, per-feature medians used to fill absent values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Imputation {
    pub week_medians: BTreeMap<u32, Vec<f64>>,
    pub global_medians: Vec<f64>,
    pub filled: usize,
}

impl Imputation {
    pub fn fill(&self, week: u32, row: &[Option<f64>]) -> Vec<f64> {
        let wm = self.week_medians.get(&week);
        row.iter()
            .enumerate()
            .map(|(j, v)| v.unwrap_or_else(|| wm.map_or(self.global_medians[j], |m| m[j])))
            .collect()
    }
}

fn present_median(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| median(&v))
}

impl Dataset {
    /// Joins a (normalized) feature table with outcome labels over the given
    /// columns, imputing absent values by week median, then global median,
    /// then 0. Sessions without an outcome are skipped.
    pub fn from_table(table: &GroupFeatureTable, outcomes: &[OutcomeRecord], columns: &[String]) -> Result<(Self, Imputation)> {
        let sub = table.select_columns(columns)?;
        let labels: BTreeMap<SessionKey, OutcomeLabel> = outcomes.iter().map(|o| (o.key(), o.label)).collect();
        let rows: Vec<usize> = (0..sub.rows.len()).filter(|&i| labels.contains_key(&sub.rows[i])).collect();
        if rows.is_empty() {
            return Err(Error::invalid("no session has both features and an outcome"));
        }
        let d = sub.columns.len();
        let global: Vec<f64> = (0..d)
            .map(|j| present_median(rows.iter().map(|&i| sub.values[i][j])).unwrap_or(0.0))
            .collect();
        let mut weeks: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in &rows {
            weeks.entry(sub.rows[i].week).or_default().push(i);
        }
        let week_medians = weeks
            .iter()
            .map(|(w, idx)| {
                let m = (0..d)
                    .map(|j| present_median(idx.iter().map(|&i| sub.values[i][j])).unwrap_or(global[j]))
                    .collect();
                (*w, m)
            })
            .collect();
        let mut imp = Imputation {
            week_medians,
            global_medians: global,
            filled: 0,
        };
        let mut x = Vec::with_capacity(rows.len());
        for &i in &rows {
            imp.filled += sub.values[i].iter().filter(|v| v.is_none()).count();
            x.push(imp.fill(sub.rows[i].week, &sub.values[i]));
        }
        let ds = Self {
            feature_names: sub.columns.clone(),
            y: rows.iter().map(|&i| labels[&sub.rows[i]]).collect(),
            keys: rows.iter().map(|&i| sub.rows[i].clone()).collect(),
            x,
        };
        ds.validate()?;
        Ok((ds, imp))
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.y.len() || self.x.len() != self.keys.len() {
            return Err(Error::invalid("dataset rows, labels and keys differ in length"));
        }
        let d = self.feature_names.len();
        for row in &self.x {
            if row.len() != d {
                return Err(Error::Dimension { expected: d, actual: row.len() });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite feature value"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn class_indices(&self) -> Vec<usize> {
        self.y.iter().map(|l| l.index()).collect()
    }
}

// ---------------------------------------------------------------------------
// Random projection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Gaussian,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomProjection {
    pub seed: u64,
    pub kind: ProjectionKind,
    pub d_in: usize,
    pub d_out: usize,
    /// Row-major d_out × d_in.
    pub matrix: Vec<f64>,
}

/// round(45/62 × d_in), at least 1.
pub fn default_d_out(d_in: usize) -> usize {
    ((45.0 * d_in as f64 / 62.0).round() as usize).max(1)
}

impl RandomProjection {
    /// Gaussian entries N(0, 1/d_out), or Achlioptas ±√(3/d_out) with
    /// probability 1/6 each and 0 otherwise.
    pub fn new(d_in: usize, d_out: usize, kind: ProjectionKind, seed: u64) -> Result<Self> {
        if d_out == 0 || d_out > d_in {
            return Err(Error::invalid(format!("projection needs 1 <= d_out <= d_in, got {d_out} > {d_in}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = (1.0 / d_out as f64).sqrt();
        let normal = Normal::new(0.0, sd).expect("positive sd");
        let s = (3.0 / d_out as f64).sqrt();
        let matrix = (0..d_in * d_out)
            .map(|_| match kind {
                ProjectionKind::Gaussian => normal.sample(&mut rng),
                ProjectionKind::Sparse => match rng.random_range(0..6) {
                    0 => s,
                    1 => -s,
                    _ => 0.0,
                },
            })
            .collect();
        Ok(Self {
            seed,
            kind,
            d_in,
            d_out,
            matrix,
        })
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(Error::Dimension {
                expected: self.d_in,
                actual: x.len(),
            });
        }
        Ok(self
            .matrix
            .chunks(self.d_in)
            .map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum())
            .collect())
    }

    /// X · Rᵀ.
    pub fn project(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        x.iter().map(|r| self.apply(r)).collect()
    }
}

// ---------------------------------------------------------------------------
// Classifiers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Svm,
    Knn,
    Rf,
    Gnb,
}

impl FromStr for ClassifierKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "svm" => Ok(Self::Svm),
            "knn" => Ok(Self::Knn),
            "rf" => Ok(Self::Rf),
            "gnb" | "nb" => Ok(Self::Gnb),
            _ => Err(Error::invalid(format!("unknown classifier {s:?} (svm, knn, rf, gnb)"))),
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Svm => "svm",
            Self::Knn => "knn",
            Self::Rf => "rf",
            Self::Gnb => "gnb",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    Rbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Manhattan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HyperParams {
    Svm { c: f64, gamma: f64, kernel: Kernel },
    Knn { k: usize, metric: Metric },
    Rf { trees: usize, max_depth: Option<usize>, max_features: f64 },
    Gnb { smoothing: f64 },
}

impl HyperParams {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Self::Svm { .. } => ClassifierKind::Svm,
            Self::Knn { .. } => ClassifierKind::Knn,
            Self::Rf { .. } => ClassifierKind::Rf,
            Self::Gnb { .. } => ClassifierKind::Gnb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Svm { c, gamma, .. } => c > 0.0 && gamma > 0.0 && c.is_finite() && gamma.is_finite(),
            Self::Knn { k, .. } => k >= 1,
            Self::Rf { trees, max_depth, max_features } => {
                trees >= 1 && max_depth != Some(0) && max_features > 0.0 && max_features <= 1.0
            }
            Self::Gnb { smoothing } => smoothing >= 0.0 && smoothing.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("hyperparameters out of domain: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Svm(SvmModel),
    Knn(KnnModel),
    Rf(ForestModel),
    Gnb(GnbModel),
}

impl Model {
    pub fn predict(&self, x: &[f64]) -> usize {
        match self {
            Model::Svm(m) => m.predict(x),
            Model::Knn(m) => m.predict(x),
            Model::Rf(m) => m.predict(x),
            Model::Gnb(m) => m.predict(x),
        }
    }
}

/// Trains one classifier on class indices `y` in 0..3.
pub fn fit(params: &HyperParams, x: &[Vec<f64>], y: &[usize], seed: u64) -> Result<Model> {
    params.validate()?;
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid("training set empty or misaligned"));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite feature value"));
    }
    let mut seen = [false; CLASSES];
    for &c in y {
        seen[c] = true;
    }
    if seen.iter().filter(|s| **s).count() < 2 {
        return Err(Error::invalid("training set has a single class"));
    }
    Ok(match *params {
        HyperParams::Svm { c, gamma, kernel } => Model::Svm(SvmModel::fit(x, y, c, kernel, gamma)?),
        HyperParams::Knn { k, metric } => Model::Knn(KnnModel {
            k,
            metric,
            x: x.to_vec(),
            y: y.to_vec(),
        }),
        HyperParams::Rf { trees, max_depth, max_features } => {
            Model::Rf(ForestModel::fit(x, y, trees, max_depth, max_features, seed))
        }
        HyperParams::Gnb { smoothing } => Model::Gnb(GnbModel::fit(x, y, smoothing)),
    })
}

/// Share of matching predictions.
pub fn accuracy<T: PartialEq>(predictions: &[T], truth: &[T]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truth.len() {
        return Err(Error::invalid("accuracy needs equal-length, non-empty inputs"));
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

// ---------------------------------------------------------------------------
// Search

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum SearchStrategy {
    /// Explicit candidates, evaluated in order.
    Grid { candidates: Vec<HyperParams> },
    /// Seeded draws from the kind's default ranges.
    Random { draws: usize },
}

impl SearchStrategy {
    /// `grid` (default grid for the classifier) or `random:<draws>`.
    pub fn parse(spec: &str, kind: ClassifierKind) -> Result<Self> {
        match spec.split_once(':') {
            None if spec == "grid" => Ok(Self::Grid {
                candidates: default_grid(kind),
            }),
            None if spec == "random" => Ok(Self::Random { draws: 30 }),
            Some(("random", n)) => {
                let draws: usize = n.parse().map_err(|_| Error::invalid(format!("bad draw count {n:?}")))?;
                if draws == 0 {
                    return Err(Error::invalid("random search needs at least one draw"));
                }
                Ok(Self::Random { draws })
            }
            _ => Err(Error::invalid(format!("unknown search spec {spec:?} (grid, random:<n>)"))),
        }
    }

    pub fn candidates(&self, kind: ClassifierKind, seed: u64) -> Result<Vec<HyperParams>> {
        let out = match self {
            Self::Grid { candidates } => candidates.clone(),
            Self::Random { draws } => random_candidates(kind, *draws, seed),
        };
        if out.is_empty() {
            return Err(Error::invalid("empty hyperparameter space"));
        }
        for c in &out {
            c.validate()?;
            if c.kind() != kind {
                return Err(Error::invalid(format!("candidate {c:?} is not a {kind} configuration")));
            }
        }
        Ok(out)
    }
}

/// Cartesian product, kernel outermost then C then γ; linear kernels take
/// only the first γ since they ignore it.
pub fn svm_grid(cs: &[f64], gammas: &[f64], kernels: &[Kernel]) -> Vec<HyperParams> {
    let mut out = Vec::new();
    for &kernel in kernels {
        for &c in cs {
            let gs = if kernel == Kernel::Linear { &gammas[..gammas.len().min(1)] } else { gammas };
            for &gamma in gs {
                out.push(HyperParams::Svm { c, gamma, kernel });
            }
        }
    }
    out
}

pub fn default_grid(kind: ClassifierKind) -> Vec<HyperParams> {
    match kind {
        ClassifierKind::Svm => svm_grid(
            &[0.01, 0.1, 1.0, 10.0, 100.0],
            &[0.001, 0.01, 0.1, 1.0, 10.0],
            &[Kernel::Linear, Kernel::Rbf],
        ),
        ClassifierKind::Knn => [1, 3, 5, 7, 9, 11, 15]
            .into_iter()
            .flat_map(|k| [Metric::Euclidean, Metric::Manhattan].map(|metric| HyperParams::Knn { k, metric }))
            .collect(),
        ClassifierKind::Rf => [50, 100]
            .into_iter()
            .flat_map(|trees| {
                [Some(3), Some(6), None].into_iter().flat_map(move |max_depth| {
                    [0.33, 0.66].map(|max_features| HyperParams::Rf {
                        trees,
                        max_depth,
                        max_features,
                    })
                })
            })
            .collect(),
        ClassifierKind::Gnb => [1e-9, 1e-6, 1e-3, 1e-2, 1e-1]
            .map(|smoothing| HyperParams::Gnb { smoothing })
            .to_vec(),
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    10f64.powf(rng.random_range(lo.log10()..hi.log10()))
}

/// SVM: C log-uniform [1e-2, 1e2], γ log-uniform [1e-3, 1e1], kernel uniform.
/// KNN: k uniform 1..=15, metric uniform. RF: trees 20..=150, depth 2..=10 or
/// unlimited, feature fraction uniform (0.1, 1]. GNB: smoothing log-uniform
/// [1e-11, 1e-1].
pub fn random_candidates(kind: ClassifierKind, draws: usize, seed: u64) -> Vec<HyperParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..draws)
        .map(|_| match kind {
            ClassifierKind::Svm => HyperParams::Svm {
                c: log_uniform(&mut rng, 1e-2, 1e2),
                gamma: log_uniform(&mut rng, 1e-3, 1e1),
                kernel: if rng.random_bool(0.5) { Kernel::Linear } else { Kernel::Rbf },
            },
            ClassifierKind::Knn => HyperParams::Knn {
                k: rng.random_range(1..=15),
                metric: if rng.random_bool(0.5) { Metric::Euclidean } else { Metric::Manhattan },
            },
            ClassifierKind::Rf => {
                let depth = rng.random_range(2..=11);
                HyperParams::Rf {
                    trees: rng.random_range(20..=150),
                    max_depth: (depth <= 10).then_some(depth),
                    max_features: 1.0 - rng.random_range(0.0..0.9),
                }
            }
            ClassifierKind::Gnb => HyperParams::Gnb {
                smoothing: log_uniform(&mut rng, 1e-11, 1e-1),
            },
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Cross-validation

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-work-item seed: `master ⊕ splitmix64(splitmix64(fold) ⊕ item)`.
pub fn work_seed(master: u64, fold: u64, item: u64) -> u64 {
    master ^ splitmix64(splitmix64(fold) ^ item)
}

const TAG_OUTER_SPLIT: u64 = u64::MAX;
const TAG_SEARCH: u64 = u64::MAX - 1;
const TAG_INNER_SPLIT: u64 = 1 << 40;
const TAG_PROJECTION: u64 = 1 << 41;
const TAG_FINAL_FIT: u64 = 1 << 42;

/// Stratified k-fold assignment: each class is shuffled and dealt round-robin,
/// continuing the deal across classes so fold sizes differ by at most one.
pub fn stratified_folds(y: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0usize;
    for c in 0..CLASSES {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < k {
            return Err(Error::invalid(format!(
                "class {} has {} samples, fewer than {k} folds: some fold would lack it",
                OutcomeLabel::from_index(c),
                idx.len()
            )));
        }
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        for i in idx {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub kind: ProjectionKind,
    /// `None` uses the 45/62 ratio.
    pub d_out: Option<usize>,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            kind: ProjectionKind::Gaussian,
            d_out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub outer: usize,
    pub inner: usize,
    pub seed: u64,
    pub projection: Option<ProjectionConfig>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            outer: 5,
            inner: 5,
            seed: 0,
            projection: Some(ProjectionConfig::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPrediction {
    pub group_id: String,
    pub week: u32,
    pub fold: usize,
    pub truth: OutcomeLabel,
    pub predicted: OutcomeLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub classifier: ClassifierKind,
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub seed: u64,
    pub fold_sizes: Vec<usize>,
    pub fold_accuracy: Vec<f64>,
    /// Mean of per-fold accuracies.
    pub mean_accuracy: f64,
    /// Correct predictions over all test samples.
    pub pooled_accuracy: f64,
    /// Rows truth, columns prediction, in High, Mid, Low order.
    pub confusion: [[usize; CLASSES]; CLASSES],
    pub chosen: Vec<HyperParams>,
    pub inner_scores: Vec<f64>,
    pub predictions: Vec<TestPrediction>,
}

/// Hook run on every outer fold before projection, with
/// `(fold, train_x, train_y, test_x, test_y)`.
pub type FoldHook<'a> = dyn Fn(usize, &mut Vec<Vec<f64>>, &[usize], &mut Vec<Vec<f64>>, &[usize]) + Sync + 'a;

fn take(x: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| x[i].clone()).collect()
}

fn projected(x: &[Vec<f64>], proj: Option<&RandomProjection>) -> Result<Vec<Vec<f64>>> {
    match proj {
        Some(p) => p.project(x),
        None => Ok(x.to_vec()),
    }
}

fn make_projection(cfg: &Option<ProjectionConfig>, d_in: usize, seed: u64) -> Result<Option<RandomProjection>> {
    cfg.as_ref()
        .map(|p| RandomProjection::new(d_in, p.d_out.unwrap_or_else(|| default_d_out(d_in)), p.kind, seed))
        .transpose()
}

/// Mean inner-fold validation accuracy for every candidate; returns the best
/// index (earliest on ties) and its score.
fn select_candidate(
    x: &[Vec<f64>],
    y: &[usize],
    candidates: &[HyperParams],
    inner: usize,
    seed: u64,
    fold: usize,
) -> Result<(usize, f64)> {
    let folds = stratified_folds(y, inner, work_seed(seed, fold as u64, TAG_INNER_SPLIT))?;
    let items: Vec<(usize, usize)> = (0..candidates.len()).flat_map(|c| (0..inner).map(move |f| (c, f))).collect();
    let scores: Vec<f64> = items
        .par_iter()
        .map(|&(c, f)| {
            let test = &folds[f];
            let train: Vec<usize> = (0..y.len()).filter(|i| test.binary_search(i).is_err()).collect();
            let ty: Vec<usize> = train.iter().map(|&i| y[i]).collect();
            let item_seed = work_seed(seed, (fold * 1000 + f + 1) as u64, c as u64);
            let model = fit(&candidates[c], &take(x, &train), &ty, item_seed)?;
            let pred: Vec<usize> = test.iter().map(|&i| model.predict(&x[i])).collect();
            let truth: Vec<usize> = test.iter().map(|&i| y[i]).collect();
            accuracy(&pred, &truth)
        })
        .collect::<Result<_>>()?;
    let mut best = (0usize, f64::NEG_INFINITY);
    for c in 0..candidates.len() {
        let m = scores[c * inner..(c + 1) * inner].iter().sum::<f64>() / inner as f64;
        if m > best.1 {
            best = (c, m);
        }
    }
    Ok(best)
}

pub fn nested_cv(data: &Dataset, kind: ClassifierKind, search: &SearchStrategy, config: &CvConfig) -> Result<EvaluationResult> {
    nested_cv_with(data, kind, search, config, None)
}

/// Outer stratified folds for testing, inner stratified folds over each
/// training split for candidate selection, then a refit of the best candidate
/// on the whole training split. Work items are seeded by [`work_seed`], so the
/// result does not depend on scheduling.
pub fn nested_cv_with(
    data: &Dataset,
    kind: ClassifierKind,
    search: &SearchStrategy,
    config: &CvConfig,
    hook: Option<&FoldHook<'_>>,
) -> Result<EvaluationResult> {
    data.validate()?;
    let y = data.class_indices();
    let seed = config.seed;
    let candidates = search.candidates(kind, work_seed(seed, TAG_SEARCH, 0))?;
    let folds = stratified_folds(&y, config.outer, work_seed(seed, TAG_OUTER_SPLIT, 0))?;
    let d_in = data.feature_names.len();

    let per_fold: Vec<(Vec<usize>, HyperParams, f64, usize)> = folds
        .par_iter()
        .enumerate()
        .map(|(f, test)| {
            let train: Vec<usize> = (0..y.len()).filter(|i| test.binary_search(i).is_err()).collect();
            let train_y: Vec<usize> = train.iter().map(|&i| y[i]).collect();
            let test_y: Vec<usize> = test.iter().map(|&i| y[i]).collect();
            let mut train_x = take(&data.x, &train);
            let mut test_x = take(&data.x, test);
            if let Some(h) = hook {
                h(f, &mut train_x, &train_y, &mut test_x, &test_y);
            }
            let proj = make_projection(&config.projection, d_in, work_seed(seed, f as u64, TAG_PROJECTION))?;
            let train_x = projected(&train_x, proj.as_ref())?;
            let test_x = projected(&test_x, proj.as_ref())?;
            let (best, score) = select_candidate(&train_x, &train_y, &candidates, config.inner, seed, f)?;
            let model = fit(&candidates[best], &train_x, &train_y, work_seed(seed, f as u64, TAG_FINAL_FIT))?;
            let pred: Vec<usize> = test_x.iter().map(|x| model.predict(x)).collect();
            let d_out = proj.as_ref().map_or(d_in, |p| p.d_out);
            Ok((pred, candidates[best], score, d_out))
        })
        .collect::<Result<_>>()?;

    let mut confusion = [[0usize; CLASSES]; CLASSES];
    let mut fold_accuracy = Vec::new();
    let mut predictions = Vec::new();
    let mut hits = 0usize;
    for (f, (test, (pred, _, _, _))) in folds.iter().zip(&per_fold).enumerate() {
        let truth: Vec<usize> = test.iter().map(|&i| y[i]).collect();
        fold_accuracy.push(accuracy(pred, &truth)?);
        for ((&i, &t), &p) in test.iter().zip(&truth).zip(pred) {
            confusion[t][p] += 1;
            hits += usize::from(t == p);
            predictions.push(TestPrediction {
                group_id: data.keys[i].group_id.clone(),
                week: data.keys[i].week,
                fold: f,
                truth: OutcomeLabel::from_index(t),
                predicted: OutcomeLabel::from_index(p),
            });
        }
    }
    predictions.sort_by(|a, b| (a.week, &a.group_id).cmp(&(b.week, &b.group_id)));
    Ok(EvaluationResult {
        classifier: kind,
        n: y.len(),
        d_in,
        d_out: per_fold.first().map_or(d_in, |p| p.3),
        seed,
        fold_sizes: folds.iter().map(Vec::len).collect(),
        mean_accuracy: fold_accuracy.iter().sum::<f64>() / fold_accuracy.len() as f64,
        fold_accuracy,
        pooled_accuracy: hits as f64 / y.len() as f64,
        confusion,
        chosen: per_fold.iter().map(|p| p.1).collect(),
        inner_scores: per_fold.iter().map(|p| p.2).collect(),
        predictions,
    })
}

// ---------------------------------------------------------------------------
// Persisted model

/// Self-contained model file: everything needed to map a raw feature row to a
/// label, plus the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub config_digest: Option<String>,
    pub classifier: ClassifierKind,
    pub search: SearchStrategy,
    pub cv: CvConfig,
    pub feature_names: Vec<String>,
    pub imputation: Imputation,
    pub projection: Option<RandomProjection>,
    pub params: HyperParams,
    pub validation_score: f64,
    pub model: Model,
}

impl TrainedModel {
    /// Selects hyperparameters by stratified CV over the whole dataset and
    /// refits the winner on all of it.
    pub fn train(data: &Dataset, imputation: Imputation, kind: ClassifierKind, search: &SearchStrategy, cv: &CvConfig) -> Result<Self> {
        data.validate()?;
        let y = data.class_indices();
        let candidates = search.candidates(kind, work_seed(cv.seed, TAG_SEARCH, 0))?;
        let d_in = data.feature_names.len();
        let projection = make_projection(&cv.projection, d_in, work_seed(cv.seed, u64::from(u32::MAX), TAG_PROJECTION))?;
        let x = projected(&data.x, projection.as_ref())?;
        let (best, score) = select_candidate(&x, &y, &candidates, cv.inner, cv.seed, u32::MAX as usize)?;
        let model = fit(&candidates[best], &x, &y, work_seed(cv.seed, u64::from(u32::MAX), TAG_FINAL_FIT))?;
        Ok(Self {
            format_version: MODEL_FORMAT_VERSION,
            config_digest: None,
            classifier: kind,
            search: search.clone(),
            cv: cv.clone(),
            feature_names: data.feature_names.clone(),
            imputation,
            projection,
            params: candidates[best],
            validation_score: score,
            model,
        })
    }

    pub fn predict_row(&self, week: u32, row: &[Option<f64>]) -> Result<OutcomeLabel> {
        if row.len() != self.feature_names.len() {
            return Err(Error::Dimension {
                expected: self.feature_names.len(),
                actual: row.len(),
            });
        }
        let x = self.imputation.fill(week, row);
        let x = match &self.projection {
            Some(p) => p.apply(&x)?,
            None => x,
        };
        Ok(OutcomeLabel::from_index(self.model.predict(&x)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::invalid(format!("unsupported model format version {}", m.format_version)));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn blobs(seed: u64, n_per: usize, sep: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for c in 0..2 {
            for _ in 0..n_per {
                x.push((0..4).map(|j| noise.sample(&mut rng) + if j == 0 { sep * c as f64 } else { 0.0 }).collect());
                y.push(c);
            }
        }
        (x, y)
    }

    fn all_kinds() -> Vec<HyperParams> {
        vec![
            HyperParams::Svm { c: 1.0, gamma: 0.1, kernel: Kernel::Rbf },
            HyperParams::Svm { c: 1.0, gamma: 0.1, kernel: Kernel::Linear },
            HyperParams::Knn { k: 5, metric: Metric::Euclidean },
            HyperParams::Knn { k: 3, metric: Metric::Manhattan },
            HyperParams::Rf { trees: 30, max_depth: Some(5), max_features: 0.5 },
            HyperParams::Gnb { smoothing: 1e-9 },
        ]
    }

    #[test]
    fn separated_blobs_are_learned_by_every_classifier() {
        let (x, y) = blobs(1, 50, 8.0);
        let (tx, ty) = blobs(2, 50, 8.0);
        for p in all_kinds() {
            let m = fit(&p, &x, &y, 9).unwrap();
            let pred: Vec<usize> = tx.iter().map(|r| m.predict(r)).collect();
            assert!(accuracy(&pred, &ty).unwrap() >= 0.95, "{p:?}");
        }
    }

    #[test]
    fn one_nn_memorizes() {
        let (x, y) = blobs(3, 30, 0.5);
        let m = fit(&HyperParams::Knn { k: 1, metric: Metric::Euclidean }, &x, &y, 0).unwrap();
        let pred: Vec<usize> = x.iter().map(|r| m.predict(r)).collect();
        assert_eq!(accuracy(&pred, &y).unwrap(), 1.0);
    }

    #[test]
    fn fit_errors() {
        let p = HyperParams::Gnb { smoothing: 1e-9 };
        assert!(fit(&p, &[vec![1.0], vec![2.0]], &[0, 0], 0).is_err());
        assert!(fit(&p, &[vec![1.0], vec![f64::NAN]], &[0, 1], 0).is_err());
        assert!(fit(&HyperParams::Svm { c: 0.0, gamma: 1.0, kernel: Kernel::Rbf }, &[vec![1.0], vec![2.0]], &[0, 1], 0).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1], &[2, 2]).unwrap(), 0.0);
        let truth = vec![0; 18];
        let mut pred = vec![0; 18];
        pred[..3].fill(1);
        assert!((accuracy(&pred, &truth).unwrap() - 15.0 / 18.0).abs() < 1e-15);
        assert!(accuracy::<usize>(&[], &[]).is_err());
    }

    #[test]
    fn projection_examples() {
        assert_eq!(default_d_out(62), 45);
        let p = RandomProjection::new(62, 45, ProjectionKind::Gaussian, 3).unwrap();
        assert_eq!(p.project(&[vec![0.0; 62]]).unwrap(), vec![vec![0.0; 45]]);
        assert!(p.apply(&[0.0; 61]).is_err());
        assert!(RandomProjection::new(10, 11, ProjectionKind::Gaussian, 0).is_err());
        assert_eq!(RandomProjection::new(62, 45, ProjectionKind::Gaussian, 3).unwrap(), p);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec<f64>> = (0..200).map(|_| (0..62).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        for kind in [ProjectionKind::Gaussian, ProjectionKind::Sparse] {
            let proj = RandomProjection::new(62, 45, kind, 5).unwrap().project(&pts).unwrap();
            let (mut ok, mut total) = (0, 0);
            for i in 0..200 {
                for j in i + 1..200 {
                    let d0: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    let d1: f64 = proj[i].iter().zip(&proj[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    total += 1;
                    ok += usize::from(((d1 - d0) / d0).abs() <= 0.45);
                }
            }
            assert!(ok as f64 / total as f64 >= 0.95, "{kind:?}: {ok}/{total}");
        }
    }

    #[test]
    fn search_examples() {
        let g = svm_grid(&[0.1, 1.0, 10.0], &[0.01, 0.1], &[Kernel::Rbf]);
        assert_eq!(g.len(), 6);
        assert_eq!(g[1], HyperParams::Svm { c: 0.1, gamma: 0.1, kernel: Kernel::Rbf });
        assert_eq!(g[2], HyperParams::Svm { c: 1.0, gamma: 0.01, kernel: Kernel::Rbf });

        let a = random_candidates(ClassifierKind::Svm, 30, 4);
        assert_eq!(a, random_candidates(ClassifierKind::Svm, 30, 4));
        assert_ne!(a, random_candidates(ClassifierKind::Svm, 30, 5));

        let mut logs: Vec<f64> = random_candidates(ClassifierKind::Svm, 10_000, 8)
            .into_iter()
            .map(|h| match h {
                HyperParams::Svm { c, .. } => c.log10(),
                _ => unreachable!(),
            })
            .collect();
        logs.sort_by(f64::total_cmp);
        assert!(median(&logs).abs() < 0.1);
        assert!(logs[0] >= -2.0 && logs[logs.len() - 1] <= 2.0);

        assert_eq!(SearchStrategy::parse("random:30", ClassifierKind::Svm).unwrap(), SearchStrategy::Random { draws: 30 });
        assert!(SearchStrategy::parse("bayes", ClassifierKind::Svm).is_err());
        let empty = SearchStrategy::Grid { candidates: vec![] };
        assert!(empty.candidates(ClassifierKind::Svm, 0).is_err());
        for kind in [ClassifierKind::Svm, ClassifierKind::Knn, ClassifierKind::Rf, ClassifierKind::Gnb] {
            assert!(SearchStrategy::parse("grid", kind).unwrap().candidates(kind, 0).is_ok());
            assert!(random_candidates(kind, 50, 1).iter().all(|h| h.validate().is_ok()));
        }
    }

    fn paper_sized(seed: u64, signal: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut keys = Vec::new();
        for week in 1..=9 {
            for g in 0..10 {
                let label = if g < 3 { OutcomeLabel::High } else if g < 7 { OutcomeLabel::Mid } else { OutcomeLabel::Low };
                let centre = 1.0 - label.index() as f64;
                x.push((0..8).map(|j| noise.sample(&mut rng) + if j < 3 { signal * centre } else { 0.0 }).collect());
                y.push(label);
                keys.push(SessionKey::new(format!("g{g}"), week));
            }
        }
        Dataset {
            feature_names: (0..8).map(|j| format!("f{j}")).collect(),
            x,
            y,
            keys,
        }
    }

    #[test]
    fn stratified_folds_partition() {
        let y: Vec<usize> = paper_sized(0, 0.0).class_indices();
        let folds = stratified_folds(&y, 5, 3).unwrap();
        assert_eq!(folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![18; 5]);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..90).collect::<Vec<_>>());
        for f in &folds {
            let counts: Vec<usize> = (0..3).map(|c| f.iter().filter(|&&i| y[i] == c).count()).collect();
            assert!(counts.iter().all(|&n| (5..=8).contains(&n)), "{counts:?}");
        }
        assert!(stratified_folds(&[0, 0, 0, 1, 1, 1, 1, 1], 5, 0).is_err());
    }

    #[test]
    fn nested_cv_on_signal_and_determinism() {
        let data = paper_sized(1, 2.0);
        let cfg = CvConfig { seed: 7, ..CvConfig::default() };
        let search = SearchStrategy::Random { draws: 8 };
        let r = nested_cv(&data, ClassifierKind::Svm, &search, &cfg).unwrap();
        assert_eq!(r.fold_sizes, vec![18; 5]);
        assert_eq!(r.d_out, 6);
        assert!(r.mean_accuracy >= 0.7, "{}", r.mean_accuracy);
        let trace: usize = (0..3).map(|c| r.confusion[c][c]).sum();
        assert_eq!(trace as f64 / r.n as f64, r.pooled_accuracy);
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 90);
        assert_eq!(nested_cv(&data, ClassifierKind::Svm, &search, &cfg).unwrap(), r);
    }

    #[test]
    fn trained_model_round_trip() {
        let data = paper_sized(2, 2.0);
        let imp = Imputation {
            week_medians: BTreeMap::new(),
            global_medians: vec![0.5; 8],
            filled: 0,
        };
        let cv = CvConfig { seed: 1, ..CvConfig::default() };
        let m = TrainedModel::train(&data, imp, ClassifierKind::Knn, &SearchStrategy::Random { draws: 4 }, &cv).unwrap();
        let back = TrainedModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let row: Vec<Option<f64>> = data.x[0].iter().map(|v| Some(*v)).collect();
        assert_eq!(back.predict_row(1, &row).unwrap(), m.predict_row(1, &row).unwrap());
        let mut sparse = row.clone();
        sparse[0] = None;
        assert!(m.predict_row(1, &sparse).is_ok());
    }

    #[test]
    fn imputation_uses_week_medians() {
        use crate::grouping::GroupFeatureTable;
        let table = GroupFeatureTable {
            rows: vec![SessionKey::new("a", 1), SessionKey::new("b", 1), SessionKey::new("c", 1), SessionKey::new("a", 2)],
            columns: vec!["f".into()],
            values: vec![vec![Some(1.0)], vec![Some(3.0)], vec![None], vec![None]],
        };
        let outcomes: Vec<OutcomeRecord> = table
            .rows
            .iter()
            .map(|k| OutcomeRecord {
                group_id: k.group_id.clone(),
                week: k.week,
                e_s: 0.5,
                rank: 1,
                label: OutcomeLabel::Mid,
            })
            .collect();
        let (ds, imp) = Dataset::from_table(&table, &outcomes, &["f".to_string()]).unwrap();
        assert_eq!(ds.x, vec![vec![1.0], vec![3.0], vec![2.0], vec![2.0]]);
        assert_eq!(imp.filled, 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn knn_scale_invariant(seed in 0u64..500, scale in 0.01f64..100.0, k in 1usize..7) {
            let (x, y) = blobs(seed, 15, 1.0);
            let (tx, _) = blobs(seed + 1, 10, 1.0);
            let p = HyperParams::Knn { k, metric: Metric::Euclidean };
            let m = fit(&p, &x, &y, 0).unwrap();
            let sx: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
            let ms = fit(&p, &sx, &y, 0).unwrap();
            for r in &tx {
                let sr: Vec<f64> = r.iter().map(|v| v * scale).collect();
                prop_assert_eq!(m.predict(r), ms.predict(&sr));
            }
        }

        #[test]
        fn outer_folds_partition(seed in any::<u64>(), n_high in 5usize..20, n_mid in 5usize..20, n_low in 5usize..20) {
            let y: Vec<usize> = [0].repeat(n_high).into_iter().chain([1].repeat(n_mid)).chain([2].repeat(n_low)).collect();
            let folds = stratified_folds(&y, 5, seed).unwrap();
            let mut all: Vec<usize> = folds.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..y.len()).collect::<Vec<_>>());
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
