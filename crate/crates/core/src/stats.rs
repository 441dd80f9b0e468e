//! Distance metrics between embeddings and the paired permutation test.
//!
//! The permutation null pools both groups, shuffles, and re-pairs the halves
//! by position. Each iteration draws from its own ChaCha8 stream
//! (`seed`, stream = iteration index), so results do not depend on how
//! iterations are scheduled across threads. The two-tailed p-value measures
//! deviations from the exact null expectation of the statistic, which is
//! available in closed form from the pooled distance matrix.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{EmbeddingVector, GroupEmbeddings};

pub const RNG_NAME: &str = "ChaCha8";
pub const MIN_PERMUTATIONS: usize = 100;
pub const DEFAULT_HISTOGRAM_BINS: usize = 50;
/// Default shrinkage factor: λ = factor · trace(Σ) / dim.
pub const DEFAULT_SHRINKAGE_FACTOR: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("zero-norm vector in cosine distance")]
    ZeroNorm,
    #[error("covariance is singular; use a positive shrinkage")]
    Singular,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("shrinkage must be nonnegative and finite, got {0}")]
    InvalidShrinkage(f64),
    #[error("groups differ in size: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("essay ids misaligned at position {index}: {left} vs {right}")]
    Misaligned {
        index: usize,
        left: String,
        right: String,
    },
    #[error("permutation count {0} is below the minimum of {MIN_PERMUTATIONS}")]
    TooFewPermutations(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Cosine,
    Euclidean,
    Mahalanobis,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Cosine => "cosine",
            MetricKind::Euclidean => "euclidean",
            MetricKind::Mahalanobis => "mahalanobis",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" | "cosine-distance" => Some(MetricKind::Cosine),
            "euclidean" => Some(MetricKind::Euclidean),
            "mahalanobis" => Some(MetricKind::Mahalanobis),
            _ => None,
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Regularization of the Mahalanobis covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "lambda", rename_all = "lowercase")]
pub enum Shrinkage {
    /// λ = 0.1 · trace(Σ) / dim.
    Auto,
    Fixed(f64),
    /// Σ replaced by the identity (plain euclidean geometry).
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DistanceMetric {
    Cosine,
    Euclidean,
    Mahalanobis(Shrinkage),
}

impl DistanceMetric {
    pub fn kind(&self) -> MetricKind {
        match self {
            DistanceMetric::Cosine => MetricKind::Cosine,
            DistanceMetric::Euclidean => MetricKind::Euclidean,
            DistanceMetric::Mahalanobis(_) => MetricKind::Mahalanobis,
        }
    }

    pub fn from_kind(kind: MetricKind) -> Self {
        match kind {
            MetricKind::Cosine => DistanceMetric::Cosine,
            MetricKind::Euclidean => DistanceMetric::Euclidean,
            MetricKind::Mahalanobis => DistanceMetric::Mahalanobis(Shrinkage::Auto),
        }
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<(), StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::DimMismatch(a.len(), b.len()));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    check_dims(a, b)?;
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(StatsError::ZeroNorm);
    }
    Ok(cosine_from_parts(dot(a, b), na, nb))
}

fn cosine_from_parts(ab: f64, na: f64, nb: f64) -> f64 {
    (1.0 - ab / (na * nb)).clamp(0.0, 2.0)
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    check_dims(a, b)?;
    Ok(sq_dist(a, b).sqrt())
}

pub fn mean_vector(vectors: &[&[f64]]) -> Result<Vec<f64>, StatsError> {
    let first = vectors
        .first()
        .ok_or(StatsError::TooFewSamples { needed: 1, got: 0 })?;
    let mut mean = vec![0.0; first.len()];
    for v in vectors {
        check_dims(first, v)?;
        mean.iter_mut().zip(v.iter()).for_each(|(m, x)| *m += x);
    }
    let n = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

enum Whitening {
    Identity,
    /// Lower Cholesky factor of Σ + λI.
    Full(DMatrix<f64>),
    /// Push-through form for m ≤ dim: (λI + AᵀA)⁻¹ = λ⁻¹(I − Aᵀ(λI + AAᵀ)⁻¹A),
    /// with A the scaled centered data and R the Cholesky factor of λI + AAᵀ.
    LowRank {
        a: DMatrix<f64>,
        r: DMatrix<f64>,
        lambda: f64,
    },
}

/// Mahalanobis geometry estimated from a pooled sample, with shrinkage.
pub struct MahalanobisModel {
    mean: Vec<f64>,
    lambda: f64,
    whitening: Whitening,
}

/// Whitened coordinates of one vector; squared distances are
/// `‖Δprimary‖² − ‖Δcorrection‖²`.
#[derive(Debug, Clone)]
pub struct Whitened {
    primary: Vec<f64>,
    correction: Vec<f64>,
}

impl Whitened {
    pub fn distance(&self, other: &Whitened) -> f64 {
        let d2 =
            sq_dist(&self.primary, &other.primary) - sq_dist(&self.correction, &other.correction);
        d2.max(0.0).sqrt()
    }
}

impl MahalanobisModel {
    pub fn fit(pooled: &[&[f64]], shrinkage: Shrinkage) -> Result<Self, StatsError> {
        let m = pooled.len();
        if m < 2 {
            return Err(StatsError::TooFewSamples { needed: 2, got: m });
        }
        let mean = mean_vector(pooled)?;
        let dim = mean.len();
        if let Shrinkage::Identity = shrinkage {
            return Ok(Self {
                mean,
                lambda: 0.0,
                whitening: Whitening::Identity,
            });
        }
        let scale = 1.0 / ((m - 1) as f64).sqrt();
        let a = DMatrix::from_fn(m, dim, |i, j| (pooled[i][j] - mean[j]) * scale);
        let trace: f64 = a.iter().map(|x| x * x).sum();
        let lambda = match shrinkage {
            Shrinkage::Auto if trace > 0.0 => DEFAULT_SHRINKAGE_FACTOR * trace / dim as f64,
            // every sample identical: any positive λ gives zero distances
            Shrinkage::Auto => 1.0,
            Shrinkage::Fixed(l) if l.is_finite() && l >= 0.0 => l,
            Shrinkage::Fixed(l) => return Err(StatsError::InvalidShrinkage(l)),
            Shrinkage::Identity => unreachable!(),
        };
        let whitening = if m <= dim && lambda > 0.0 {
            let mut k = &a * a.transpose();
            for i in 0..m {
                k[(i, i)] += lambda;
            }
            let r = k.cholesky().ok_or(StatsError::Singular)?.l();
            Whitening::LowRank { a, r, lambda }
        } else {
            let mut cov = a.transpose() * &a;
            for i in 0..dim {
                cov[(i, i)] += lambda;
            }
            let l = cov.cholesky().ok_or(StatsError::Singular)?.l();
            if l.diagonal()
                .iter()
                .any(|d| *d <= f64::EPSILON * trace.max(1.0))
            {
                return Err(StatsError::Singular);
            }
            Whitening::Full(l)
        };
        Ok(Self {
            mean,
            lambda,
            whitening,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn whiten(&self, v: &[f64]) -> Result<Whitened, StatsError> {
        check_dims(&self.mean, v)?;
        Ok(match &self.whitening {
            Whitening::Identity => Whitened {
                primary: v.to_vec(),
                correction: Vec::new(),
            },
            Whitening::Full(l) => {
                let z = l
                    .solve_lower_triangular(&DVector::from_column_slice(v))
                    .ok_or(StatsError::Singular)?;
                Whitened {
                    primary: z.as_slice().to_vec(),
                    correction: Vec::new(),
                }
            }
            Whitening::LowRank { a, r, lambda } => {
                let s = 1.0 / lambda.sqrt();
                let av = a * DVector::from_column_slice(v);
                let c = r.solve_lower_triangular(&av).ok_or(StatsError::Singular)?;
                Whitened {
                    primary: v.iter().map(|x| x * s).collect(),
                    correction: c.iter().map(|x| x * s).collect(),
                }
            }
        })
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
        Ok(self.whiten(a)?.distance(&self.whiten(b)?))
    }

    pub fn distance_to_mean(&self, v: &[f64]) -> Result<f64, StatsError> {
        self.distance(v, &self.mean)
    }
}

/// Distance of `v` to the mean of `pooled` under the shrunk pooled covariance.
pub fn mahalanobis_distance(
    v: &[f64],
    pooled: &[&[f64]],
    shrinkage: Shrinkage,
) -> Result<f64, StatsError> {
    MahalanobisModel::fit(pooled, shrinkage)?.distance_to_mean(v)
}

/// Symmetric all-pairs distance matrix over a pool of vectors.
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
    lambda: Option<f64>,
}

impl DistanceMatrix {
    pub fn compute(pool: &[&[f64]], metric: DistanceMetric) -> Result<Self, StatsError> {
        let n = pool.len();
        if let Some(first) = pool.first() {
            for v in pool {
                check_dims(first, v)?;
            }
        }
        let mut lambda = None;
        let rows: Vec<Vec<f64>> = match metric {
            DistanceMetric::Euclidean => (0..n)
                .into_par_iter()
                .map(|i| (0..n).map(|j| sq_dist(pool[i], pool[j]).sqrt()).collect())
                .collect(),
            DistanceMetric::Cosine => {
                let norms: Vec<f64> = pool.iter().map(|v| dot(v, v).sqrt()).collect();
                if norms.contains(&0.0) {
                    return Err(StatsError::ZeroNorm);
                }
                (0..n)
                    .into_par_iter()
                    .map(|i| {
                        (0..n)
                            .map(|j| {
                                if i == j {
                                    0.0
                                } else {
                                    cosine_from_parts(dot(pool[i], pool[j]), norms[i], norms[j])
                                }
                            })
                            .collect()
                    })
                    .collect()
            }
            DistanceMetric::Mahalanobis(shrinkage) => {
                let model = MahalanobisModel::fit(pool, shrinkage)?;
                lambda = Some(model.lambda());
                let white = pool
                    .par_iter()
                    .map(|v| model.whiten(v))
                    .collect::<Result<Vec<_>, _>>()?;
                (0..n)
                    .into_par_iter()
                    .map(|i| (0..n).map(|j| white[i].distance(&white[j])).collect())
                    .collect()
            }
        };
        let mut data = rows.concat();
        // enforce exact symmetry regardless of evaluation order
        for i in 0..n {
            data[i * n + i] = 0.0;
            for j in 0..i {
                data[i * n + j] = data[j * n + i];
            }
        }
        Ok(Self { n, data, lambda })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Shrinkage actually applied when the metric is Mahalanobis.
    pub fn lambda(&self) -> Option<f64> {
        self.lambda
    }
}

fn check_aligned(x: &GroupEmbeddings, y: &GroupEmbeddings) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    for (index, (l, r)) in x.essay_ids().zip(y.essay_ids()).enumerate() {
        if l != r {
            return Err(StatsError::Misaligned {
                index,
                left: l.to_string(),
                right: r.to_string(),
            });
        }
    }
    Ok(())
}

fn slices(g: &GroupEmbeddings) -> Vec<&[f64]> {
    g.vectors().map(EmbeddingVector::values).collect()
}

/// Mean of index-paired distances between two aligned groups.
pub fn paired_mean_distance(
    x: &GroupEmbeddings,
    y: &GroupEmbeddings,
    metric: DistanceMetric,
) -> Result<f64, StatsError> {
    check_aligned(x, y)?;
    if x.is_empty() {
        return Err(StatsError::TooFewSamples { needed: 1, got: 0 });
    }
    let (xs, ys) = (slices(x), slices(y));
    let n = xs.len();
    let sum: f64 = match metric {
        DistanceMetric::Cosine => xs
            .iter()
            .zip(&ys)
            .map(|(a, b)| cosine_distance(a, b))
            .sum::<Result<f64, _>>()?,
        DistanceMetric::Euclidean => xs
            .iter()
            .zip(&ys)
            .map(|(a, b)| euclidean_distance(a, b))
            .sum::<Result<f64, _>>()?,
        DistanceMetric::Mahalanobis(_) => {
            let pool: Vec<&[f64]> = xs.iter().chain(&ys).copied().collect();
            let d = DistanceMatrix::compute(&pool, metric)?;
            (0..n).map(|i| d.get(i, n + i)).sum()
        }
    };
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending edges; a zero-width null yields one bin.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() {
            return Self {
                edges: vec![0.0, 0.0],
                counts: vec![0],
            };
        }
        if hi <= lo || bins <= 1 {
            return Self {
                edges: vec![lo, hi],
                counts: vec![values.len() as u64],
            };
        }
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
        edges.push(hi);
        let mut counts = vec![0u64; bins];
        for v in values {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectBand {
    Negligible,
    Small,
    Medium,
    Large,
}

impl EffectBand {
    pub fn of(d: f64) -> Self {
        match d.abs() {
            x if x >= 0.8 => EffectBand::Large,
            x if x >= 0.5 => EffectBand::Medium,
            x if x >= 0.2 => EffectBand::Small,
            _ => EffectBand::Negligible,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EffectBand::Negligible => "negligible",
            EffectBand::Small => "small",
            EffectBand::Medium => "medium",
            EffectBand::Large => "large",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub metric: MetricKind,
    /// Shrinkage applied for Mahalanobis; absent for other metrics.
    pub lambda: Option<f64>,
    pub n: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub t_obs: f64,
    pub t_perm_mean: f64,
    pub t_perm_sd: f64,
    pub p_two_tailed: f64,
    pub d_pairs: f64,
    pub z_perm: f64,
    pub effect_band: EffectBand,
    pub seed: u64,
    pub rng: String,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub permutations: usize,
    pub seed: u64,
    pub histogram_bins: usize,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        Self {
            permutations: 5000,
            seed: 0,
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
        }
    }
}

/// Exact mean of the permutation statistic over all orderings of the pool.
fn null_expectation(dist: &DistanceMatrix) -> f64 {
    let m = dist.len();
    let total: f64 = (0..m)
        .map(|i| {
            (0..m)
                .filter(|&j| j != i)
                .map(|j| dist.get(i, j))
                .sum::<f64>()
        })
        .sum();
    total / (m * (m - 1)) as f64
}

/// Running mean / sum of squared deviations, combinable in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        values.fold(Self::default(), |mut acc, v| {
            acc.count += 1.0;
            let delta = v - acc.mean;
            acc.mean += delta / acc.count;
            acc.m2 += delta * (v - acc.mean);
            acc
        })
    }

    fn merge(self, other: Self) -> Self {
        if self.count == 0.0 {
            return other;
        }
        if other.count == 0.0 {
            return self;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        Self {
            count,
            mean: self.mean + delta * other.count / count,
            m2: self.m2 + other.m2 + delta * delta * self.count * other.count / count,
        }
    }

    fn sample_var(&self) -> f64 {
        if self.count > 1.0 {
            self.m2 / (self.count - 1.0)
        } else {
            0.0
        }
    }
}

/// Permutation test over two aligned groups.
pub fn permutation_test(
    x: &GroupEmbeddings,
    y: &GroupEmbeddings,
    metric: DistanceMetric,
    config: &PermutationConfig,
) -> Result<PermutationResult, StatsError> {
    check_aligned(x, y)?;
    permutation_test_raw(&slices(x), &slices(y), metric, config)
}

/// Permutation test over raw, positionally paired vectors.
pub fn permutation_test_raw(
    x: &[&[f64]],
    y: &[&[f64]],
    metric: DistanceMetric,
    config: &PermutationConfig,
) -> Result<PermutationResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(StatsError::TooFewSamples { needed: 2, got: n });
    }
    let b = config.permutations;
    if b < MIN_PERMUTATIONS {
        return Err(StatsError::TooFewPermutations(b));
    }
    let pool: Vec<&[f64]> = x.iter().chain(y).copied().collect();
    let dist = DistanceMatrix::compute(&pool, metric)?;

    let observed = Moments::of((0..n).map(|i| dist.get(i, n + i)));
    let t_obs = observed.mean;

    let draws: Vec<(f64, Moments)> = (0..b)
        .into_par_iter()
        .map(|iter| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(iter as u64);
            let mut order: Vec<usize> = (0..2 * n).collect();
            order.shuffle(&mut rng);
            let m = Moments::of((0..n).map(|i| dist.get(order[i], order[n + i])));
            (m.mean, m)
        })
        .collect();

    let t_perm: Vec<f64> = draws.iter().map(|(t, _)| *t).collect();
    let perm_moments = Moments::of(t_perm.iter().copied());
    let t_mean = perm_moments.mean;
    let t_sd = perm_moments.sample_var().sqrt();

    // Every position pair of a uniform shuffle is a uniform ordered pair of
    // distinct pool members, so the null expectation is the off-diagonal mean.
    let center = null_expectation(&dist);
    let observed_dev = (t_obs - center).abs();
    let tol = 1e-12 * t_obs.abs().max(center.abs()).max(1e-300);
    let extreme = t_perm
        .iter()
        .filter(|t| (*t - center).abs() >= observed_dev - tol)
        .count();
    let p = (1 + extreme) as f64 / (b + 1) as f64;

    let null = draws
        .iter()
        .fold(Moments::default(), |acc, (_, m)| acc.merge(*m));
    let pooled_var = ((observed.count - 1.0) * observed.sample_var()
        + (null.count - 1.0) * null.sample_var())
        / (observed.count + null.count - 2.0);
    let d_pairs = if pooled_var > 0.0 {
        (observed.mean - null.mean) / pooled_var.sqrt()
    } else {
        0.0
    };
    let z_perm = if t_sd > 0.0 {
        (t_obs - t_mean) / t_sd
    } else {
        0.0
    };

    Ok(PermutationResult {
        metric: metric.kind(),
        lambda: dist.lambda(),
        n,
        b,
        t_obs,
        t_perm_mean: t_mean,
        t_perm_sd: t_sd,
        p_two_tailed: p,
        d_pairs,
        z_perm,
        effect_band: EffectBand::of(d_pairs),
        seed: config.seed,
        rng: RNG_NAME.to_string(),
        histogram: Histogram::build(&t_perm, config.histogram_bins),
    })
}
