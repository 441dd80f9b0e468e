//! Exact (O(n²)) t-SNE with KL and trustworthiness diagnostics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::GroupEmbeddings;

pub const Q_FLOOR: f64 = 1e-12;
const ENTROPY_TOL: f64 = 1e-5;
const MAX_BANDWIDTH_STEPS: usize = 50;
const MAX_LOG_BETA_STEP: f64 = 8.0;
const DUPLICATE_JITTER: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TsneError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("perplexity {perplexity} is infeasible for {n} points")]
    InfeasiblePerplexity { perplexity: f64, n: usize },
    #[error("non-finite input coordinate in row {0}")]
    NonFinite(usize),
    #[error("dimension mismatch in row {row}: expected {expected}, got {got}")]
    DimMismatch {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bandwidth search produced non-finite affinities in row {0}")]
    Bandwidth(usize),
    #[error("embedding diverged to non-finite coordinates at iteration {0}")]
    Diverged(usize),
    #[error("trustworthiness k={k} requires k < n/2 (n={n})")]
    InfeasibleK { k: usize, n: usize },
}

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, TsneError> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(TsneError::Shape("rows must have length n".into()));
        }
        Ok(Self {
            n,
            data: rows.concat(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn validate_input(x: &[&[f64]]) -> Result<(), TsneError> {
    let dim = x.first().map_or(0, |r| r.len());
    for (row, v) in x.iter().enumerate() {
        if v.len() != dim {
            return Err(TsneError::DimMismatch {
                row,
                expected: dim,
                got: v.len(),
            });
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(TsneError::NonFinite(row));
        }
    }
    Ok(())
}

/// Row-normalized Gaussian affinities with a bandwidth found for the target
/// perplexity; also returns per-row precisions β = 1/(2σ²).
pub fn conditional_affinities(
    x: &[&[f64]],
    perplexity: f64,
) -> Result<(SquareMatrix, Vec<f64>), TsneError> {
    let n = x.len();
    if n < 4 {
        return Err(TsneError::TooFewPoints { needed: 4, got: n });
    }
    if !(perplexity > 1.0 && perplexity <= (n - 1) as f64) {
        return Err(TsneError::InfeasiblePerplexity { perplexity, n });
    }
    validate_input(x)?;
    let target = perplexity.ln();
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d: Vec<f64> = (0..n).map(|j| sq_dist(x[i], x[j])).collect();
            row_affinities(i, &d, target)
        })
        .collect();
    if let Some(row) = rows
        .iter()
        .position(|(r, _)| r.iter().any(|v| !v.is_finite()))
    {
        return Err(TsneError::Bandwidth(row));
    }
    let betas = rows.iter().map(|(_, b)| *b).collect();
    let data = rows.into_iter().flat_map(|(r, _)| r).collect();
    Ok((SquareMatrix { n, data }, betas))
}

/// Entropy (nats) and probabilities of one row at precision β.
fn row_at(i: usize, d: &[f64], dmin: f64, beta: f64) -> (Vec<f64>, f64, f64) {
    let mut p: Vec<f64> = d
        .iter()
        .enumerate()
        .map(|(j, dj)| {
            if j == i {
                0.0
            } else {
                (-beta * (dj - dmin)).exp()
            }
        })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    let mean_d: f64 = p.iter().zip(d).map(|(pj, dj)| pj * (dj - dmin)).sum();
    let var_d: f64 = p
        .iter()
        .zip(d)
        .map(|(pj, dj)| pj * (dj - dmin - mean_d).powi(2))
        .sum();
    (p, z.ln() + beta * mean_d, var_d)
}

fn row_affinities(i: usize, d: &[f64], target: f64) -> (Vec<f64>, f64) {
    let off: Vec<f64> = d
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, v)| *v)
        .collect();
    let dmin = off.iter().copied().fold(f64::INFINITY, f64::min);
    let dmax = off.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = off.iter().map(|v| v - dmin).sum::<f64>() / off.len() as f64;
    if dmax - dmin <= 1e-12 * dmax {
        // neighbors equidistant to machine precision: the row is uniform for every β
        let p = (0..d.len())
            .map(|j| if j == i { 0.0 } else { 1.0 / off.len() as f64 })
            .collect();
        return (p, 1.0);
    }
    // Newton on log β, safeguarded by a bisection bracket.
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut log_beta = (1.0 / spread).ln();
    let mut best = (Vec::new(), log_beta.exp());
    for _ in 0..MAX_BANDWIDTH_STEPS {
        let beta = log_beta.exp();
        let (p, h, var) = row_at(i, d, dmin, beta);
        let diff = h - target;
        best = (p, beta);
        if diff.abs() < ENTROPY_TOL * std::f64::consts::LN_2 {
            break;
        }
        // entropy decreases in β
        if diff > 0.0 {
            lo = log_beta;
        } else {
            hi = log_beta;
        }
        let slope = -beta * beta * var;
        let newton = if slope < 0.0 {
            log_beta - (diff / slope).clamp(-MAX_LOG_BETA_STEP, MAX_LOG_BETA_STEP)
        } else {
            f64::NAN
        };
        log_beta = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else if hi.is_infinite() {
            log_beta + 2.0
        } else if lo.is_infinite() {
            log_beta - 2.0
        } else {
            0.5 * (lo + hi)
        };
    }
    best
}

/// Symmetrized joint affinities P = (P_{j|i} + P_{i|j}) / 2n.
pub fn pairwise_affinities(x: &[&[f64]], perplexity: f64) -> Result<SquareMatrix, TsneError> {
    let (cond, _) = conditional_affinities(x, perplexity)?;
    Ok(symmetrize(&cond))
}

fn symmetrize(cond: &SquareMatrix) -> SquareMatrix {
    let n = cond.n;
    let denom = 2.0 * n as f64;
    let data = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            (cond.get(i, j) + cond.get(j, i)) / denom
        })
        .collect();
    SquareMatrix { n, data }
}

/// Student-t kernel weights w_ij = 1/(1+‖y_i − y_j‖²) and their sum.
fn student_weights(y: &[[f64; 2]]) -> (SquareMatrix, f64) {
    let n = y.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        let dx = y[i][0] - y[j][0];
                        let dy = y[i][1] - y[j][1];
                        1.0 / (1.0 + dx * dx + dy * dy)
                    }
                })
                .collect()
        })
        .collect();
    let row_sums: Vec<f64> = rows.iter().map(|r| r.iter().sum()).collect();
    let total = row_sums.iter().sum();
    (
        SquareMatrix {
            n,
            data: rows.concat(),
        },
        total,
    )
}

/// Low-dimensional joint affinities Q for the layout `y`.
pub fn low_dim_affinities(y: &[[f64; 2]]) -> SquareMatrix {
    let (w, total) = student_weights(y);
    SquareMatrix {
        n: w.n,
        data: w.data.iter().map(|v| v / total).collect(),
    }
}

/// Gradient of KL(P‖Q(Y)) with respect to each y_i.
pub fn tsne_gradient(p: &SquareMatrix, y: &[[f64; 2]]) -> Result<Vec<[f64; 2]>, TsneError> {
    if p.n != y.len() {
        return Err(TsneError::Shape(format!(
            "P is {}x{}, Y has {} rows",
            p.n,
            p.n,
            y.len()
        )));
    }
    let (w, total) = student_weights(y);
    Ok(gradient_with(p, 1.0, y, &w, total))
}

fn gradient_with(
    p: &SquareMatrix,
    exaggeration: f64,
    y: &[[f64; 2]],
    w: &SquareMatrix,
    total: f64,
) -> Vec<[f64; 2]> {
    let n = y.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = [0.0, 0.0];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let wij = w.get(i, j);
                let coeff = 4.0 * (exaggeration * p.get(i, j) - wij / total) * wij;
                g[0] += coeff * (y[i][0] - y[j][0]);
                g[1] += coeff * (y[i][1] - y[j][1]);
            }
            g
        })
        .collect()
}

/// KL(P‖Q) = Σ p log(p/q) over p > 0, with q floored at 1e-12.
pub fn kl_divergence(p: &SquareMatrix, q: &SquareMatrix) -> Result<f64, TsneError> {
    if p.n != q.n {
        return Err(TsneError::Shape(format!(
            "P is {}x{}, Q is {}x{}",
            p.n, p.n, q.n, q.n
        )));
    }
    Ok(p.data
        .iter()
        .zip(&q.data)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, qv)| pv * (pv / qv.max(Q_FLOOR)).ln())
        .sum::<f64>()
        .max(0.0))
}

/// Neighbor order of `i` (nearest first, ties by index), excluding `i`.
fn neighbor_order(i: usize, dist: impl Fn(usize, usize) -> f64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    idx.sort_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)).then(a.cmp(&b)));
    idx
}

/// Trustworthiness of a low-dimensional layout with respect to the original
/// vectors, in [0, 1].
pub fn trustworthiness(x_high: &[&[f64]], y_low: &[&[f64]], k: usize) -> Result<f64, TsneError> {
    let n = x_high.len();
    if y_low.len() != n {
        return Err(TsneError::Shape(format!(
            "{} high rows vs {} low rows",
            n,
            y_low.len()
        )));
    }
    if k == 0 || 2 * k >= n {
        return Err(TsneError::InfeasibleK { k, n });
    }
    validate_input(x_high)?;
    validate_input(y_low)?;
    let penalty: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let high = neighbor_order(i, |a, b| sq_dist(x_high[a], x_high[b]), n);
            let low = neighbor_order(i, |a, b| sq_dist(y_low[a], y_low[b]), n);
            let mut rank = vec![0usize; n];
            for (r, &j) in high.iter().enumerate() {
                rank[j] = r + 1;
            }
            low[..k]
                .iter()
                .filter(|&&j| rank[j] > k)
                .map(|&j| (rank[j] - k) as f64)
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    let (nf, kf) = (n as f64, k as f64);
    let t = 1.0 - 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0)) * penalty;
    Ok(t.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub min_gain: f64,
    pub kl_every: usize,
    pub trustworthiness_k: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            min_gain: 0.01,
            kl_every: 50,
            trustworthiness_k: 5,
            seed: 0,
        }
    }
}

impl TsneConfig {
    /// Largest perplexity accepted for `n` points is just under (n − 1)/3.
    pub fn check(&self, n: usize) -> Result<(), TsneError> {
        if n < 4 {
            return Err(TsneError::TooFewPoints { needed: 4, got: n });
        }
        if !(self.perplexity > 1.0 && self.perplexity < (n as f64 - 1.0) / 3.0) {
            return Err(TsneError::InfeasiblePerplexity {
                perplexity: self.perplexity,
                n,
            });
        }
        if self.trustworthiness_k == 0 || 2 * self.trustworthiness_k >= n {
            return Err(TsneError::InfeasibleK {
                k: self.trustworthiness_k,
                n,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlCheckpoint {
    pub iteration: usize,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneFit {
    pub y: Vec<[f64; 2]>,
    pub kl_final: f64,
    pub kl_history: Vec<KlCheckpoint>,
    pub trustworthiness: f64,
}

impl TsneFit {
    /// Checkpoints recorded after early exaggeration ended.
    pub fn post_exaggeration(&self, config: &TsneConfig) -> Vec<KlCheckpoint> {
        self.kl_history
            .iter()
            .filter(|c| c.iteration > config.exaggeration_iterations)
            .copied()
            .collect()
    }
}

/// Adds tiny seeded noise to exact duplicate rows (after their first occurrence).
fn jitter_duplicates(x: &[&[f64]], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, DUPLICATE_JITTER).expect("valid sigma");
    let mut seen: std::collections::HashSet<Vec<u64>> = std::collections::HashSet::new();
    x.iter()
        .map(|row| {
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            if seen.insert(key) {
                row.to_vec()
            } else {
                row.iter().map(|v| v + normal.sample(rng)).collect()
            }
        })
        .collect()
}

pub fn tsne_fit(x: &[&[f64]], config: &TsneConfig) -> Result<TsneFit, TsneError> {
    let n = x.len();
    config.check(n)?;
    validate_input(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jittered = jitter_duplicates(x, &mut rng);
    let rows: Vec<&[f64]> = jittered.iter().map(Vec::as_slice).collect();
    let p = pairwise_affinities(&rows, config.perplexity)?;

    let init = Normal::new(0.0, 1e-4).expect("valid sigma");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [init.sample(&mut rng), init.sample(&mut rng)])
        .collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut history = Vec::new();

    for iter in 0..config.iterations {
        let (exaggeration, momentum) = if iter < config.exaggeration_iterations {
            (config.early_exaggeration, config.initial_momentum)
        } else {
            (1.0, config.final_momentum)
        };
        let (w, total) = student_weights(&y);
        let grad = gradient_with(&p, exaggeration, &y, &w, total);
        for i in 0..n {
            for c in 0..2 {
                let g = grad[i][c];
                gains[i][c] = if (g > 0.0) != (update[i][c] > 0.0) {
                    gains[i][c] + 0.2
                } else {
                    (gains[i][c] * 0.8).max(config.min_gain)
                };
                update[i][c] = momentum * update[i][c] - config.learning_rate * gains[i][c] * g;
                y[i][c] += update[i][c];
            }
        }
        let cx = y.iter().map(|p| p[0]).sum::<f64>() / n as f64;
        let cy = y.iter().map(|p| p[1]).sum::<f64>() / n as f64;
        for pt in &mut y {
            pt[0] -= cx;
            pt[1] -= cy;
        }
        if y.iter().any(|pt| !pt[0].is_finite() || !pt[1].is_finite()) {
            return Err(TsneError::Diverged(iter + 1));
        }
        if config.kl_every > 0 && (iter + 1) % config.kl_every == 0 {
            let kl = kl_divergence(&p, &low_dim_affinities(&y))?;
            history.push(KlCheckpoint {
                iteration: iter + 1,
                kl,
            });
        }
    }

    let kl_final = kl_divergence(&p, &low_dim_affinities(&y))?;
    let low: Vec<&[f64]> = y.iter().map(|pt| pt.as_slice()).collect();
    let trust = trustworthiness(x, &low, config.trustworthiness_k)?;
    Ok(TsneFit {
        y,
        kl_final,
        kl_history: history,
        trustworthiness: trust,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsnePoint {
    pub essay_id: String,
    pub group_label: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub points: Vec<TsnePoint>,
    pub kl_final: f64,
    pub kl_history: Vec<KlCheckpoint>,
    pub trustworthiness_k: usize,
    pub trustworthiness: f64,
    pub config: TsneConfig,
}

/// Projects the union of several groups into one layout.
pub fn tsne_groups(
    groups: &[GroupEmbeddings],
    config: &TsneConfig,
) -> Result<TsneResult, TsneError> {
    let mut labels = Vec::new();
    let mut rows: Vec<&[f64]> = Vec::new();
    for g in groups {
        for (id, v) in &g.records {
            labels.push((id.clone(), g.group_label.clone()));
            rows.push(v.values());
        }
    }
    let fit = tsne_fit(&rows, config)?;
    Ok(TsneResult {
        points: labels
            .into_iter()
            .zip(&fit.y)
            .map(|((essay_id, group_label), pt)| TsnePoint {
                essay_id,
                group_label,
                x: pt[0],
                y: pt[1],
            })
            .collect(),
        kl_final: fit.kl_final,
        kl_history: fit.kl_history,
        trustworthiness_k: config.trustworthiness_k,
        trustworthiness: fit.trustworthiness,
        config: config.clone(),
    })
}
