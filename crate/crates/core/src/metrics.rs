//! Clustering evaluation: Hungarian-matched accuracy, adjusted Rand index,
//! normalized mutual information, and the silhouette score.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stream_rng;
use crate::vecmath::{self, UnitEmbedding};

/// Counts of (predicted, true) label pairs. Labels are compacted to dense
/// row/column indices in ascending order of their original values.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

impl ContingencyTable {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        check_lengths(pred, truth, 1)?;
        let rows = dense_index(pred);
        let cols = dense_index(truth);
        let mut counts = vec![vec![0u64; cols.len()]; rows.len()];
        for (p, t) in pred.iter().zip(truth) {
            counts[rows[p]][cols[t]] += 1;
        }
        let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..cols.len())
            .map(|j| counts.iter().map(|r| r[j]).sum())
            .collect();
        Ok(ContingencyTable {
            counts,
            row_sums,
            col_sums,
            n: pred.len() as u64,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.row_sums.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_sums.len()
    }
}

fn dense_index(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut map = BTreeMap::new();
    for &l in labels {
        map.entry(l).or_insert(0);
    }
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    map
}

fn check_lengths(pred: &[usize], truth: &[usize], min: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    if pred.len() < min {
        return Err(Error::Empty(format!("need at least {min} labels")));
    }
    Ok(())
}

/// Minimum-cost perfect assignment on a square matrix (Hungarian method
/// with potentials, O(n³)). Returns `assignment[row] = col`.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Fraction of samples correctly labeled under the best one-to-one mapping
/// of predicted clusters onto true classes.
pub fn hungarian_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    let size = table.n_rows().max(table.n_cols());
    let max_count = table.counts.iter().flatten().copied().max().unwrap_or(0) as f64;
    // Padded cells have count zero.
    let cost: Vec<Vec<f64>> = (0..size)
        .map(|i| {
            (0..size)
                .map(|j| {
                    let c = table.counts.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0);
                    max_count - c as f64
                })
                .collect()
        })
        .collect();
    let assignment = solve_assignment(&cost);
    let matched: u64 = assignment
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < table.n_rows() && j < table.n_cols())
        .map(|(i, &j)| table.counts[i][j])
        .sum();
    Ok(matched as f64 / table.n as f64)
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index. When the adjustment denominator vanishes the
/// result is 1.0 for identical partitions and 0.0 otherwise.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth, 2)?;
    let table = ContingencyTable::new(pred, truth)?;
    let index: f64 = table.counts.iter().flatten().map(|&c| comb2(c)).sum();
    let rows: f64 = table.row_sums.iter().map(|&c| comb2(c)).sum();
    let cols: f64 = table.col_sums.iter().map(|&c| comb2(c)).sum();
    let expected = rows * cols / comb2(table.n);
    let max = (rows + cols) / 2.0;
    let denom = max - expected;
    if denom.abs() < 1e-12 {
        let identical = index == rows && index == cols;
        return Ok(if identical { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

fn entropy(sums: &[u64], n: f64) -> f64 {
    sums.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two
/// entropies (natural log). Both entropies zero gives 1.0; exactly one
/// zero gives 0.0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    let n = table.n as f64;
    let h_pred = entropy(&table.row_sums, n);
    let h_true = entropy(&table.col_sums, n);
    if h_pred == 0.0 && h_true == 0.0 {
        return Ok(1.0);
    }
    if h_pred == 0.0 || h_true == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let c = c as f64;
            mi += c / n * (c * n / (table.row_sums[i] as f64 * table.col_sums[j] as f64)).ln();
        }
    }
    Ok((mi / ((h_pred + h_true) / 2.0)).clamp(0.0, 1.0))
}

/// Mean silhouette with Euclidean distances. Samples in singleton clusters
/// score 0.
pub fn silhouette(embeddings: &[UnitEmbedding], assignments: &[usize]) -> Result<f64> {
    let points: Vec<&[f64]> = embeddings.iter().map(|e| e.as_slice()).collect();
    silhouette_points(&points, assignments)
}

/// Silhouette over any points (not only unit vectors).
pub fn silhouette_points(points: &[&[f64]], assignments: &[usize]) -> Result<f64> {
    if points.len() != assignments.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            actual: assignments.len(),
        });
    }
    let n_clusters = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; n_clusters];
    for &a in assignments {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Degenerate("silhouette needs at least two non-empty clusters".into()));
    }
    let scores: Vec<f64> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let own = assignments[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; n_clusters];
            for (j, p) in points.iter().enumerate() {
                if j != i {
                    sums[assignments[j]] += vecmath::squared_distance(points[i], p).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..n_clusters)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    Ok(vecmath::stable_sum(&scores) / points.len() as f64)
}

/// Silhouette over a seeded random subset of at most `max_samples` points.
pub fn silhouette_subsample(
    embeddings: &[UnitEmbedding],
    assignments: &[usize],
    max_samples: usize,
    seed: u64,
) -> Result<f64> {
    if embeddings.len() <= max_samples {
        return silhouette(embeddings, assignments);
    }
    let mut rng = stream_rng(seed, "silhouette-subsample");
    let mut picked = sample_indices(&mut rng, embeddings.len(), max_samples).into_vec();
    picked.sort_unstable();
    let points: Vec<&[f64]> = picked.iter().map(|&i| embeddings[i].as_slice()).collect();
    let labels: Vec<usize> = picked.iter().map(|&i| assignments[i]).collect();
    silhouette_points(&points, &labels)
}

/// Metrics for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub ari: f64,
    pub nmi: f64,
    pub silhouette: Option<f64>,
    pub n: usize,
    pub k: usize,
    pub mechanism: String,
    pub config_hash: String,
}

impl EvalReport {
    pub fn from_labels(
        pred: &[usize],
        truth: &[usize],
        k: usize,
        mechanism: impl Into<String>,
        config_hash: impl Into<String>,
    ) -> Result<Self> {
        Ok(EvalReport {
            acc: hungarian_accuracy(pred, truth)?,
            ari: ari(pred, truth)?,
            nmi: nmi(pred, truth)?,
            silhouette: None,
            n: pred.len(),
            k,
            mechanism: mechanism.into(),
            config_hash: config_hash.into(),
        })
    }
}
