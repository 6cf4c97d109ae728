//! Fine-grained label assignment.
//!
//! *Clustering inference* runs k-means over a batch of test embeddings.
//! *Centroid inference* classifies one embedding at a time against K
//! centroids built from the training set: each training cluster keeps only
//! members of its predominant coarse label, their mean is renormalized, and
//! a query takes the label of the most cosine-similar centroid.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{stream_rng, StreamRng};
use crate::vecmath::{self, UnitEmbedding};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when the relative inertia decrease falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            restarts: 10,
            max_iter: 100,
            tol: 1e-6,
            seed,
        }
    }
}

/// Result of k-means. `centroids` are cluster means (not renormalized), so
/// `inertia` is the usual within-cluster sum of squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step of the selected restart.
    pub inertia_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Sum of squared distances of points to their assigned centroids.
    pub fn recompute_inertia(&self, points: &[&[f64]]) -> f64 {
        let d: Vec<f64> = points
            .iter()
            .zip(&self.assignments)
            .map(|(p, &a)| vecmath::squared_distance(p, &self.centroids[a]))
            .collect();
        vecmath::stable_sum(&d)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = vecmath::squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding.
pub fn kmeans_plus_plus(points: &[&[f64]], k: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| vecmath::squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total = vecmath::stable_sum(&dist);
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc >= target {
                    break;
                }
            }
            pick.expect("positive total implies a positive entry")
        } else {
            // All remaining points coincide with a centroid.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        let c = points[next].to_vec();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(vecmath::squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign_all(points: &[&[f64]], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points.iter().map(|p| nearest(p, centroids)).unzip()
}

fn update_means(points: &[&[f64]], assignments: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    for (c, (sum, count)) in centroids.iter_mut().zip(sums.into_iter().zip(counts)) {
        if count > 0 {
            *c = sum.into_iter().map(|s| s / count as f64).collect();
        }
    }
}

/// Moves each empty cluster's centroid onto the point currently farthest
/// from its own centroid. Returns whether anything changed.
fn reseed_empty(points: &[&[f64]], assignments: &mut [usize], dists: &mut [f64], centroids: &mut [Vec<f64>]) -> bool {
    let mut sizes = vec![0usize; centroids.len()];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    let mut changed = false;
    for c in 0..centroids.len() {
        if sizes[c] > 0 {
            continue;
        }
        let donor = (0..points.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
        let Some(i) = donor else { break };
        if dists[i] <= 0.0 {
            // Nothing can be separated any further.
            break;
        }
        sizes[assignments[i]] -= 1;
        sizes[c] = 1;
        assignments[i] = c;
        dists[i] = 0.0;
        centroids[c] = points[i].to_vec();
        changed = true;
    }
    changed
}

/// Lloyd iterations from given initial centroids.
pub fn lloyd(points: &[&[f64]], mut centroids: Vec<Vec<f64>>, max_iter: usize, tol: f64) -> ClusterModel {
    let mut trace = Vec::new();
    let (mut assignments, mut dists) = assign_all(points, &centroids);
    for _ in 0..max_iter.max(1) {
        if reseed_empty(points, &mut assignments, &mut dists, &mut centroids) {
            let (a, d) = assign_all(points, &centroids);
            assignments = a;
            dists = d;
        }
        let inertia = vecmath::stable_sum(&dists);
        let prev = trace.last().copied();
        trace.push(inertia);
        update_means(points, &assignments, &mut centroids);
        if let Some(prev) = prev {
            if prev <= 0.0 || (prev - inertia) / prev < tol {
                break;
            }
        }
        let (a, d) = assign_all(points, &centroids);
        assignments = a;
        dists = d;
    }
    let mut model = ClusterModel {
        centroids,
        assignments,
        inertia: 0.0,
        inertia_trace: trace,
    };
    model.inertia = model.recompute_inertia(points);
    model
}

/// k-means++ with restarts, keeping the lowest-inertia model (earliest
/// restart on ties).
pub fn kmeans_points(points: &[&[f64]], config: &KMeansConfig) -> Result<ClusterModel> {
    if config.k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if points.len() < config.k {
        return Err(Error::InvalidArgument(format!(
            "cannot form {} clusters from {} points",
            config.k,
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::ShapeMismatch {
            what: "k-means input".into(),
            detail: "points differ in dimension".into(),
        });
    }
    let models: Vec<ClusterModel> = (0..config.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(config.seed, &format!("kmeans-restart-{r}"));
            let init = kmeans_plus_plus(points, config.k, &mut rng);
            lloyd(points, init, config.max_iter, config.tol)
        })
        .collect();
    let mut best = 0;
    for (i, m) in models.iter().enumerate() {
        if m.inertia < models[best].inertia {
            best = i;
        }
    }
    Ok(models.into_iter().nth(best).expect("at least one restart"))
}

pub fn kmeans(embeddings: &[UnitEmbedding], k: usize, seed: u64) -> Result<ClusterModel> {
    kmeans_with(embeddings, &KMeansConfig::new(k, seed))
}

pub fn kmeans_with(embeddings: &[UnitEmbedding], config: &KMeansConfig) -> Result<ClusterModel> {
    let points: Vec<&[f64]> = embeddings.iter().map(|e| e.as_slice()).collect();
    kmeans_points(&points, config)
}

/// Predicted fine labels are the k-means cluster indices.
pub fn clustering_inference(test_embeddings: &[UnitEmbedding], k: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(kmeans(test_embeddings, k, seed)?.assignments)
}

pub const CENTROID_BANK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidBank {
    pub version: u32,
    pub centroids: Vec<Vec<f64>>,
    /// Predominant coarse label of each source cluster.
    pub coarse_labels: Vec<usize>,
    pub normalized: bool,
    pub config_hash: Option<String>,
}

impl CentroidBank {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bank: CentroidBank = serde_json::from_str(&text)?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CENTROID_BANK_VERSION {
            return Err(Error::ShapeMismatch {
                what: "centroid bank".into(),
                detail: format!("unsupported version {}", self.version),
            });
        }
        if self.centroids.is_empty() || self.centroids.len() != self.coarse_labels.len() {
            return Err(Error::ShapeMismatch {
                what: "centroid bank".into(),
                detail: format!(
                    "{} centroids with {} coarse labels",
                    self.centroids.len(),
                    self.coarse_labels.len()
                ),
            });
        }
        let d = self.dim();
        for c in &self.centroids {
            if c.len() != d || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::ShapeMismatch {
                    what: "centroid bank".into(),
                    detail: "centroids must share one dimension and be finite".into(),
                });
            }
            if self.normalized && (vecmath::norm(c) - 1.0).abs() > vecmath::UNIT_TOL {
                return Err(Error::ShapeMismatch {
                    what: "centroid bank".into(),
                    detail: "normalized bank holds a non-unit centroid".into(),
                });
            }
        }
        Ok(())
    }
}

/// Clusters the training embeddings, filters every cluster to its
/// predominant coarse label (ties to the smaller label), and averages the
/// survivors. With `renormalize` the means are projected back to the unit
/// sphere.
pub fn build_centroids(
    train_embeddings: &[UnitEmbedding],
    coarse_labels: &[usize],
    k: usize,
    seed: u64,
    renormalize: bool,
) -> Result<CentroidBank> {
    build_centroids_with(train_embeddings, coarse_labels, &KMeansConfig::new(k, seed), renormalize)
}

/// [`build_centroids`] with explicit k-means settings.
pub fn build_centroids_with(
    train_embeddings: &[UnitEmbedding],
    coarse_labels: &[usize],
    config: &KMeansConfig,
    renormalize: bool,
) -> Result<CentroidBank> {
    if train_embeddings.len() != coarse_labels.len() {
        return Err(Error::DimensionMismatch {
            expected: train_embeddings.len(),
            actual: coarse_labels.len(),
        });
    }
    let model = kmeans_with(train_embeddings, config)?;
    centroids_from_clusters(train_embeddings, coarse_labels, &model, renormalize)
}

/// The filtering and averaging step of [`build_centroids`] for a given
/// clustering.
pub fn centroids_from_clusters(
    embeddings: &[UnitEmbedding],
    coarse_labels: &[usize],
    model: &ClusterModel,
    renormalize: bool,
) -> Result<CentroidBank> {
    let k = model.k();
    let n_coarse = coarse_labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; n_coarse]; k];
    for (&a, &c) in model.assignments.iter().zip(coarse_labels) {
        counts[a][c] += 1;
    }
    let dim = embeddings.first().map_or(0, UnitEmbedding::dim);
    let mut centroids = Vec::with_capacity(k);
    let mut predominant = Vec::with_capacity(k);
    for cluster in 0..k {
        let row = &counts[cluster];
        // max_by_key keeps the last maximum; scan for the first instead.
        let mut label = 0;
        for (c, &count) in row.iter().enumerate() {
            if count > row[label] {
                label = c;
            }
        }
        let members: Vec<&[f64]> = embeddings
            .iter()
            .zip(model.assignments.iter().zip(coarse_labels))
            .filter(|(_, (&a, &c))| a == cluster && c == label)
            .map(|(e, _)| e.as_slice())
            .collect();
        let mean: Vec<f64> = if members.is_empty() {
            // Empty cluster: fall back to the k-means centroid.
            model.centroids[cluster].clone()
        } else {
            (0..dim)
                .map(|j| {
                    let column: Vec<f64> = members.iter().map(|m| m[j]).collect();
                    vecmath::stable_sum(&column) / members.len() as f64
                })
                .collect()
        };
        let centroid = if renormalize {
            vecmath::normalize(&mean)?.into_inner()
        } else {
            mean
        };
        centroids.push(centroid);
        predominant.push(label);
    }
    Ok(CentroidBank {
        version: CENTROID_BANK_VERSION,
        centroids,
        coarse_labels: predominant,
        normalized: renormalize,
        config_hash: None,
    })
}

/// Index of the most cosine-similar centroid, ties to the smaller index.
/// Touches only the bank and the query: O(K·d).
pub fn centroid_inference(query: &UnitEmbedding, bank: &CentroidBank) -> usize {
    let q = query.as_slice();
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in bank.centroids.iter().enumerate() {
        let dot = vecmath::dot(q, c);
        let sim = if bank.normalized { dot } else { dot / vecmath::norm(c) };
        if sim > best.1 {
            best = (i, sim);
        }
    }
    best.0
}
