//! K-means centered sampling: cluster identities by embedding, then draw
//! training batches from within one cluster so negatives are hard.

use crate::backbone::EmbeddingBackbone;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Mean of an identity's unit-normalized image embeddings, re-normalized.
#[derive(Debug, Clone)]
pub struct IdentityCentroid {
    pub identity: usize,
    pub centroid: Vec<f64>,
    pub image_count: usize,
}

/// Frozen K-means result over identity centroids.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClusterIndex {
    pub k: usize,
    /// identity -> cluster.
    pub assignment: Vec<usize>,
    /// cluster -> identity list.
    pub clusters: Vec<Vec<usize>>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration; non-increasing.
    pub inertia_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Uniform,
    Kcs,
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplingMode::Uniform => "uniform",
            SamplingMode::Kcs => "kcs",
        })
    }
}

/// B distinct identities with n images each, in identity-major order.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    /// The B distinct identity labels.
    pub identities: Vec<usize>,
    /// Dataset sample indices, length B*n, grouped by identity.
    pub sample_indices: Vec<usize>,
    /// Identity label of each sample, length B*n.
    pub sample_identities: Vec<usize>,
    pub images_per_identity: usize,
    pub mode: SamplingMode,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }
}

/// Per-identity mean of unit-norm image embeddings, re-normalized.
pub fn compute_identity_centroids(
    dataset: &LabeledImageSet,
    backbone: &EmbeddingBackbone,
) -> Result<Vec<IdentityCentroid>> {
    let d = backbone.embedding_dim();
    let mut sums = vec![vec![0.0; d]; dataset.identity_count()];
    let mut counts = vec![0usize; dataset.identity_count()];
    // batch the embedding passes; chunk size trades memory for matmul size
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(64) {
        let rows = backbone.embed_batch(&dataset.batch_tensor(chunk))?;
        let v = rows.to_vec();
        for (r, &idx) in chunk.iter().enumerate() {
            let id = dataset.labels()[idx];
            counts[id] += 1;
            for (s, x) in sums[id].iter_mut().zip(&v[r * d..(r + 1) * d]) {
                *s += x;
            }
        }
    }
    let mut out = Vec::with_capacity(sums.len());
    for (identity, (mut sum, count)) in sums.into_iter().zip(counts).enumerate() {
        if count == 0 {
            return Err(Error::Data(format!("identity {identity} has no images")));
        }
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        sum.iter_mut().for_each(|x| *x /= norm);
        out.push(IdentityCentroid { identity, centroid: sum, image_count: count });
    }
    Ok(out)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ initialization, Euclidean distance.
/// Empty clusters are repaired by stealing the farthest point from the
/// largest cluster.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> Result<ClusterIndex> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k-means needs 1 <= K <= {n} points, got {k}")));
    }
    let d = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut min_d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = min_d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centers.push(points[next].clone());
        for (m, p) in min_d2.iter_mut().zip(points) {
            *m = m.min(dist2(p, centers.last().unwrap()));
        }
    }

    let mut assignment = vec![0usize; n];
    let mut inertia_trace = Vec::new();
    for _ in 0..max_iters.max(1) {
        // assignment step
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (best, best_d2) = centers
                .iter()
                .enumerate()
                .map(|(c, ctr)| (c, dist2(p, ctr)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
            inertia += best_d2;
        }
        inertia_trace.push(inertia);

        // empty-cluster repair: move the largest cluster's farthest point
        loop {
            let mut sizes = vec![0usize; k];
            assignment.iter().for_each(|&c| sizes[c] += 1);
            let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
            let largest = sizes
                .iter()
                .enumerate()
                .max_by_key(|(_, &s)| s)
                .unwrap()
                .0;
            let victim = (0..n)
                .filter(|&i| assignment[i] == largest)
                .max_by(|&a, &b| {
                    dist2(&points[a], &centers[largest])
                        .partial_cmp(&dist2(&points[b], &centers[largest]))
                        .unwrap()
                })
                .unwrap();
            assignment[victim] = empty;
            centers[empty] = points[victim].clone();
        }

        // update step
        let mut new_centers = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (nc, x) in new_centers[c].iter_mut().zip(p) {
                *nc += x;
            }
        }
        for (c, count) in new_centers.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|x| *x /= *count as f64);
        }
        centers = new_centers;
        if !changed {
            break;
        }
    }

    let inertia = points
        .iter()
        .zip(&assignment)
        .map(|(p, &c)| dist2(p, &centers[c]))
        .sum();
    let mut clusters = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        clusters[c].push(i);
    }
    Ok(ClusterIndex { k, assignment, clusters, centers, inertia, inertia_trace })
}

/// Cluster identity centroids with the desk-scale default K = max(2, I/10).
pub fn default_k(identities: usize) -> usize {
    (identities / 10).max(2).min(identities)
}

fn draw_identity_images(
    dataset: &LabeledImageSet,
    identity: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let pool = dataset.indices_of(identity);
    if pool.len() >= n {
        // partial Fisher-Yates: first n of a shuffle, without replacement
        let mut pool = pool;
        for i in 0..n {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(n);
        pool
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Draw B distinct identities and n images per identity. `Kcs` mode picks one
/// cluster with probability proportional to its identity count and draws all
/// identities from it, completing undersized clusters from the nearest
/// cluster by centroid distance.
pub fn sample_batch(
    index: Option<&ClusterIndex>,
    dataset: &LabeledImageSet,
    b: usize,
    n: usize,
    mode: SamplingMode,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingBatch> {
    let n_id = dataset.identity_count();
    if b == 0 || n == 0 {
        return Err(Error::Config("batch needs B >= 1 and n >= 1".into()));
    }
    if n_id < b {
        return Err(Error::Config(format!(
            "dataset has {n_id} identities, batch needs {b}"
        )));
    }
    let identities: Vec<usize> = match mode {
        SamplingMode::Uniform => {
            let mut all: Vec<usize> = (0..n_id).collect();
            for i in 0..b {
                let j = rng.random_range(i..all.len());
                all.swap(i, j);
            }
            all.truncate(b);
            all
        }
        SamplingMode::Kcs => {
            let index = index.ok_or_else(|| {
                Error::Config("kcs sampling requires a cluster index".into())
            })?;
            if index.assignment.len() != n_id {
                return Err(Error::Config(format!(
                    "cluster index covers {} identities, dataset has {n_id}",
                    index.assignment.len()
                )));
            }
            // cluster chosen with probability proportional to identity count
            let mut target = rng.random_range(0..n_id);
            let mut chosen = index.k - 1;
            for (c, members) in index.clusters.iter().enumerate() {
                if target < members.len() {
                    chosen = c;
                    break;
                }
                target -= members.len();
            }
            let mut pool = index.clusters[chosen].clone();
            // undersized cluster: complete from nearest clusters by center distance
            if pool.len() < b {
                let mut others: Vec<usize> =
                    (0..index.k).filter(|&c| c != chosen).collect();
                others.sort_by(|&x, &y| {
                    dist2(&index.centers[x], &index.centers[chosen])
                        .partial_cmp(&dist2(&index.centers[y], &index.centers[chosen]))
                        .unwrap()
                });
                for c in others {
                    pool.extend_from_slice(&index.clusters[c]);
                    if pool.len() >= b {
                        break;
                    }
                }
            }
            for i in 0..b {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate(b);
            pool
        }
    };
    let mut sample_indices = Vec::with_capacity(b * n);
    let mut sample_identities = Vec::with_capacity(b * n);
    for &id in &identities {
        sample_indices.extend(draw_identity_images(dataset, id, n, rng));
        sample_identities.extend(std::iter::repeat_n(id, n));
    }
    Ok(TrainingBatch {
        identities,
        sample_indices,
        sample_identities,
        images_per_identity: n,
        mode,
    })
}
