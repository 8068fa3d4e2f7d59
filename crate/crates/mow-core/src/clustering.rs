//! Warmup gradient clustering: per-task layer-averaged gradient
//! fingerprints, cosine k-means over them, and replication of the warmup
//! cluster modules into the full mixture.

use rand::Rng as _;

use crate::envsuite::ReplayBuffer;
use crate::error::{Error, Result};
use crate::model::MowModel;
use crate::rng::{derive_seed, seeded, MowRng};

/// Task-to-cluster map; total, frozen after warmup.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClusterAssignment {
    map: Vec<usize>,
    clusters: usize,
}

impl ClusterAssignment {
    pub fn new(map: Vec<usize>, clusters: usize) -> Result<Self> {
        if clusters == 0 || map.is_empty() {
            return Err(Error::Invalid("empty cluster assignment".into()));
        }
        if let Some(&bad) = map.iter().find(|&&c| c >= clusters) {
            return Err(Error::Invalid(format!(
                "cluster index {bad} out of range ({clusters} clusters)"
            )));
        }
        Ok(Self { map, clusters })
    }

    pub fn all_zero(num_tasks: usize) -> Self {
        Self {
            map: vec![0; num_tasks],
            clusters: 1,
        }
    }

    pub fn cluster_of(&self, task: usize) -> Result<usize> {
        self.map
            .get(task)
            .copied()
            .ok_or(Error::ClusterUnassigned(task))
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters
    }

    pub fn num_tasks(&self) -> usize {
        self.map.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }
}

/// One scalar (the gradient mean) per trainable parameter tensor, in
/// canonical name order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientFingerprint {
    pub task_id: usize,
    pub values: Vec<f64>,
}

/// Number of seeded batches accumulated per fingerprint.
pub const FINGERPRINT_BATCHES: usize = 8;

/// Accumulate the task's plain per-task loss gradients over
/// [`FINGERPRINT_BATCHES`] seeded batches and reduce every parameter tensor
/// to its mean. Tensors the loss never touches contribute zero.
pub fn fingerprint(
    model: &MowModel,
    buffer: &ReplayBuffer,
    seed: u64,
) -> Result<GradientFingerprint> {
    let task = buffer.task_id();
    let names = model.store.trainable_names();
    let mut sums = vec![0.0; names.len()];
    for b in 0..FINGERPRINT_BATCHES {
        let batch_seed = derive_seed(seed, &format!("fp-batch{b}"));
        let batch = buffer.sample_trajectory(
            model.cfg.wm_batch_size,
            model.cfg.wm_batch_length,
            batch_seed,
        )?;
        let grads = crate::trainer::task_loss_grads(model, &batch, batch_seed)?;
        for (i, name) in names.iter().enumerate() {
            if let Some(g) = grads.get(name) {
                sums[i] += g.sum() / g.numel() as f64;
            }
        }
    }
    Ok(GradientFingerprint {
        task_id: task,
        values: sums,
    })
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}

fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Pairwise cosine-similarity matrix of the fingerprints.
pub fn similarity_matrix(fps: &[GradientFingerprint]) -> Vec<Vec<f64>> {
    fps.iter()
        .map(|a| fps.iter().map(|b| cosine_sim(&a.values, &b.values)).collect())
        .collect()
}

const KMEANS_ITERS: usize = 50;

/// Cosine k-means over L2-normalized fingerprints: k-means++ seeding, 50
/// iterations, ties toward the lower index, empty clusters repaired by
/// splitting the largest. Deterministic in `seed`.
pub fn cluster_tasks(
    fps: &[GradientFingerprint],
    num_clusters: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    let k = fps.len();
    if num_clusters > k {
        return Err(Error::TooManyClusters {
            clusters: num_clusters,
            tasks: k,
        });
    }
    if num_clusters == 0 {
        return Err(Error::Invalid("need at least one cluster".into()));
    }
    let points: Vec<Vec<f64>> = fps.iter().map(|f| normalize(&f.values)).collect();
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Invalid("fingerprint lengths differ".into()));
    }
    let mut rng: MowRng = seeded(seed, "kmeans");

    // k-means++ seeding with cosine distance (1 - similarity)
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(num_clusters);
    centroids.push(points[rng.gen_range(0..k)].clone());
    while centroids.len() < num_clusters {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                let best = centroids
                    .iter()
                    .map(|c| 1.0 - cosine_sim(p, c))
                    .fold(f64::INFINITY, f64::min);
                best * best
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total <= 1e-18 {
            rng.gen_range(0..k)
        } else {
            let mut u: f64 = rng.gen_range(0.0..total);
            let mut idx = k - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        };
        centroids.push(points[pick].clone());
    }

    let mut assign = vec![0usize; k];
    for _ in 0..KMEANS_ITERS {
        // assignment step: most-similar centroid, ties toward the lower index
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let s = cosine_sim(p, cent);
                if s > best_sim {
                    best_sim = s;
                    best = c;
                }
            }
            assign[i] = best;
        }
        // empty-cluster repair: split the largest cluster at its farthest member
        loop {
            let mut counts = vec![0usize; num_clusters];
            for &a in &assign {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let largest = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            let farthest = (0..k)
                .filter(|&i| assign[i] == largest)
                .min_by(|&a, &b| {
                    cosine_sim(&points[a], &centroids[largest])
                        .partial_cmp(&cosine_sim(&points[b], &centroids[largest]))
                        .unwrap()
                        .then(a.cmp(&b))
                })
                .unwrap();
            assign[farthest] = empty;
            centroids[empty] = points[farthest].clone();
        }
        // update step: normalized member means
        for (c, cent) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..k).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; dim];
            for &m in &members {
                for (acc, v) in mean.iter_mut().zip(&points[m]) {
                    *acc += v;
                }
            }
            for v in mean.iter_mut() {
                *v /= members.len() as f64;
            }
            *cent = normalize(&mean);
        }
    }
    ClusterAssignment::new(assign, num_clusters)
}

/// Copy the warmup cluster's VAE, prediction heads, and critic (with
/// optimizer moments and EMA shadows) into `assignment.num_clusters()`
/// independent sets, then install the assignment. Experts, shared stack,
/// router, embeddings, and actor carry over unchanged.
pub fn replicate_modules(model: &mut MowModel, assignment: ClusterAssignment) {
    assert_eq!(model.clusters, 1, "replication starts from the warmup model");
    assert_eq!(assignment.num_tasks(), model.cfg.num_tasks);
    let n_m = assignment.num_clusters();
    for i in 1..n_m {
        for src_prefix in ["vae0.", "head0.", "critic0."] {
            let dst_prefix = format!("{}{i}.", &src_prefix[..src_prefix.len() - 2]);
            for name in model.store.names_with_prefix(src_prefix) {
                let renamed = format!("{dst_prefix}{}", &name[src_prefix.len()..]);
                let tensor = model.store.get(&name).clone();
                if model.store.is_trainable(&name) {
                    model.store.insert(&renamed, tensor);
                } else {
                    model.store.insert_buffer(&renamed, tensor);
                }
            }
            let dst = dst_prefix;
            model.wm_opt.copy_prefix(src_prefix, &dst);
            model.ac_opt.copy_prefix(src_prefix, &dst);
        }
    }
    model.clusters = n_m;
    model.assignment = assignment;
}
