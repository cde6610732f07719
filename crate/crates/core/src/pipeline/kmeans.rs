//! k-means++ seeding followed by Lloyd iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
    pub converged: bool,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        *self.inertia_trace.last().unwrap_or(&0.0)
    }
}

fn nearest(v: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, squared_distance(v, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn seed_centroids(vectors: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![vectors[rng.random_range(0..vectors.len())].clone()];
    let mut d2: Vec<f64> = vectors.iter().map(|v| squared_distance(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // every point coincides with a centroid; take the first not yet chosen
            (0..vectors.len()).find(|&i| !centroids.contains(&vectors[i])).unwrap_or(0)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut idx = vectors.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        };
        centroids.push(vectors[pick].clone());
        let last = centroids.last().expect("just pushed");
        for (d, v) in d2.iter_mut().zip(vectors) {
            *d = d.min(squared_distance(v, last));
        }
    }
    centroids
}

/// Cluster `vectors` into `k` groups; deterministic for a given seed.
pub fn kmeans_cluster(vectors: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if k > vectors.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {} vectors", vectors.len())));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(vectors, k, &mut rng);
    let mut assignments = vec![usize::MAX; vectors.len()];
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters.max(1) {
        let mut inertia = 0.0;
        let mut changed = false;
        for (a, v) in assignments.iter_mut().zip(vectors) {
            let (c, d) = nearest(v, &centroids);
            inertia += d;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        trace.push(inertia);
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (a, v) in assignments.iter().zip(vectors) {
            counts[*a] += 1;
            for (s, x) in sums[*a].iter_mut().zip(v) {
                *s += x;
            }
        }
        for (c, (s, n)) in centroids.iter_mut().zip(sums.into_iter().zip(counts)) {
            // an emptied cluster keeps its centroid
            if n > 0 {
                *c = s.into_iter().map(|x| x / n as f64).collect();
            }
        }
    }
    Ok(KMeansResult { assignments, centroids, inertia_trace: trace, converged })
}
