//! Seeded spherical k-means over unit token vectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::scoring::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub clusters: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            clusters: 256,
            iterations: 10,
            seed: 0,
        }
    }
}

/// Best centroid by dot product; ties go to the lowest centroid index.
pub fn nearest(vector: &[f32], centroids: &[f32], dim: usize) -> (u32, f64) {
    let mut best = (0u32, f64::NEG_INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let s = dot(vector, centroid);
        if s > best.1 {
            best = (c as u32, s);
        }
    }
    best
}

pub fn assign(vectors: &[f32], dim: usize, centroids: &[f32]) -> Vec<(u32, f64)> {
    vectors
        .par_chunks_exact(dim)
        .map(|v| nearest(v, centroids, dim))
        .collect()
}

/// Returns `clusters x dim` unit centroids (fewer if there are fewer vectors).
///
/// Initial centroids are a seeded sample of distinct vectors. A cluster that
/// ends an iteration empty is re-seeded with the vector least similar to its
/// current centroid.
pub fn spherical_kmeans(vectors: &[f32], dim: usize, params: &KMeansParams) -> Vec<f32> {
    let n = vectors.len() / dim;
    let k = params.clusters.min(n);
    if k == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picks.sort_unstable();
    let mut centroids: Vec<f32> = picks
        .iter()
        .flat_map(|&i| vectors[i * dim..(i + 1) * dim].iter().copied())
        .collect();

    for _ in 0..params.iterations {
        let assignment = assign(vectors, dim, &centroids);
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assignment.iter().enumerate() {
            let c = c as usize;
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&vectors[i * dim..(i + 1) * dim])
            {
                *s += f64::from(v);
            }
        }

        // farthest points first, lowest index breaking ties
        let mut far: Vec<usize> = (0..n).collect();
        far.sort_by(|&a, &b| assignment[a].1.total_cmp(&assignment[b].1).then(a.cmp(&b)));
        let mut far = far.into_iter();

        for c in 0..k {
            let sum = &sums[c * dim..(c + 1) * dim];
            let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            let target = &mut centroids[c * dim..(c + 1) * dim];
            if counts[c] == 0 || norm == 0.0 {
                if let Some(i) = far.next() {
                    target.copy_from_slice(&vectors[i * dim..(i + 1) * dim]);
                }
            } else {
                for (t, &s) in target.iter_mut().zip(sum) {
                    *t = (s / norm) as f32;
                }
            }
        }
    }
    centroids
}
