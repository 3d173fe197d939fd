//! Seeded Lloyd k-means with k-means++ seeding.

use rand::Rng;

use super::nearest;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// `k × dim`, entry-major.
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    pub iterations: usize,
}

impl KMeans {
    /// Sum of squared distances from each point to its assigned centroid.
    pub fn inertia(&self, points: &[f64], dim: usize) -> f64 {
        points
            .chunks_exact(dim)
            .zip(&self.labels)
            .map(|(p, &c)| sq_dist(p, &self.centroids[c * dim..(c + 1) * dim]))
            .sum()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Clusters `points` (`n × dim`, row-major) into `k` groups.
///
/// Labels are renumbered by first occurrence in `points`, so the result
/// does not depend on the order in which seeds happened to be drawn.
/// Empty clusters are re-seeded with the point farthest from its centroid.
/// Requires `n ≥ k ≥ 1`.
pub fn kmeans<R: Rng + ?Sized>(points: &[f64], dim: usize, k: usize, max_iters: usize, rng: &mut R) -> KMeans {
    let n = points.len() / dim;
    assert!(k >= 1 && n >= k, "kmeans needs at least k points");
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    // k-means++ seeding.
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = d2.iter().rposition(|&w| w > 0.0).expect("positive mass");
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // All remaining points coincide with a seed.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(pick);
        centroids.extend_from_slice(point(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), point(pick)));
        }
    }

    let mut labels = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let c = nearest(point(i), &centroids, dim);
            if *label != c {
                *label = c;
                changed = true;
            }
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s / counts[c] as f64;
                }
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(point(a), &centroids[labels[a] * dim..(labels[a] + 1) * dim]);
                        let db = sq_dist(point(b), &centroids[labels[b] * dim..(labels[b] + 1) * dim]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                centroids[c * dim..(c + 1) * dim].copy_from_slice(point(far));
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    for (i, label) in labels.iter_mut().enumerate() {
        *label = nearest(point(i), &centroids, dim);
    }

    // Renumber by first occurrence; unused centroids keep their relative order.
    let mut order: Vec<usize> = Vec::with_capacity(k);
    for &l in &labels {
        if !order.contains(&l) {
            order.push(l);
        }
    }
    for c in 0..k {
        if !order.contains(&c) {
            order.push(c);
        }
    }
    let mut remap = vec![0usize; k];
    let mut sorted = vec![0.0; k * dim];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
        sorted[new * dim..(new + 1) * dim].copy_from_slice(&centroids[old * dim..(old + 1) * dim]);
    }
    KMeans {
        centroids: sorted,
        labels: labels.into_iter().map(|l| remap[l]).collect(),
        iterations,
    }
}
