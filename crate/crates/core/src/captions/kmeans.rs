//! Seeded k-means with k-means++ initialization, used for the offline
//! clustering of triplet text embeddings.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Cluster `points` (rows) into at most `k` clusters. Returns the assignment
/// of each row. Deterministic for a fixed seed.
pub fn kmeans_assign(points: &Array2<f64>, k: usize, iters: usize, seed: u64) -> Vec<usize> {
    let n = points.nrows();
    let d = points.ncols();
    let k = k.min(n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centers = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&points.row(first));
    let mut dist2: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = dist2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centers.row_mut(c).assign(&points.row(pick));
        for i in 0..n {
            dist2[i] = dist2[i].min(sq_dist(points, i, &centers, c));
        }
    }

    // Lloyd iterations.
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d2 = sq_dist(points, i, &centers, c);
                if d2 < best_d {
                    best_d = d2;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros((k, d));
        for i in 0..n {
            counts[assign[i]] += 1;
            for j in 0..d {
                sums[[assign[i], j]] += points[[i, j]];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[[c, j]] = sums[[c, j]] / counts[c] as f64;
                }
            }
        }
    }
    assign
}

fn sq_dist(points: &Array2<f64>, i: usize, centers: &Array2<f64>, c: usize) -> f64 {
    points
        .row(i)
        .iter()
        .zip(centers.row(c).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn deterministic_under_fixed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = Array2::from_shape_fn((40, 8), |_| rng.random_range(-1.0..1.0));
        let a = kmeans_assign(&pts, 5, 50, 7);
        let b = kmeans_assign(&pts, 5, 50, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn k_is_capped_by_point_count() {
        let pts = Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64);
        let assign = kmeans_assign(&pts, 100, 50, 0);
        // 5 distinct points and k capped at 5: all singleton clusters.
        let mut seen = assign.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn separated_blobs_get_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pts = Array2::zeros((60, 2));
        for i in 0..60 {
            let off = if i < 30 { 0.0 } else { 10.0 };
            pts[[i, 0]] = off + rng.random_range(-0.5..0.5);
            pts[[i, 1]] = off + rng.random_range(-0.5..0.5);
        }
        let assign = kmeans_assign(&pts, 2, 50, 1);
        for i in 0..30 {
            assert_eq!(assign[i], assign[0]);
        }
        for i in 30..60 {
            assert_eq!(assign[i], assign[30]);
        }
        assert_ne!(assign[0], assign[30]);
    }
}
