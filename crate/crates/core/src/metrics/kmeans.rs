//! Lloyd's k-means with D²-weighted seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const KMEANS_TOL: f64 = 1e-6;
pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Clone, Debug)]
pub struct KMeans {
    pub centers: Matrix,
    pub labels: Vec<usize>,
    /// Distortion after the seeding assignment and after every iteration.
    pub history: Vec<f64>,
}

impl KMeans {
    pub fn distortion(&self) -> f64 {
        *self.history.last().expect("history is never empty")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter_rows().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Sum of squared distances from each point to its labeled center.
pub fn distortion(points: &Matrix, centers: &Matrix, labels: &[usize]) -> f64 {
    points
        .iter_rows()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, centers.row(l)))
        .sum()
}

fn seed_centers(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter_rows().map(|p| sq_dist(p, points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (i, p) in points.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

fn assign(points: &Matrix, centers: &Matrix) -> Vec<usize> {
    points.iter_rows().map(|p| nearest(p, centers).0).collect()
}

/// Recomputes means; a cluster left empty takes over the point farthest from
/// its current center (drawn from clusters that keep at least one member).
fn update(points: &Matrix, centers: &Matrix, labels: &mut [usize]) -> Matrix {
    let (k, d) = centers.shape();
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let far = (0..points.rows())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist(points.row(a), centers.row(labels[a]));
                let db = sq_dist(points.row(b), centers.row(labels[b]));
                da.total_cmp(&db).then(b.cmp(&a))
            });
        if let Some(i) = far {
            counts[labels[i]] -= 1;
            labels[i] = j;
            counts[j] = 1;
        }
    }
    let mut sums = Matrix::zeros(k, d);
    for (p, &l) in points.iter_rows().zip(labels.iter()) {
        for (s, &x) in sums.row_mut(l).iter_mut().zip(p) {
            *s += x;
        }
    }
    for j in 0..k {
        if counts[j] == 0 {
            sums.row_mut(j).copy_from_slice(centers.row(j));
        } else {
            let inv = 1.0 / counts[j] as f64;
            sums.row_mut(j).iter_mut().for_each(|s| *s *= inv);
        }
    }
    sums
}

/// Clusters the rows of `points` into `k` groups. Deterministic per seed.
pub fn kmeans(points: &Matrix, k: usize, seed: u64) -> Result<KMeans> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::Config(format!("kmeans needs n >= k >= 1, got n={n}, k={k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(points, k, &mut rng);
    let mut labels = assign(points, &centers);
    let mut history = vec![distortion(points, &centers, &labels)];
    for _ in 0..KMEANS_MAX_ITERS {
        let next = update(points, &centers, &mut labels);
        let shift = centers
            .iter_rows()
            .zip(next.iter_rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        labels = assign(points, &centers);
        history.push(distortion(points, &centers, &labels));
        if shift < KMEANS_TOL {
            break;
        }
    }
    Ok(KMeans {
        centers,
        labels,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn k_equals_n_has_zero_distortion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = Matrix::random_normal(6, 3, 1.0, &mut rng);
        let km = kmeans(&pts, 6, 4).unwrap();
        assert_eq!(km.distortion(), 0.0);
        let mut l = km.labels.clone();
        l.sort();
        assert_eq!(l, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn two_pairs_give_midpoints() {
        let pts = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]]).unwrap();
        for seed in 0..10 {
            let km = kmeans(&pts, 2, seed).unwrap();
            let mut c: Vec<Vec<f64>> = km.centers.iter_rows().map(|r| r.to_vec()).collect();
            c.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(c, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
            assert_eq!(km.labels[0], km.labels[1]);
            assert_ne!(km.labels[0], km.labels[2]);
        }
    }

    #[test]
    fn rejects_k_above_n() {
        assert!(kmeans(&Matrix::zeros(2, 2), 3, 0).is_err());
        assert!(kmeans(&Matrix::zeros(2, 2), 0, 0).is_err());
    }

    #[test]
    fn duplicate_points_still_seed_k_centers() {
        let km = kmeans(&Matrix::filled(5, 2, 3.0), 3, 0).unwrap();
        assert_eq!(km.distortion(), 0.0);
    }

    #[test]
    fn same_seed_same_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = Matrix::random_normal(40, 4, 1.0, &mut rng);
        let a = kmeans(&pts, 4, 9).unwrap();
        let b = kmeans(&pts, 4, 9).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.centers, b.centers);
    }

    #[test]
    fn beats_random_assignment_baselines() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..5 {
            let pts = Matrix::random_normal(50, 3, 1.0, &mut rng);
            let k = 4;
            let km = kmeans(&pts, k, trial).unwrap();
            for _ in 0..100 {
                let mut labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..k)).collect();
                let centers = update(&pts, &Matrix::zeros(k, 3), &mut labels);
                assert!(km.distortion() <= distortion(&pts, &centers, &labels) + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn distortion_never_increases(n in 2usize..40, k in 1usize..6, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = Matrix::random_normal(n, 2, 1.0, &mut rng);
            let km = kmeans(&pts, k, seed).unwrap();
            for w in km.history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", km.history);
            }
            prop_assert_eq!(km.labels.len(), n);
        }
    }
}
