use crate::error::{ensure, Result};
use crate::numkernel::{Matrix, Rng};
use crate::scalar::Scalar;

use super::linear_sum_assignment;

/// Output of [`constrained_kmeans`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterLabels<T> {
    /// Cluster index per point, in `[0, n_clusters)`.
    pub labels: Vec<usize>,
    pub sizes: Vec<usize>,
    pub centroids: Matrix<T>,
    /// Sum of squared distances after each assignment step.
    pub objective_history: Vec<T>,
}

impl<T: Scalar> ClusterLabels<T> {
    pub fn objective(&self) -> T {
        *self.objective_history.last().expect("at least one iteration")
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding. Draws are inverse-CDF over squared distances, so ties
/// resolve to the lowest point index.
fn seed_centroids<T: Scalar>(points: &Matrix<T>, k: usize, rng: &mut Rng) -> Matrix<T> {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(first)).as_f64())
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            0
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)).as_f64());
        }
    }
    centroids
}

/// Optimal size-capped assignment given centroids. Returns labels and cost.
fn assign<T: Scalar>(points: &Matrix<T>, centroids: &Matrix<T>, cap: usize) -> Result<(Vec<usize>, T)> {
    let n = points.rows();
    let k = centroids.rows();
    let dist = Matrix::from_fn(n, k, |i, c| sq_dist(points.row(i), centroids.row(c)));
    // unconstrained nearest centroid; optimal whenever it already fits the caps
    let mut labels = Vec::with_capacity(n);
    let mut sizes = vec![0usize; k];
    for i in 0..n {
        let row = dist.row(i);
        let mut best = 0;
        for c in 1..k {
            if row[c] < row[best] {
                best = c;
            }
        }
        labels.push(best);
        sizes[best] += 1;
    }
    if sizes.iter().all(|&s| s <= cap) {
        let cost = (0..n).map(|i| dist[(i, labels[i])]).sum();
        return Ok((labels, cost));
    }
    let slots = Matrix::from_fn(n, k * cap, |i, s| dist[(i, s / cap)]);
    let a = linear_sum_assignment(&slots)?;
    let labels: Vec<usize> = a.row_to_col.iter().map(|s| s.expect("n <= k*cap") / cap).collect();
    Ok((labels, a.total_cost))
}

/// K-means whose assignment step keeps every cluster at most `size_cap`
/// points, solved exactly as an assignment of points to replicated cluster
/// slots.
pub fn constrained_kmeans<T: Scalar>(
    points: &Matrix<T>,
    n_clusters: usize,
    size_cap: usize,
    rng: &mut Rng,
    max_iter: usize,
) -> Result<ClusterLabels<T>> {
    let n = points.rows();
    ensure!(n_clusters >= 1, InvalidArgument, "need at least one cluster");
    ensure!(n >= 1, InvalidArgument, "no points to cluster");
    ensure!(
        n <= n_clusters * size_cap,
        InvalidArgument,
        "{n} points cannot fit {n_clusters} clusters of size {size_cap}"
    );
    ensure!(points.is_finite(), InvalidArgument, "non-finite point coordinates");
    let mut centroids = seed_centroids(points, n_clusters.min(n), rng);
    if n_clusters > n {
        // more clusters than points: pad with copies of the last seed
        let mut padded = Matrix::zeros(n_clusters, points.cols());
        for c in 0..n_clusters {
            padded.row_mut(c).copy_from_slice(centroids.row(c.min(n - 1)));
        }
        centroids = padded;
    }
    constrained_kmeans_from(points, centroids, size_cap, max_iter)
}

/// [`constrained_kmeans`] started from the given centroids (one row per
/// cluster) instead of k-means++ seeds.
pub fn constrained_kmeans_from<T: Scalar>(
    points: &Matrix<T>,
    mut centroids: Matrix<T>,
    size_cap: usize,
    max_iter: usize,
) -> Result<ClusterLabels<T>> {
    let n = points.rows();
    let n_clusters = centroids.rows();
    ensure!(n_clusters >= 1, InvalidArgument, "need at least one cluster");
    ensure!(n >= 1, InvalidArgument, "no points to cluster");
    ensure!(
        centroids.cols() == points.cols(),
        Shape,
        "centroids have {} columns, points {}",
        centroids.cols(),
        points.cols()
    );
    ensure!(
        n <= n_clusters * size_cap,
        InvalidArgument,
        "{n} points cannot fit {n_clusters} clusters of size {size_cap}"
    );
    ensure!(
        points.is_finite() && centroids.is_finite(),
        InvalidArgument,
        "non-finite coordinates"
    );
    let mut history = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for _ in 0..max_iter.max(1) {
        let (new_labels, cost) = assign(points, &centroids, size_cap)?;
        history.push(cost);
        let converged = new_labels == labels;
        labels = new_labels;
        if converged {
            break;
        }
        let mut sums = Matrix::<T>::zeros(n_clusters, points.cols());
        let mut counts = vec![0usize; n_clusters];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (a, &b) in sums.row_mut(l).iter_mut().zip(points.row(i)) {
                *a += b;
            }
        }
        for (c, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                let inv = T::one() / T::lit(cnt as f64);
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    let mut sizes = vec![0; n_clusters];
    for &l in &labels {
        sizes[l] += 1;
    }
    Ok(ClusterLabels {
        labels,
        sizes,
        centroids,
        objective_history: history,
    })
}

/// Best of `restarts` independent runs by final objective.
pub fn constrained_kmeans_restarts<T: Scalar>(
    points: &Matrix<T>,
    n_clusters: usize,
    size_cap: usize,
    rng: &mut Rng,
    max_iter: usize,
    restarts: usize,
) -> Result<ClusterLabels<T>> {
    let mut best: Option<ClusterLabels<T>> = None;
    for _ in 0..restarts.max(1) {
        let run = constrained_kmeans(points, n_clusters, size_cap, rng, max_iter)?;
        if best.as_ref().is_none_or(|b| run.objective() < b.objective()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;
    use proptest::prelude::*;

    fn blobs(rng: &mut Rng, per: usize) -> (Matrix<f64>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (label, centre) in [(0, -10.0), (1, 10.0)] {
            for _ in 0..per {
                rows.push(vec![centre + rng.normal(), centre + rng.normal()]);
                truth.push(label);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), truth)
    }

    /// Cheapest labelling among all 2^n with both clusters of size <= cap.
    fn exhaustive_two_clusters(points: &Matrix<f64>, cap: usize) -> f64 {
        let n = points.rows();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << n) {
            let ones = mask.count_ones() as usize;
            if ones > cap || n - ones > cap {
                continue;
            }
            let mut cost = 0.0;
            for side in [0, 1] {
                let members: Vec<usize> = (0..n).filter(|&i| ((mask >> i) & 1) as usize == side).collect();
                if members.is_empty() {
                    continue;
                }
                let mut mean = [0.0; 2];
                for &i in &members {
                    mean[0] += points[(i, 0)] / members.len() as f64;
                    mean[1] += points[(i, 1)] / members.len() as f64;
                }
                cost += members.iter().map(|&i| sq_dist(points.row(i), &mean)).sum::<f64>();
            }
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn single_cluster_takes_everything() {
        let mut rng = Rng::new(0);
        let (pts, _) = blobs(&mut rng, 4);
        let out = constrained_kmeans(&pts, 1, 8, &mut rng, 10).unwrap();
        assert!(out.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn two_blobs_separate_and_match_exhaustive_optimum() {
        for seed in 0..50 {
            let mut rng = Rng::new(seed);
            let (pts, truth) = blobs(&mut rng, 8);
            let out = constrained_kmeans(&pts, 2, 8, &mut rng, 50).unwrap();
            let same = out.labels.iter().zip(&truth).all(|(a, b)| a == b);
            let flipped = out.labels.iter().zip(&truth).all(|(a, b)| *a != *b);
            assert!(same || flipped, "seed {seed}");
            assert!(out.sizes.iter().all(|&s| s <= 8));
            if seed < 3 {
                assert!((out.objective() - exhaustive_two_clusters(&pts, 8)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn infeasible_rejected() {
        let pts = Matrix::from_fn(9, 2, |i, j| (i * 2 + j) as f64);
        assert!(constrained_kmeans(&pts, 2, 4, &mut Rng::new(1), 10).is_err());
    }

    #[test]
    fn tight_caps_force_balanced_split() {
        // three points near the origin, one far away, caps of two
        let pts = Matrix::from_rows(&[vec![0.0], vec![0.1], vec![0.2], vec![9.0]]).unwrap();
        let out = constrained_kmeans(&pts, 2, 2, &mut Rng::new(3), 20).unwrap();
        assert_eq!(out.sizes, vec![2, 2]);
    }

    proptest! {
        #[test]
        fn caps_hold_and_objective_never_increases(
            n in 1usize..24, k in 1usize..5, seed in 0u64..500
        ) {
            let cap = n.div_ceil(k);
            let mut rng = Rng::new(seed);
            let pts = Matrix::from_fn(n, 3, |_, _| rng.normal());
            let out = constrained_kmeans(&pts, k, cap, &mut rng, 30).unwrap();
            prop_assert!(out.sizes.iter().all(|&s| s <= cap));
            prop_assert_eq!(out.sizes.iter().sum::<usize>(), n);
            for w in out.objective_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
        }
    }
}
