//! Hard k-means clustering of key rows and the centroid memory it induces.

use crate::error::{domain, Result};
use crate::numerics::{axpy, Matrix, SeededRng};

/// Hard membership: each row has exactly one set bit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    cols: usize,
    assignment: Vec<usize>,
}

impl BitMatrix {
    pub fn from_assignments(assignment: &[usize], cols: usize) -> Result<Self> {
        if let Some(&bad) = assignment.iter().find(|&&a| a >= cols) {
            return domain(format!("cluster index {bad} out of range for {cols} clusters"));
        }
        Ok(Self { cols, assignment: assignment.to_vec() })
    }

    /// Builds from explicit 0/1 rows; each row must contain exactly one 1.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut assignment = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols || r.iter().any(|&b| b > 1) || r.iter().filter(|&&b| b == 1).count() != 1 {
                return domain(format!("membership row {i} is not a one-hot row of width {cols}"));
            }
            assignment.push(r.iter().position(|&b| b == 1).unwrap());
        }
        Ok(Self { cols, assignment })
    }

    pub fn rows(&self) -> usize {
        self.assignment.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.assignment[i] == j
    }

    pub fn assignment(&self, i: usize) -> usize {
        self.assignment[i]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignment
    }

    pub fn column_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.cols];
        for &a in &self.assignment {
            counts[a] += 1;
        }
        counts
    }

    pub fn has_empty_column(&self) -> bool {
        self.column_counts().contains(&0)
    }
}

/// Result of a k-means run.
#[derive(Clone, Debug)]
pub struct KMeans {
    pub membership: BitMatrix,
    pub centroids: Matrix,
    /// Within-cluster sum of squared errors after each Lloyd iteration.
    pub sse_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn means(points: &Matrix, assignment: &[usize], clusters: usize) -> Matrix {
    let mut centroids = Matrix::zeros(clusters, points.cols());
    let mut counts = vec![0usize; clusters];
    for (i, &a) in assignment.iter().enumerate() {
        axpy(1.0, points.row(i), centroids.row_mut(a));
        counts[a] += 1;
    }
    for (j, &c) in counts.iter().enumerate() {
        if c > 0 {
            centroids.row_mut(j).iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    centroids
}

fn sse(points: &Matrix, assignment: &[usize], centroids: &Matrix) -> f64 {
    assignment.iter().enumerate().map(|(i, &a)| sq_dist(points.row(i), centroids.row(a))).sum()
}

/// Lloyd's algorithm with Euclidean distance. Centroids start at `clusters`
/// rows sampled without replacement (distinct values preferred); a cluster
/// left empty by an assignment step takes the point farthest from its
/// centroid within the currently largest cluster.
pub fn kmeans(points: &Matrix, clusters: usize, iters: usize, rng: &mut SeededRng) -> Result<KMeans> {
    let count = points.rows();
    if clusters == 0 || clusters > count {
        return domain(format!("cannot form {clusters} clusters from {count} keys"));
    }

    let mut order: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(clusters);
    for &i in &order {
        if chosen.len() == clusters {
            break;
        }
        if chosen.iter().all(|&c| points.row(c) != points.row(i)) {
            chosen.push(i);
        }
    }
    for &i in &order {
        if chosen.len() == clusters {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    let mut centroids = Matrix::zeros(clusters, points.cols());
    for (j, &i) in chosen.iter().enumerate() {
        centroids.row_mut(j).copy_from_slice(points.row(i));
    }

    let mut assignment = vec![0usize; count];
    let mut sse_history = Vec::with_capacity(iters);
    for _ in 0..iters.max(1) {
        for (i, slot) in assignment.iter_mut().enumerate() {
            let p = points.row(i);
            let mut best = (f64::INFINITY, 0);
            for j in 0..clusters {
                let d = sq_dist(p, centroids.row(j));
                if d < best.0 {
                    best = (d, j);
                }
            }
            *slot = best.1;
        }
        repair_empty(points, &mut assignment, &centroids, clusters);
        centroids = means(points, &assignment, clusters);
        sse_history.push(sse(points, &assignment, &centroids));
    }
    let membership = BitMatrix::from_assignments(&assignment, clusters)?;
    Ok(KMeans { membership, centroids, sse_history })
}

fn repair_empty(points: &Matrix, assignment: &mut [usize], centroids: &Matrix, clusters: usize) {
    loop {
        let mut counts = vec![0usize; clusters];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        // Ties go to the lowest cluster index.
        let largest = (0..clusters).fold(0, |best, j| if counts[j] > counts[best] { j } else { best });
        let mut far = (f64::NEG_INFINITY, 0);
        for (i, &a) in assignment.iter().enumerate() {
            if a == largest {
                let d = sq_dist(points.row(i), centroids.row(largest));
                if d > far.0 {
                    far = (d, i);
                }
            }
        }
        assignment[far.1] = empty;
    }
}

/// Hard cluster membership of the key rows.
pub fn cluster_assign(keys: &Matrix, clusters: usize, iters: usize, rng: &mut SeededRng) -> Result<BitMatrix> {
    Ok(kmeans(keys, clusters, iters, rng)?.membership)
}

/// Row `j` is the mean of the keys assigned to cluster `j`.
pub fn centroids_via_phi(keys: &Matrix, membership: &BitMatrix) -> Result<Matrix> {
    if membership.rows() != keys.rows() {
        return domain("membership rows do not match key count");
    }
    if let Some(j) = membership.column_counts().iter().position(|&c| c == 0) {
        return domain(format!("cluster {j} is empty"));
    }
    Ok(means(keys, membership.assignments(), membership.cols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{build_memory, full_attention, readout};
    use crate::strategies::ControlStrategy;
    use proptest::prelude::*;

    #[test]
    fn analytic_centroids() {
        let m = BitMatrix::from_rows(&[vec![1, 0], vec![1, 0], vec![0, 1]]).unwrap();
        let k = Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0], [5.0, 5.0]]).unwrap();
        assert_eq!(centroids_via_phi(&k, &m).unwrap().as_slice(), &[1.0, 1.0, 5.0, 5.0]);

        let single = BitMatrix::from_assignments(&[0, 0, 0], 1).unwrap();
        let c = centroids_via_phi(&k, &single).unwrap();
        assert_eq!(c.as_slice(), &[7.0 / 3.0, 7.0 / 3.0]);

        let empty = BitMatrix::from_assignments(&[0, 0, 0], 2).unwrap();
        assert!(centroids_via_phi(&k, &empty).is_err());
        assert!(BitMatrix::from_rows(&[vec![1, 1]]).is_err());
    }

    #[test]
    fn centroids_match_control_vector_memory() {
        let mut rng = SeededRng::new(13);
        let k = Matrix::random_normal(12, 4, 1.0, &mut rng);
        let m = cluster_assign(&k, 3, 10, &mut rng).unwrap();
        let strategy = ControlStrategy::Cluster { membership: m.clone() };
        let phis: Vec<_> = (0..12).map(|p| strategy.phi_at(p, None, 12).unwrap().phi).collect();
        let mem = build_memory(&phis, &k, &k).unwrap();
        assert!(mem.ktilde.max_abs_diff(&centroids_via_phi(&k, &m).unwrap()) <= 1e-12);
        let mut col_sum = vec![0.0; 3];
        for p in &phis {
            for j in 0..3 {
                col_sum[j] += p[j];
            }
        }
        assert!(col_sum.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn duplicated_points_are_a_fixed_point() {
        let base = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let rows: Vec<[f64; 2]> = (0..12).map(|i| base[i % 3]).collect();
        let k = Matrix::from_rows(&rows).unwrap();
        let km = kmeans(&k, 3, 10, &mut SeededRng::new(1)).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(km.membership.assignment(i) == km.membership.assignment(j), i % 3 == j % 3);
            }
            assert_eq!(km.centroids.row(km.membership.assignment(i)), &base[i % 3]);
        }
    }

    #[test]
    fn one_cluster_per_key_recovers_exact_attention() {
        let mut rng = SeededRng::new(6);
        let k = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let v = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let m = cluster_assign(&k, 5, 10, &mut rng).unwrap();
        assert!(!m.has_empty_column());
        let strategy = ControlStrategy::Cluster { membership: m };
        let phis: Vec<_> = (0..5).map(|p| strategy.phi_at(p, None, 5).unwrap().phi).collect();
        let mem = build_memory(&phis, &k, &v).unwrap();
        let q = [0.3, -0.7, 1.1];
        let a = readout(&q, &mem, 1.0).unwrap();
        let b = full_attention(&q, &k, &v, 1.0).unwrap();
        assert!(crate::numerics::max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn too_many_clusters() {
        let k = Matrix::zeros(3, 2);
        assert!(cluster_assign(&k, 4, 10, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn sse_never_increases() {
        let mut rng = SeededRng::new(2024);
        let k = Matrix::random_normal(32, 8, 1.0, &mut rng);
        let km = kmeans(&k, 4, 10, &mut rng).unwrap();
        for w in km.sse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", km.sse_history);
        }
    }

    proptest! {
        #[test]
        fn no_cluster_left_empty(seed in 0u64..500, n in 1usize..8) {
            let mut rng = SeededRng::new(seed);
            // Heavy duplication provokes empty clusters.
            let rows: Vec<[f64; 2]> = (0..10).map(|i| [(i % 2) as f64, 0.0]).collect();
            let k = Matrix::from_rows(&rows).unwrap();
            let m = cluster_assign(&k, n, 5, &mut rng).unwrap();
            prop_assert!(!m.has_empty_column());
            prop_assert_eq!(m.column_counts().iter().sum::<usize>(), 10);
        }
    }
}
