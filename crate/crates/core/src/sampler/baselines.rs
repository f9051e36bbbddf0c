//! Fixed grouping baselines: the non-policy pseudo-bag schemes the
//! policy-driven selection is compared against. Every scheme partitions the
//! bag's index range exactly — disjoint groups whose union is the whole bag.

use crate::data::BagRecord;
use crate::error::{Error, Result};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupingKind {
    /// Shuffle, then chunk into groups of `group_size`.
    Random,
    /// Sort by (row, col) coordinate lexicographically, then chunk.
    Position,
    /// Lloyd k-means over features with k-means++ seeding; one group per
    /// cluster.
    Kmeans,
    /// Uniform random partition into `n_groups` near-equal groups.
    RandomGroup,
}

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-4;

/// Partition all instance indices of a bag according to a fixed scheme.
pub fn baseline_grouping(
    bag: &BagRecord,
    kind: GroupingKind,
    group_size: usize,
    n_groups: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    bag.validate()?;
    let b = bag.num_instances();
    let groups = match kind {
        GroupingKind::Random => {
            if group_size == 0 {
                return Err(Error::InvalidConfig("group_size must be >= 1".into()));
            }
            let mut order: Vec<usize> = (0..b).collect();
            order.shuffle(rng);
            order.chunks(group_size).map(|c| c.to_vec()).collect()
        }
        GroupingKind::Position => {
            if group_size == 0 {
                return Err(Error::InvalidConfig("group_size must be >= 1".into()));
            }
            let mut order: Vec<usize> = (0..b).collect();
            order.sort_by(|&x, &y| {
                let cx = (bag.coords[(x, 0)], bag.coords[(x, 1)]);
                let cy = (bag.coords[(y, 0)], bag.coords[(y, 1)]);
                cx.partial_cmp(&cy).expect("finite coords").then(x.cmp(&y))
            });
            order.chunks(group_size).map(|c| c.to_vec()).collect()
        }
        GroupingKind::Kmeans => {
            if n_groups == 0 {
                return Err(Error::InvalidConfig("n_groups must be >= 1".into()));
            }
            if n_groups > b {
                return Err(Error::MoreGroupsThanInstances);
            }
            let features = bag.features.mapv(|v| v as f64);
            let assignment = kmeans(&features, n_groups, KMEANS_MAX_ITERS, KMEANS_TOLERANCE, rng);
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
            for (i, &c) in assignment.iter().enumerate() {
                groups[c].push(i);
            }
            // A cluster can end up empty; an empty pseudo-bag has no
            // representation, so it is dropped rather than emitted.
            groups.retain(|g| !g.is_empty());
            groups
        }
        GroupingKind::RandomGroup => {
            if n_groups == 0 {
                return Err(Error::InvalidConfig("n_groups must be >= 1".into()));
            }
            if n_groups > b {
                return Err(Error::MoreGroupsThanInstances);
            }
            let mut order: Vec<usize> = (0..b).collect();
            order.shuffle(rng);
            let base = b / n_groups;
            let extra = b % n_groups;
            let mut groups = Vec::with_capacity(n_groups);
            let mut offset = 0;
            for g in 0..n_groups {
                let len = base + usize::from(g < extra);
                groups.push(order[offset..offset + len].to_vec());
                offset += len;
            }
            groups
        }
    };
    debug_assert_eq!(groups.iter().map(Vec::len).sum::<usize>(), b);
    Ok(groups)
}

/// Lloyd's algorithm with k-means++ seeding. Returns the cluster index of
/// every row. Ties in nearest-centroid assignment go to the lower cluster
/// index; an emptied cluster keeps its previous centroid.
pub fn kmeans(
    points: &Array2<f64>,
    k: usize,
    max_iters: usize,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let (n, d) = points.dim();
    assert!(k >= 1 && k <= n);
    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centroids.push(points.row(first).to_vec());
    let mut min_dist_sq: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i).as_slice().unwrap(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = min_dist_sq.iter().sum();
        let next = if total <= 0.0 {
            // All points coincide with existing centroids; pick uniformly.
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in min_dist_sq.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centroids.push(points.row(next).to_vec());
        for i in 0..n {
            let dist = squared_distance(points.row(i).as_slice().unwrap(), centroids.last().unwrap());
            if dist < min_dist_sq[i] {
                min_dist_sq[i] = dist;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..max_iters {
        for i in 0..n {
            let row = points.row(i);
            let mut best = (f64::INFINITY, 0usize);
            for (c, centroid) in centroids.iter().enumerate() {
                let dist = squared_distance(row.as_slice().unwrap(), centroid);
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            assignment[i] = best.1;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut max_shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mut shift = 0.0;
            for (j, s) in sums[c].iter().enumerate() {
                let new = s / counts[c] as f64;
                shift += (new - centroids[c][j]).powi(2);
                centroids[c][j] = new;
            }
            max_shift = max_shift.max(shift.sqrt());
        }
        if max_shift < tolerance {
            break;
        }
    }
    assignment
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::{array, Array2};

    fn bag(features: Array2<f32>, coords: Array2<f32>) -> BagRecord {
        BagRecord { bag_id: "b".into(), label: 0, features, coords, instance_labels: None }
    }

    fn assert_partition(groups: &[Vec<usize>], b: usize) {
        let mut seen = vec![false; b];
        for g in groups {
            for &i in g {
                assert!(!seen[i], "index {i} emitted twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|s| *s), "not all indices covered");
    }

    #[test]
    fn position_sorting_orders_lexicographically() {
        let b = bag(
            array![[0.0f32], [1.0], [2.0]],
            array![[1.0f32, 0.0], [0.0, 1.0], [0.0, 0.0]],
        );
        let mut rng = stream(1, "pos");
        let groups =
            baseline_grouping(&b, GroupingKind::Position, 3, 1, &mut rng).unwrap();
        assert_eq!(groups, vec![vec![2, 1, 0]]);
    }

    #[test]
    fn kmeans_recovers_two_separated_clusters() {
        // Two far-apart blobs; compare against the exhaustive 2-partition
        // minimizer of within-cluster sum of squares.
        let mut rng = stream(5, "km");
        use rand::Rng;
        let n = 10;
        let feats = Array2::from_shape_fn((n, 2), |(i, j)| {
            let center = if i < 5 { -10.0 } else { 10.0 };
            (center + rng.random_range(-0.5..0.5) + j as f64 * 0.0) as f32
        });
        let b = bag(feats.clone(), Array2::zeros((n, 2)));
        let groups = baseline_grouping(&b, GroupingKind::Kmeans, 0, 2, &mut rng).unwrap();
        assert_partition(&groups, n);

        // Oracle: enumerate every 2-coloring, score by WCSS with centroid =
        // cluster mean.
        let pts = feats.mapv(|v| v as f64);
        let mut best = (f64::INFINITY, 0usize);
        for mask in 1..(1usize << n) - 1 {
            let mut sums = [[0.0f64; 2]; 2];
            let mut counts = [0usize; 2];
            for i in 0..n {
                let c = (mask >> i) & 1;
                counts[c] += 1;
                sums[c][0] += pts[(i, 0)];
                sums[c][1] += pts[(i, 1)];
            }
            let mut cost = 0.0;
            for i in 0..n {
                let c = (mask >> i) & 1;
                let cx = sums[c][0] / counts[c] as f64;
                let cy = sums[c][1] / counts[c] as f64;
                cost += (pts[(i, 0)] - cx).powi(2) + (pts[(i, 1)] - cy).powi(2);
            }
            if cost < best.0 {
                best = (cost, mask);
            }
        }
        let oracle_a: Vec<usize> = (0..n).filter(|i| (best.1 >> i) & 1 == 0).collect();
        let oracle_b: Vec<usize> = (0..n).filter(|i| (best.1 >> i) & 1 == 1).collect();
        let mut got: Vec<Vec<usize>> = groups;
        got.iter_mut().for_each(|g| g.sort_unstable());
        got.sort();
        let mut want = vec![oracle_a, oracle_b];
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn random_group_partitions_exactly() {
        let n = 1000;
        let b = bag(Array2::zeros((n, 1)), Array2::zeros((n, 2)));
        let mut rng = stream(7, "rg");
        let groups = baseline_grouping(&b, GroupingKind::RandomGroup, 0, 10, &mut rng).unwrap();
        assert_eq!(groups.len(), 10);
        assert!(groups.iter().all(|g| g.len() == 100));
        assert_partition(&groups, n);
    }

    #[test]
    fn random_chunking_partitions_exactly() {
        let n = 103;
        let b = bag(Array2::zeros((n, 1)), Array2::zeros((n, 2)));
        let mut rng = stream(8, "rc");
        let groups = baseline_grouping(&b, GroupingKind::Random, 25, 1, &mut rng).unwrap();
        assert_eq!(groups.len(), 5);
        assert_eq!(groups.last().unwrap().len(), 3);
        assert_partition(&groups, n);
    }

    #[test]
    fn too_many_groups_is_an_error() {
        let b = bag(Array2::zeros((3, 1)), Array2::zeros((3, 2)));
        let mut rng = stream(9, "tm");
        assert!(matches!(
            baseline_grouping(&b, GroupingKind::RandomGroup, 0, 4, &mut rng),
            Err(Error::MoreGroupsThanInstances)
        ));
        assert!(matches!(
            baseline_grouping(&b, GroupingKind::Kmeans, 0, 4, &mut rng),
            Err(Error::MoreGroupsThanInstances)
        ));
    }

    #[test]
    fn grouping_is_deterministic_given_seed() {
        let n = 64;
        let mut rng_feats = stream(2, "det-f");
        use rand::Rng;
        let feats = Array2::from_shape_fn((n, 4), |_| rng_feats.random_range(-1.0f32..1.0));
        let b = bag(feats, Array2::zeros((n, 2)));
        for kind in [GroupingKind::Random, GroupingKind::Kmeans, GroupingKind::RandomGroup] {
            let g1 = baseline_grouping(&b, kind, 16, 4, &mut stream(11, "d")).unwrap();
            let g2 = baseline_grouping(&b, kind, 16, 4, &mut stream(11, "d")).unwrap();
            assert_eq!(g1, g2);
        }
    }
}
