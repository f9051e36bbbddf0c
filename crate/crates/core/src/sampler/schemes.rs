//! Policy-driven selection rules over the remaining instances of an episode.
//!
//! All three schemes rank the remaining instances by a score, emit the top
//! min(group_size, remaining) of them, and break ties on the lower instance
//! index so that selection is a deterministic function of its inputs.

use crate::error::{Error, Result};
use crate::sampler::episode::{EpisodeState, SampledGroup};

/// Cosine similarity with the degenerate-vector convention used throughout:
/// any zero-norm side scores -1, ranking it last instead of dividing by zero.
pub fn cosine_or_neg_one(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Rank remaining instances by `score` (descending, ties to the lower index)
/// and take the top min(group_size, remaining).
fn take_top_by(
    state: &mut EpisodeState,
    mut score: impl FnMut(usize) -> f64,
) -> Result<SampledGroup> {
    if state.is_exhausted() {
        return Err(Error::EmptyGroup);
    }
    let mut ranked: Vec<(f64, usize)> = state.remaining().iter().map(|&i| (score(i), i)).collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores are finite").then(a.1.cmp(&b.1)));
    let k = state.group_size().min(ranked.len());
    let chosen: Vec<usize> = ranked[..k].iter().map(|(_, i)| *i).collect();
    state.take(&chosen)
}

/// Max-similarity selection: the remaining instances most cosine-similar to
/// the query vector.
pub fn gmss_select(query: &[f64], state: &mut EpisodeState) -> Result<SampledGroup> {
    if query.iter().any(|v| !v.is_finite()) {
        return Err(Error::PolicyDivergence("non-finite query".into()));
    }
    let features = state.features().clone();
    take_top_by(state, |i| {
        cosine_or_neg_one(query, features.row(i).as_slice().expect("contiguous row"))
    })
}

/// Hybrid selection: a convex blend of feature similarity to the query and an
/// exponential spatial kernel around the centroid of everything selected so
/// far. `alpha` = 1 reduces to max-similarity, `alpha` = 0 to spatial
/// nearest-neighbor selection.
pub fn ghss_select(
    query: &[f64],
    state: &mut EpisodeState,
    selected_centroid: [f64; 2],
    alpha: f64,
    tau: f64,
) -> Result<SampledGroup> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("ghss alpha {alpha} outside [0, 1]")));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidConfig(format!("ghss tau must be > 0, got {tau}")));
    }
    if query.iter().any(|v| !v.is_finite()) {
        return Err(Error::PolicyDivergence("non-finite query".into()));
    }
    let features = state.features().clone();
    let coords = state.coords().clone();
    take_top_by(state, |i| {
        let sim = cosine_or_neg_one(query, features.row(i).as_slice().expect("contiguous row"));
        let dr = coords[(i, 0)] - selected_centroid[0];
        let dc = coords[(i, 1)] - selected_centroid[1];
        let dist = (dr * dr + dc * dc).sqrt();
        alpha * sim + (1.0 - alpha) * (-dist / tau).exp()
    })
}

/// Linear-interpolation selection: build a query point between the current
/// token and the mean remaining feature, then take the nearest remaining
/// instances in Euclidean distance.
pub fn liis_select(u_t: &[f64], beta: f64, state: &mut EpisodeState) -> Result<SampledGroup> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!("liis beta {beta} outside [0, 1]")));
    }
    let mean = state.remaining_mean_feature();
    let query: Vec<f64> =
        u_t.iter().zip(&mean).map(|(u, m)| (1.0 - beta) * u + beta * m).collect();
    let features = state.features().clone();
    take_top_by(state, |i| {
        let dist_sq: f64 = features
            .row(i)
            .iter()
            .zip(&query)
            .map(|(v, q)| (v - q) * (v - q))
            .sum();
        // Nearest first: rank by negative distance.
        -dist_sq
    })
}

/// The interpolated query point used by `liis_select`, exposed for tests.
pub fn liis_query(u_t: &[f64], beta: f64, remaining_mean: &[f64]) -> Vec<f64> {
    u_t.iter().zip(remaining_mean).map(|(u, m)| (1.0 - beta) * u + beta * m).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BagRecord;
    use ndarray::{array, Array2};

    fn bag_from_features(features: Array2<f32>) -> BagRecord {
        let b = features.dim().0;
        BagRecord {
            bag_id: "t".into(),
            label: 0,
            coords: Array2::from_shape_fn((b, 2), |(i, j)| if j == 1 { i as f32 } else { 0.0 }),
            features,
            instance_labels: None,
        }
    }

    fn state_over(features: Array2<f32>, group_size: usize) -> EpisodeState {
        let bag = bag_from_features(features);
        let t = super::super::episode::episode_length(bag.num_instances(), group_size);
        EpisodeState::new(&bag, group_size, t).unwrap()
    }

    /// Brute-force oracle: full sort of all remaining cosines.
    fn bruteforce_top_cosine(query: &[f64], state: &EpisodeState, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = state
            .remaining()
            .iter()
            .map(|&i| {
                (cosine_or_neg_one(query, state.features().row(i).as_slice().unwrap()), i)
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all[..k.min(all.len())].iter().map(|(_, i)| *i).collect()
    }

    #[test]
    fn gmss_picks_highest_cosines() {
        // Unit-circle features at angles giving cosines 0.9, 0.1, 0.5, 0.7
        // against the query (1, 0).
        let angles = [0.9f32, 0.1, 0.5, 0.7].map(|c| (c as f64).acos() as f32);
        let feats = Array2::from_shape_fn((4, 2), |(i, j)| {
            if j == 0 { angles[i].cos() } else { angles[i].sin() }
        });
        let mut state = state_over(feats, 2);
        let group = gmss_select(&[1.0, 0.0], &mut state).unwrap();
        assert_eq!(group.indices, vec![0, 3]);
        assert_eq!(state.remaining(), &[1, 2]);
    }

    #[test]
    fn gmss_matches_bruteforce_oracle_on_random_bags() {
        use rand::Rng;
        let mut rng = crate::rng::stream(17, "gmss-oracle");
        for _ in 0..50 {
            let b = rng.random_range(2..=64);
            let d = rng.random_range(2..=8);
            let feats = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0f32..1.0));
            let m = rng.random_range(1..=b);
            let query: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut state = state_over(feats, m);
            let expected = bruteforce_top_cosine(&query, &state, m);
            let group = gmss_select(&query, &mut state).unwrap();
            assert_eq!(group.indices, expected);
        }
    }

    #[test]
    fn gmss_exhaustion_returns_everything() {
        let feats = array![[1.0f32, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let mut state = state_over(feats, 10);
        let group = gmss_select(&[0.3, -0.2], &mut state).unwrap();
        assert_eq!(group.indices.len(), 3);
        assert!(state.is_exhausted());
    }

    #[test]
    fn gmss_ties_break_to_lowest_index() {
        let feats = array![[1.0f32, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]];
        let mut state = state_over(feats, 2);
        let group = gmss_select(&[1.0, 0.0], &mut state).unwrap();
        assert_eq!(group.indices, vec![0, 1]);
    }

    #[test]
    fn gmss_zero_norm_rows_rank_last() {
        let feats = array![[0.0f32, 0.0], [1.0, 0.0], [0.0, 0.0], [0.9, 0.1]];
        let mut state = state_over(feats, 2);
        let group = gmss_select(&[1.0, 0.0], &mut state).unwrap();
        assert_eq!(group.indices, vec![1, 3]);
        // Zero-norm query: everything ties at -1, lowest indices win.
        let feats = array![[1.0f32, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let mut state = state_over(feats, 2);
        let group = gmss_select(&[0.0, 0.0], &mut state).unwrap();
        assert_eq!(group.indices, vec![0, 1]);
    }

    #[test]
    fn ghss_alpha_one_equals_gmss() {
        use rand::Rng;
        let mut rng = crate::rng::stream(23, "ghss-alpha1");
        for _ in 0..20 {
            let b = rng.random_range(2..=32);
            let feats = Array2::from_shape_fn((b, 3), |_| rng.random_range(-1.0f32..1.0));
            let m = rng.random_range(1..=b);
            let query: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut s1 = state_over(feats.clone(), m);
            let mut s2 = state_over(feats, m);
            let centroid = s2.selected_centroid();
            let a = gmss_select(&query, &mut s1).unwrap();
            let b = ghss_select(&query, &mut s2, centroid, 1.0, 1.0).unwrap();
            assert_eq!(a.indices, b.indices);
        }
    }

    #[test]
    fn ghss_alpha_zero_is_spatial_nearest() {
        // Coordinates along a line; centroid at origin picks index 0.
        let feats = array![[0.0f32, 1.0], [1.0, 0.0], [0.3, 0.3]];
        let mut state = state_over(feats, 1);
        let group = ghss_select(&[9.9, -3.0], &mut state, [0.0, 0.0], 0.0, 1.0).unwrap();
        assert_eq!(group.indices, vec![0]);
    }

    #[test]
    fn ghss_hand_computed_hybrid_scores() {
        // Three candidates with (cosine, distance) = (0.8, 2), (0.4, 0),
        // (0.0, 0.1); alpha 0.5, tau 1: scores 0.4677, 0.7, 0.4524 pick the
        // middle candidate.
        let angles = [0.8f32, 0.4, 0.0].map(|c| (c as f64).acos() as f32);
        let feats = Array2::from_shape_fn((3, 2), |(i, j)| {
            if j == 0 { angles[i].cos() } else { angles[i].sin() }
        });
        let bag = BagRecord {
            bag_id: "h".into(),
            label: 0,
            features: feats,
            coords: array![[2.0f32, 0.0], [0.0, 0.0], [0.1, 0.0]],
            instance_labels: None,
        };
        let mut state = EpisodeState::new(&bag, 1, 3).unwrap();
        let group = ghss_select(&[1.0, 0.0], &mut state, [0.0, 0.0], 0.5, 1.0).unwrap();
        assert_eq!(group.indices, vec![1]);
    }

    #[test]
    fn ghss_rejects_bad_tau() {
        let feats = array![[1.0f32, 0.0]];
        let mut state = state_over(feats, 1);
        assert!(ghss_select(&[1.0, 0.0], &mut state, [0.0, 0.0], 0.5, 0.0).is_err());
    }

    #[test]
    fn liis_interpolation_endpoints() {
        let mean = [2.0, 2.0];
        let u = [0.0, 0.0];
        assert_eq!(liis_query(&u, 0.0, &mean), vec![0.0, 0.0]);
        assert_eq!(liis_query(&u, 1.0, &mean), vec![2.0, 2.0]);
        // Affine in beta: q(0.25) is colinear between the endpoints.
        let q = liis_query(&u, 0.25, &mean);
        assert!((q[0] - 0.5).abs() < 1e-12 && (q[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn liis_midpoint_query_prefers_nearest_candidate() {
        // Interpolating halfway between u = (0,0) and a mean of (2,2) gives
        // q = (1,1), whose nearest neighbor among {(0.9,1.1), (3,3), (-1,-1)}
        // is the first point.
        let q = liis_query(&[0.0, 0.0], 0.5, &[2.0, 2.0]);
        assert_eq!(q, vec![1.0, 1.0]);
        let candidates = [[0.9, 1.1], [3.0, 3.0], [-1.0, -1.0]];
        let nearest = candidates
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da: f64 = a.iter().zip(&q).map(|(v, qq)| (v - qq) * (v - qq)).sum();
                let db: f64 = b.iter().zip(&q).map(|(v, qq)| (v - qq) * (v - qq)).sum();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap()
            .0;
        assert_eq!(nearest, 0);
    }

    #[test]
    fn liis_select_matches_bruteforce_nearest_neighbors() {
        use rand::Rng;
        let mut rng = crate::rng::stream(31, "liis-oracle");
        for _ in 0..50 {
            let b = rng.random_range(2..=64);
            let d = rng.random_range(2..=6);
            let feats = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0f32..1.0));
            let m = rng.random_range(1..=b);
            let beta = rng.random_range(0.0..=1.0);
            let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut state = state_over(feats, m);
            let q = liis_query(&u, beta, &state.remaining_mean_feature());
            let mut oracle: Vec<(f64, usize)> = state
                .remaining()
                .iter()
                .map(|&i| {
                    let dist: f64 = state
                        .features()
                        .row(i)
                        .iter()
                        .zip(&q)
                        .map(|(v, qq)| (v - qq) * (v - qq))
                        .sum();
                    (dist, i)
                })
                .collect();
            oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let expected: Vec<usize> = oracle[..m.min(b)].iter().map(|(_, i)| *i).collect();
            let group = liis_select(&u, beta, &mut state).unwrap();
            assert_eq!(group.indices, expected);
        }
    }

    #[test]
    fn cosine_convention() {
        assert_eq!(cosine_or_neg_one(&[0.0, 0.0], &[1.0, 2.0]), -1.0);
        assert!((cosine_or_neg_one(&[1.0, 0.0], &[1.0, 1.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }
}
