//! Episode state for sequential instance sampling.
//!
//! An episode walks one bag: groups of up to `group_size` instances are
//! emitted without replacement until the remaining set is empty. All scheme
//! implementations mutate the state only through [`EpisodeState::take`],
//! which is what enforces the exactly-once partition invariant.

use crate::data::BagRecord;
use crate::error::{Error, Result};
use crate::sffr::StepToken;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// One emitted group: instance indices with their feature and coordinate
/// rows, in selection order.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledGroup {
    pub indices: Vec<usize>,
    pub features: Array2<f64>,
    pub coords: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct EpisodeState {
    remaining: Vec<usize>,
    step: usize,
    num_steps: usize,
    group_size: usize,
    features: Array2<f64>,
    coords: Array2<f64>,
    selected_coord_sum: [f64; 2],
    selected_count: usize,
    /// Spatial kernel scale for hybrid selection; filled in at episode start.
    pub ghss_tau: f64,
    /// Precomputed groups for fixed-partition schemes.
    pub(crate) pending: VecDeque<Vec<usize>>,
    /// Fused step tokens accumulated by the harness as the episode runs.
    pub past_tokens: Vec<StepToken>,
}

impl EpisodeState {
    /// Fresh state over a whole bag with `num_steps` planned groups.
    pub fn new(bag: &BagRecord, group_size: usize, num_steps: usize) -> Result<Self> {
        bag.validate()?;
        if group_size == 0 {
            return Err(Error::InvalidConfig("group_size must be >= 1".into()));
        }
        Ok(EpisodeState {
            remaining: (0..bag.num_instances()).collect(),
            step: 0,
            num_steps,
            group_size,
            features: bag.features.mapv(|v| v as f64),
            coords: bag.coords.mapv(|v| v as f64),
            selected_coord_sum: [0.0, 0.0],
            selected_count: 0,
            ghss_tau: 1.0,
            pending: VecDeque::new(),
            past_tokens: Vec::new(),
        })
    }

    pub fn remaining(&self) -> &[usize] {
        &self.remaining
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining.is_empty()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn feature_row(&self, index: usize) -> ndarray::ArrayView1<'_, f64> {
        self.features.row(index)
    }

    /// Mean coordinate of everything selected so far; the bag centroid before
    /// anything was selected.
    pub fn selected_centroid(&self) -> [f64; 2] {
        if self.selected_count == 0 {
            let n = self.coords.dim().0 as f64;
            let mut sum = [0.0, 0.0];
            for row in self.coords.rows() {
                sum[0] += row[0];
                sum[1] += row[1];
            }
            return [sum[0] / n, sum[1] / n];
        }
        [
            self.selected_coord_sum[0] / self.selected_count as f64,
            self.selected_coord_sum[1] / self.selected_count as f64,
        ]
    }

    /// Mean feature vector over the remaining instances.
    pub fn remaining_mean_feature(&self) -> Vec<f64> {
        let d = self.features.dim().1;
        let mut mean = vec![0.0; d];
        for &i in &self.remaining {
            for (m, v) in mean.iter_mut().zip(self.features.row(i)) {
                *m += v;
            }
        }
        let n = self.remaining.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Remove `indices` from the remaining set and materialize their group.
    /// Every index must currently be remaining; duplicates are a logic error.
    pub fn take(&mut self, indices: &[usize]) -> Result<SampledGroup> {
        if indices.is_empty() {
            return Err(Error::EmptyGroup);
        }
        let mut mask = vec![false; self.features.dim().0];
        for &i in indices {
            if i >= mask.len() || mask[i] || !self.remaining.binary_search(&i).is_ok() {
                return Err(Error::InvalidConfig(format!(
                    "index {i} is not available for selection"
                )));
            }
            mask[i] = true;
        }
        self.remaining.retain(|i| !mask[*i]);
        let d = self.features.dim().1;
        let mut features = Array2::zeros((indices.len(), d));
        let mut coords = Array2::zeros((indices.len(), 2));
        for (row, &i) in indices.iter().enumerate() {
            features.row_mut(row).assign(&self.features.row(i));
            coords.row_mut(row).assign(&self.coords.row(i));
            self.selected_coord_sum[0] += self.coords[(i, 0)];
            self.selected_coord_sum[1] += self.coords[(i, 1)];
            self.selected_count += 1;
        }
        self.step += 1;
        Ok(SampledGroup { indices: indices.to_vec(), features, coords })
    }
}

/// Number of steps needed to cover `bag_size` instances in groups of
/// `group_size`: the ceiling division, so a short final group is emitted
/// rather than dropping instances.
pub fn episode_length(bag_size: usize, group_size: usize) -> usize {
    bag_size.div_ceil(group_size)
}

/// Start a policy-driven episode: the first group is a uniform random subset
/// of size min(group_size, bag size) and the step budget is the ceiling
/// division of the bag by the group size.
pub fn init_episode(
    bag: &BagRecord,
    group_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(EpisodeState, SampledGroup)> {
    let b = bag.num_instances();
    let num_steps = episode_length(b, group_size);
    let mut state = EpisodeState::new(bag, group_size, num_steps)?;
    let k = group_size.min(b);
    let chosen: Vec<usize> = rand::seq::index::sample(rng, b, k).into_iter().collect();
    let group = state.take(&chosen)?;
    Ok((state, group))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array2;

    fn bag(b: usize, d: usize) -> BagRecord {
        let mut rng = stream(1, "episode-bag");
        use rand::Rng;
        BagRecord {
            bag_id: format!("b{b}"),
            label: 0,
            features: Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0f32..1.0)),
            coords: Array2::from_shape_fn((b, 2), |(i, j)| if j == 0 { i as f32 } else { 0.0 }),
            instance_labels: None,
        }
    }

    #[test]
    fn step_budget_is_ceiling_division() {
        assert_eq!(episode_length(1024, 512), 2);
        assert_eq!(episode_length(1025, 512), 3);
        assert_eq!(episode_length(100, 512), 1);
    }

    #[test]
    fn init_emits_random_group_and_tracks_remaining() {
        let bag = bag(100, 4);
        let mut rng = stream(3, "init");
        let (state, group) = init_episode(&bag, 512, &mut rng).unwrap();
        assert_eq!(state.num_steps(), 1);
        assert_eq!(group.indices.len(), 100);
        assert!(state.is_exhausted());

        let mut rng = stream(3, "init2");
        let (state, group) = init_episode(&bag, 30, &mut rng).unwrap();
        assert_eq!(state.num_steps(), 4);
        assert_eq!(group.indices.len(), 30);
        assert_eq!(state.remaining().len(), 70);
        for i in &group.indices {
            assert!(!state.remaining().contains(i));
        }
    }

    #[test]
    fn short_final_group() {
        let bag = bag(65, 3);
        let mut rng = stream(9, "short");
        let (mut state, first) = init_episode(&bag, 32, &mut rng).unwrap();
        assert_eq!(state.num_steps(), 3);
        assert_eq!(first.indices.len(), 32);
        let next: Vec<usize> = state.remaining()[..32].to_vec();
        state.take(&next).unwrap();
        let last: Vec<usize> = state.remaining().to_vec();
        let group = state.take(&last).unwrap();
        assert_eq!(group.indices.len(), 1);
        assert!(state.is_exhausted());
    }

    #[test]
    fn take_rejects_reuse() {
        let bag = bag(10, 2);
        let mut state = EpisodeState::new(&bag, 5, 2).unwrap();
        state.take(&[0, 1, 2]).unwrap();
        assert!(state.take(&[2, 3]).is_err());
        assert!(state.take(&[3, 3]).is_err());
    }
}
