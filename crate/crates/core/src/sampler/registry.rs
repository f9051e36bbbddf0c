//! Strategy registry: every sampling scheme behind one trait, looked up by
//! name and selected at runtime from config or the command line.

use crate::data::BagRecord;
use crate::error::{Error, Result};
use crate::rng;
use crate::sampler::baselines::{baseline_grouping, GroupingKind};
use crate::sampler::episode::{episode_length, init_episode, EpisodeState, SampledGroup};
use crate::sampler::schemes::{ghss_select, gmss_select, liis_select};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Gmss,
    Ghss,
    Liis,
    Random,
    Position,
    Kmeans,
    RandomGroup,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Gmss => "gmss",
            SchemeKind::Ghss => "ghss",
            SchemeKind::Liis => "liis",
            SchemeKind::Random => "random",
            SchemeKind::Position => "position",
            SchemeKind::Kmeans => "kmeans",
            SchemeKind::RandomGroup => "random-group",
        }
    }

    pub fn all() -> &'static [SchemeKind] {
        &[
            SchemeKind::Gmss,
            SchemeKind::Ghss,
            SchemeKind::Liis,
            SchemeKind::Random,
            SchemeKind::Position,
            SchemeKind::Kmeans,
            SchemeKind::RandomGroup,
        ]
    }

    pub fn is_policy_driven(self) -> bool {
        matches!(self, SchemeKind::Gmss | SchemeKind::Ghss | SchemeKind::Liis)
    }
}

impl FromStr for SchemeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let canon = s.to_ascii_lowercase().replace('_', "-");
        SchemeKind::all()
            .iter()
            .copied()
            .find(|k| k.name() == canon)
            .ok_or_else(|| Error::UnknownScheme(s.to_string()))
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What kind of action a scheme consumes each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSpace {
    /// A continuous query vector in feature space.
    QueryGaussian,
    /// An index into the interpolation-coefficient grid.
    BetaCategorical,
    /// No policy involvement; groups are fixed at episode start.
    NoPolicy,
}

/// Action handed to a sampler for one step.
#[derive(Clone, Debug, PartialEq)]
pub enum SamplerAction {
    Query(Vec<f64>),
    BetaIndex(usize),
    None,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub scheme: SchemeKind,
    /// Instances per sampled group (M).
    pub group_size: usize,
    /// Feature-vs-spatial blend for the hybrid scheme.
    pub ghss_alpha: f64,
    /// Spatial kernel scale; `None` uses the bag's median pairwise
    /// coordinate distance, computed once per episode.
    pub ghss_tau: Option<f64>,
    /// Interpolation coefficients selectable by the policy.
    pub liis_beta_grid: Vec<f64>,
    /// Cluster/group count for the k-means and random-group baselines.
    pub n_groups: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            scheme: SchemeKind::Liis,
            group_size: 128,
            ghss_alpha: 0.5,
            ghss_tau: None,
            liis_beta_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            n_groups: 4,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::InvalidConfig("sampler.group_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ghss_alpha) {
            return Err(Error::InvalidConfig("sampler.ghss_alpha must be in [0, 1]".into()));
        }
        if let Some(tau) = self.ghss_tau {
            if tau <= 0.0 {
                return Err(Error::InvalidConfig("sampler.ghss_tau must be > 0".into()));
            }
        }
        if self.liis_beta_grid.is_empty() {
            return Err(Error::InvalidConfig("sampler.liis_beta_grid must be non-empty".into()));
        }
        let grid = &self.liis_beta_grid;
        let increasing = grid.windows(2).all(|w| w[0] < w[1]);
        if !increasing || grid.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::InvalidConfig(
                "sampler.liis_beta_grid must be strictly increasing within [0, 1]".into(),
            ));
        }
        if self.n_groups == 0 {
            return Err(Error::InvalidConfig("sampler.n_groups must be >= 1".into()));
        }
        Ok(())
    }
}

/// A sampling strategy: starts episodes over bags and emits one group per
/// step. Implementations are stateless and shareable; per-episode state lives
/// in [`EpisodeState`].
pub trait InstanceSampler: Send + Sync {
    fn name(&self) -> &'static str;
    fn kind(&self) -> SchemeKind;
    fn action_space(&self) -> ActionSpace;
    /// Begin an episode, emitting the first group.
    fn start(&self, bag: &BagRecord, seed: u64) -> Result<(EpisodeState, SampledGroup)>;
    /// Emit the next group. Fixed schemes ignore `action`.
    fn next_group(&self, state: &mut EpisodeState, action: &SamplerAction) -> Result<SampledGroup>;
}

/// Median pairwise coordinate distance of a bag; the scale-free default for
/// the hybrid scheme's spatial kernel.
pub fn median_pairwise_distance(bag: &BagRecord) -> f64 {
    let b = bag.num_instances();
    if b < 2 {
        return 1.0;
    }
    let mut dists = Vec::with_capacity(b * (b - 1) / 2);
    for i in 0..b {
        for j in (i + 1)..b {
            let dr = (bag.coords[(i, 0)] - bag.coords[(j, 0)]) as f64;
            let dc = (bag.coords[(i, 1)] - bag.coords[(j, 1)]) as f64;
            dists.push((dr * dr + dc * dc).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 { (dists[mid - 1] + dists[mid]) / 2.0 } else { dists[mid] };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

struct PolicyScheme {
    config: SamplerConfig,
}

impl PolicyScheme {
    fn query_from(action: &SamplerAction) -> Result<&[f64]> {
        match action {
            SamplerAction::Query(q) => Ok(q),
            _ => Err(Error::InvalidConfig("scheme expects a query action".into())),
        }
    }
}

impl InstanceSampler for PolicyScheme {
    fn name(&self) -> &'static str {
        self.config.scheme.name()
    }

    fn kind(&self) -> SchemeKind {
        self.config.scheme
    }

    fn action_space(&self) -> ActionSpace {
        match self.config.scheme {
            SchemeKind::Liis => ActionSpace::BetaCategorical,
            _ => ActionSpace::QueryGaussian,
        }
    }

    fn start(&self, bag: &BagRecord, seed: u64) -> Result<(EpisodeState, SampledGroup)> {
        let mut episode_rng = rng::stream_indexed(seed, "episode-init", 0);
        let (mut state, group) = init_episode(bag, self.config.group_size, &mut episode_rng)?;
        if self.config.scheme == SchemeKind::Ghss {
            state.ghss_tau = match self.config.ghss_tau {
                Some(tau) => tau,
                None => median_pairwise_distance(bag),
            };
        }
        Ok((state, group))
    }

    fn next_group(&self, state: &mut EpisodeState, action: &SamplerAction) -> Result<SampledGroup> {
        match self.config.scheme {
            SchemeKind::Gmss => gmss_select(Self::query_from(action)?, state),
            SchemeKind::Ghss => {
                let centroid = state.selected_centroid();
                let tau = state.ghss_tau;
                ghss_select(Self::query_from(action)?, state, centroid, self.config.ghss_alpha, tau)
            }
            SchemeKind::Liis => {
                let beta_index = match action {
                    SamplerAction::BetaIndex(i) => *i,
                    _ => return Err(Error::InvalidConfig("scheme expects a beta action".into())),
                };
                let beta =
                    *self.config.liis_beta_grid.get(beta_index).ok_or_else(|| {
                        Error::InvalidConfig(format!("beta index {beta_index} out of grid"))
                    })?;
                let token = state
                    .past_tokens
                    .last()
                    .map(|t| t.vector.clone())
                    .unwrap_or_else(|| vec![0.0; state.features().dim().1]);
                liis_select(&token, beta, state)
            }
            _ => unreachable!("PolicyScheme only wraps policy-driven kinds"),
        }
    }
}

struct FixedScheme {
    kind: SchemeKind,
    grouping: GroupingKind,
    config: SamplerConfig,
}

impl InstanceSampler for FixedScheme {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn kind(&self) -> SchemeKind {
        self.kind
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::NoPolicy
    }

    fn start(&self, bag: &BagRecord, seed: u64) -> Result<(EpisodeState, SampledGroup)> {
        let mut grouping_rng = rng::stream_indexed(seed, "grouping", 0);
        let groups = baseline_grouping(
            bag,
            self.grouping,
            self.config.group_size,
            self.config.n_groups,
            &mut grouping_rng,
        )?;
        let mut state = EpisodeState::new(bag, self.config.group_size, groups.len())?;
        state.pending = groups.into();
        let first = state.pending.pop_front().ok_or(Error::EmptyBag)?;
        let group = state.take(&first)?;
        Ok((state, group))
    }

    fn next_group(&self, state: &mut EpisodeState, _action: &SamplerAction) -> Result<SampledGroup> {
        let next = state.pending.pop_front().ok_or(Error::EmptyGroup)?;
        state.take(&next)
    }
}

/// Build the sampler registered under `config.scheme`.
pub fn create_sampler(config: &SamplerConfig) -> Result<Box<dyn InstanceSampler>> {
    config.validate()?;
    let sampler: Box<dyn InstanceSampler> = match config.scheme {
        SchemeKind::Gmss | SchemeKind::Ghss | SchemeKind::Liis => {
            Box::new(PolicyScheme { config: config.clone() })
        }
        SchemeKind::Random => Box::new(FixedScheme {
            kind: SchemeKind::Random,
            grouping: GroupingKind::Random,
            config: config.clone(),
        }),
        SchemeKind::Position => Box::new(FixedScheme {
            kind: SchemeKind::Position,
            grouping: GroupingKind::Position,
            config: config.clone(),
        }),
        SchemeKind::Kmeans => Box::new(FixedScheme {
            kind: SchemeKind::Kmeans,
            grouping: GroupingKind::Kmeans,
            config: config.clone(),
        }),
        SchemeKind::RandomGroup => Box::new(FixedScheme {
            kind: SchemeKind::RandomGroup,
            grouping: GroupingKind::RandomGroup,
            config: config.clone(),
        }),
    };
    Ok(sampler)
}

/// Names accepted by [`create_sampler`] / `--scheme`.
pub fn scheme_names() -> Vec<&'static str> {
    SchemeKind::all().iter().map(|k| k.name()).collect()
}

/// Planned number of steps for a scheme over a bag of `bag_size` instances.
pub fn planned_steps(config: &SamplerConfig, bag_size: usize) -> usize {
    match config.scheme {
        SchemeKind::Kmeans | SchemeKind::RandomGroup => config.n_groups.min(bag_size),
        _ => episode_length(bag_size, config.group_size),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn random_bag(seed: u64, b: usize, d: usize) -> BagRecord {
        let mut rng = crate::rng::stream(seed, "registry-bag");
        let side = (b as f64).sqrt().ceil() as usize;
        BagRecord {
            bag_id: format!("r{seed}"),
            label: 0,
            features: Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0f32..1.0)),
            coords: Array2::from_shape_fn((b, 2), |(i, j)| {
                if j == 0 { (i / side) as f32 } else { (i % side) as f32 }
            }),
            instance_labels: None,
        }
    }

    fn drive_episode(scheme: SchemeKind, bag: &BagRecord, seed: u64) -> Vec<Vec<usize>> {
        let config = SamplerConfig {
            scheme,
            group_size: 7,
            n_groups: 3,
            ..SamplerConfig::default()
        };
        let sampler = create_sampler(&config).unwrap();
        let (mut state, first) = sampler.start(bag, seed).unwrap();
        let mut groups = vec![first.indices.clone()];
        let mut rng = crate::rng::stream(seed, "drive");
        while !state.is_exhausted() {
            let action = match sampler.action_space() {
                ActionSpace::QueryGaussian => SamplerAction::Query(
                    (0..bag.feature_dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
                ),
                ActionSpace::BetaCategorical => {
                    SamplerAction::BetaIndex(rng.random_range(0..config.liis_beta_grid.len()))
                }
                ActionSpace::NoPolicy => SamplerAction::None,
            };
            groups.push(sampler.next_group(&mut state, &action).unwrap().indices.clone());
        }
        groups
    }

    #[test]
    fn every_scheme_partitions_exactly_once() {
        for &scheme in SchemeKind::all() {
            for seed in [1u64, 2, 3] {
                let bag = random_bag(seed, 41, 5);
                let groups = drive_episode(scheme, &bag, seed);
                let mut seen = vec![false; 41];
                for g in &groups {
                    for &i in g {
                        assert!(!seen[i], "{scheme}: index {i} repeated");
                        seen[i] = true;
                    }
                }
                assert!(seen.iter().all(|s| *s), "{scheme}: incomplete cover");
            }
        }
    }

    #[test]
    fn episodes_are_deterministic_given_seed() {
        for &scheme in SchemeKind::all() {
            let bag = random_bag(9, 30, 4);
            let a = drive_episode(scheme, &bag, 77);
            let b = drive_episode(scheme, &bag, 77);
            assert_eq!(a, b, "{scheme} differs across identical runs");
        }
    }

    #[test]
    fn scheme_lookup_by_name() {
        assert_eq!("gmss".parse::<SchemeKind>().unwrap(), SchemeKind::Gmss);
        assert_eq!("RANDOM_GROUP".parse::<SchemeKind>().unwrap(), SchemeKind::RandomGroup);
        assert!(matches!("nope".parse::<SchemeKind>(), Err(Error::UnknownScheme(_))));
        assert_eq!(scheme_names().len(), 7);
    }

    #[test]
    fn beta_grid_must_be_increasing() {
        let config = SamplerConfig {
            liis_beta_grid: vec![0.0, 0.5, 0.5],
            ..SamplerConfig::default()
        };
        assert!(config.validate().is_err());
    }
}
