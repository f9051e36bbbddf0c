//! Instance sampling: episode state, the policy-driven selection schemes,
//! fixed grouping baselines, and the runtime strategy registry.

pub mod baselines;
pub mod episode;
pub mod registry;
pub mod schemes;

pub use baselines::{baseline_grouping, kmeans, GroupingKind};
pub use episode::{episode_length, init_episode, EpisodeState, SampledGroup};
pub use registry::{
    create_sampler, median_pairwise_distance, planned_steps, scheme_names, ActionSpace,
    InstanceSampler, SamplerAction, SamplerConfig, SchemeKind,
};
pub use schemes::{cosine_or_neg_one, ghss_select, gmss_select, liis_query, liis_select};
