//! Bag containers, dataset manifests, and the synthetic benchmark generator.

pub mod bag;
pub mod manifest;
pub mod synth;

pub use bag::{bag_label_from_instances, read_bag_file, write_bag_file, BagRecord};
pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use synth::{generate_synthetic_dataset, GeneratorSidecar, SyntheticConfig};
