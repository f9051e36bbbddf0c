//! Synthetic planted-signal benchmark generator.
//!
//! Negative bags draw every instance from an isotropic background. Positive
//! bags plant a witness cluster: the nearest grid cells around a sampled
//! tumor center get their features shifted by `separation` along one fixed
//! unit direction shared across the dataset (and recorded in the sidecar).
//! Everything is a pure function of `(master_seed, bag_id)`, so generation is
//! reproducible byte-for-byte and parallelizable per bag.

use crate::data::bag::{bag_label_from_instances, write_bag_file, BagRecord};
use crate::data::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::rng;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub train_bags: usize,
    pub val_bags: usize,
    pub test_bags: usize,
    pub bag_size_range: [usize; 2],
    pub feature_dim: usize,
    /// Fraction of a positive bag's instances that carry the signal.
    pub witness_rate: f64,
    /// Mean shift of witness features along the planted unit direction.
    pub separation: f64,
    /// Maximum distance of any witness cell from the tumor center, in grid
    /// units.
    pub spatial_radius: f64,
    /// Fraction of bags per split that are positive.
    pub positive_fraction: f64,
    pub master_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_bags: 200,
            val_bags: 50,
            test_bags: 100,
            bag_size_range: [256, 768],
            feature_dim: 32,
            witness_rate: 0.1,
            separation: 2.5,
            spatial_radius: 16.0,
            positive_fraction: 0.5,
            master_seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.bag_size_range;
        if lo < 1 || lo > hi {
            return Err(Error::InvalidConfig("bag_size_range must satisfy 1 <= min <= max".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.witness_rate) {
            return Err(Error::InvalidConfig("witness_rate must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::InvalidConfig("positive_fraction must be in [0, 1]".into()));
        }
        if self.separation < 0.0 {
            return Err(Error::InvalidConfig("separation must be >= 0".into()));
        }
        if self.spatial_radius <= 0.0 {
            return Err(Error::InvalidConfig("spatial_radius must be > 0".into()));
        }
        if self.positive_fraction > 0.0 && self.witness_rate * (lo as f64) < 1.0 {
            return Err(Error::WitnessRateTooLow);
        }
        Ok(())
    }
}

/// Generator provenance written next to the manifest.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct GeneratorSidecar {
    pub config: SyntheticConfig,
    pub witness_direction: Vec<f64>,
}

/// Grid coordinate of instance `index` in a bag of `size` instances:
/// row-major layout on a ceil(sqrt(size)) square.
pub fn grid_coord(index: usize, size: usize) -> (f32, f32) {
    let side = (size as f64).sqrt().ceil() as usize;
    ((index / side) as f32, (index % side) as f32)
}

/// The fixed unit direction along which witnesses are shifted.
pub fn witness_direction(config: &SyntheticConfig) -> Vec<f64> {
    let mut rng = rng::stream(config.master_seed, "witness-direction");
    let mut v: Vec<f64> =
        (0..config.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Generate one bag deterministically from `(master_seed, bag_id)`.
pub fn generate_bag(
    config: &SyntheticConfig,
    bag_id: &str,
    positive: bool,
    direction: &[f64],
) -> Result<BagRecord> {
    let mut rng = rng::stream(config.master_seed, bag_id);
    let [lo, hi] = config.bag_size_range;
    let size = rng.random_range(lo..=hi);
    let dim = config.feature_dim;

    let mut coords = Array2::<f32>::zeros((size, 2));
    for i in 0..size {
        let (r, c) = grid_coord(i, size);
        coords[(i, 0)] = r;
        coords[(i, 1)] = c;
    }

    let mut instance_labels = vec![0u8; size];
    if positive {
        let witnesses = (config.witness_rate * size as f64).ceil() as usize;
        if witnesses < 1 {
            return Err(Error::WitnessRateTooLow);
        }
        let center = rng.random_range(0..size);
        let (cr, cc) = (coords[(center, 0)] as f64, coords[(center, 1)] as f64);
        // Nearest-to-center cells form the witness disk; ties break on the
        // lower index so the layout is deterministic.
        let mut by_distance: Vec<(f64, usize)> = (0..size)
            .map(|i| {
                let dr = coords[(i, 0)] as f64 - cr;
                let dc = coords[(i, 1)] as f64 - cc;
                ((dr * dr + dc * dc).sqrt(), i)
            })
            .collect();
        by_distance.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let max_dist = by_distance[witnesses - 1].0;
        if max_dist > config.spatial_radius {
            return Err(Error::InvalidConfig(format!(
                "spatial_radius {} too small: witness disk of bag `{bag_id}` needs {max_dist:.3}",
                config.spatial_radius
            )));
        }
        for &(_, i) in &by_distance[..witnesses] {
            instance_labels[i] = 1;
        }
    }

    let mut features = Array2::<f32>::zeros((size, dim));
    for i in 0..size {
        for j in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let shift = if instance_labels[i] == 1 { config.separation * direction[j] } else { 0.0 };
            features[(i, j)] = (shift + noise) as f32;
        }
    }

    let label = bag_label_from_instances(&instance_labels)?;
    let record = BagRecord {
        bag_id: bag_id.to_string(),
        label,
        features,
        coords,
        instance_labels: Some(instance_labels),
    };
    record.validate()?;
    Ok(record)
}

/// Spread `positives` labels evenly over `count` bags.
fn is_positive(index: usize, count: usize, fraction: f64) -> bool {
    let upto = |k: usize| (k as f64 * fraction).floor() as usize;
    count > 0 && upto(index + 1) > upto(index)
}

/// Generate the full dataset under `out_dir`: bag files in `bags/`, a
/// `manifest.csv`, and a `generator.json` sidecar.
pub fn generate_synthetic_dataset(config: &SyntheticConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let direction = witness_direction(config);
    let bags_dir = out_dir.join("bags");
    std::fs::create_dir_all(&bags_dir).map_err(|e| Error::io(&bags_dir, e))?;

    let mut entries = Vec::new();
    for (split, count) in [
        (Split::Train, config.train_bags),
        (Split::Val, config.val_bags),
        (Split::Test, config.test_bags),
    ] {
        for i in 0..count {
            let bag_id = format!("{split}-{i:04}");
            let positive = is_positive(i, count, config.positive_fraction);
            let record = generate_bag(config, &bag_id, positive, &direction)?;
            let rel = Path::new("bags").join(format!("{bag_id}.bag"));
            write_bag_file(&record, &out_dir.join(&rel))?;
            entries.push(ManifestEntry { bag_id, path: rel, label: record.label, split });
        }
    }

    let manifest = DatasetManifest { entries };
    manifest.write_csv(&out_dir.join("manifest.csv"))?;
    let sidecar = GeneratorSidecar { config: config.clone(), witness_direction: direction };
    fsutil::atomic_write_str(
        &out_dir.join("generator.json"),
        &serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(manifest)
}
