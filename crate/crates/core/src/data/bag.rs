//! Bag container type and its binary file format.
//!
//! Layout (little-endian): magic `PMLB`, version u32, instance count u32,
//! feature dim u32, bag label u8, instance-label flag u8, then the f32
//! feature matrix row-major, the f32 coordinate matrix, and (if flagged) one
//! u8 label per instance.

use crate::error::{Error, Result};
use ndarray::Array2;
use std::fs;
use std::io::Read;
use std::path::Path;

pub const BAG_MAGIC: [u8; 4] = *b"PMLB";
pub const BAG_VERSION: u32 = 1;

/// One multi-instance bag: a weakly labeled set of feature vectors with grid
/// coordinates. Instance labels are carried only by synthetic data, for
/// diagnostics; real feature bags omit them.
#[derive(Clone, Debug, PartialEq)]
pub struct BagRecord {
    pub bag_id: String,
    pub label: u8,
    pub features: Array2<f32>,
    pub coords: Array2<f32>,
    pub instance_labels: Option<Vec<u8>>,
}

impl BagRecord {
    pub fn num_instances(&self) -> usize {
        self.features.dim().0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim().1
    }

    pub fn validate(&self) -> Result<()> {
        let (b, d) = self.features.dim();
        if b == 0 {
            return Err(Error::EmptyBag);
        }
        if d == 0 {
            return Err(Error::InvalidConfig("feature_dim must be >= 1".into()));
        }
        if self.coords.dim() != (b, 2) {
            return Err(Error::InvalidConfig(format!(
                "bag {}: coords shape {:?} does not match {} instances",
                self.bag_id,
                self.coords.dim(),
                b
            )));
        }
        if self.label > 1 {
            return Err(Error::InvalidConfig(format!("bag {}: label must be 0 or 1", self.bag_id)));
        }
        if !self.features.iter().all(|v| v.is_finite()) || !self.coords.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(format!("bag {}: non-finite values", self.bag_id)));
        }
        if let Some(labels) = &self.instance_labels {
            if labels.len() != b {
                return Err(Error::InvalidConfig(format!(
                    "bag {}: {} instance labels for {} instances",
                    self.bag_id,
                    labels.len(),
                    b
                )));
            }
            if labels.iter().any(|l| *l > 1) {
                return Err(Error::InvalidConfig(format!("bag {}: instance labels must be 0/1", self.bag_id)));
            }
            if bag_label_from_instances(labels)? != self.label {
                return Err(Error::InvalidConfig(format!(
                    "bag {}: label inconsistent with instance labels",
                    self.bag_id
                )));
            }
        }
        Ok(())
    }
}

/// Bag label implied by instance labels: negative only when every instance is
/// negative.
pub fn bag_label_from_instances(instance_labels: &[u8]) -> Result<u8> {
    if instance_labels.is_empty() {
        return Err(Error::EmptyBag);
    }
    Ok(if instance_labels.iter().any(|l| *l != 0) { 1 } else { 0 })
}

/// Serialized size of a record, in bytes.
pub fn bag_file_len(num_instances: usize, feature_dim: usize, has_instance_labels: bool) -> usize {
    let header = 4 + 4 + 4 + 4 + 1 + 1;
    header
        + num_instances * feature_dim * 4
        + num_instances * 2 * 4
        + if has_instance_labels { num_instances } else { 0 }
}

pub fn write_bag_file(record: &BagRecord, path: &Path) -> Result<()> {
    record.validate()?;
    let (b, d) = record.features.dim();
    let mut buf = Vec::with_capacity(bag_file_len(b, d, record.instance_labels.is_some()));
    buf.extend_from_slice(&BAG_MAGIC);
    buf.extend_from_slice(&BAG_VERSION.to_le_bytes());
    buf.extend_from_slice(&(b as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.push(record.label);
    buf.push(record.instance_labels.is_some() as u8);
    for v in record.features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in record.coords.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &record.instance_labels {
        buf.extend_from_slice(labels);
    }
    crate::fsutil::atomic_write(path, &buf)
}

pub fn read_bag_file(path: &Path) -> Result<BagRecord> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
    parse_bag_bytes(&data, path)
}

fn parse_bag_bytes(data: &[u8], path: &Path) -> Result<BagRecord> {
    let name = path.display().to_string();
    if data.len() < 18 {
        if data.len() < 8 || data[0..4] != BAG_MAGIC {
            return Err(Error::UnrecognizedBagFile(name));
        }
        return Err(Error::CorruptBagFile(format!("{name}: truncated header")));
    }
    if data[0..4] != BAG_MAGIC {
        return Err(Error::UnrecognizedBagFile(format!("{name}: bad magic")));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != BAG_VERSION {
        return Err(Error::UnrecognizedBagFile(format!("{name}: unsupported version {version}")));
    }
    let b = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(data[12..16].try_into().unwrap()) as usize;
    let label = data[16];
    let has_labels = match data[17] {
        0 => false,
        1 => true,
        other => return Err(Error::CorruptBagFile(format!("{name}: bad label flag {other}"))),
    };
    let expected = bag_file_len(b, d, has_labels);
    if data.len() != expected {
        return Err(Error::CorruptBagFile(format!(
            "{name}: {} bytes, expected {expected}",
            data.len()
        )));
    }
    let mut offset = 18;
    let read_f32 = |n: usize, offset: &mut usize| {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(f32::from_le_bytes(data[*offset..*offset + 4].try_into().unwrap()));
            *offset += 4;
        }
        out
    };
    let features = Array2::from_shape_vec((b, d), read_f32(b * d, &mut offset))
        .expect("shape checked by length");
    let coords =
        Array2::from_shape_vec((b, 2), read_f32(b * 2, &mut offset)).expect("shape checked");
    let instance_labels = if has_labels {
        Some(data[offset..offset + b].to_vec())
    } else {
        None
    };
    let bag_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let record = BagRecord { bag_id, label, features, coords, instance_labels };
    record.validate()?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempdir::tempdir;

    // Minimal tempdir helper so unit tests need no extra dev-dependency.
    mod tempdir {
        use std::path::PathBuf;
        use std::sync::atomic::{AtomicU64, Ordering};

        pub struct TempDir(pub PathBuf);
        impl Drop for TempDir {
            fn drop(&mut self) {
                let _ = std::fs::remove_dir_all(&self.0);
            }
        }
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        pub fn tempdir(tag: &str) -> TempDir {
            let id = COUNTER.fetch_add(1, Ordering::SeqCst);
            let dir = std::env::temp_dir().join(format!(
                "pamil-test-{tag}-{}-{id}",
                std::process::id()
            ));
            std::fs::create_dir_all(&dir).unwrap();
            TempDir(dir)
        }
    }

    fn sample_record() -> BagRecord {
        BagRecord {
            bag_id: "bag".into(),
            label: 1,
            features: array![[1.0f32, 2.0], [3.0, 4.0], [5.0, 6.0]],
            coords: array![[0.0f32, 0.0], [0.0, 1.0], [1.0, 0.0]],
            instance_labels: Some(vec![0, 1, 0]),
        }
    }

    #[test]
    fn label_from_instances_matches_definition() {
        assert_eq!(bag_label_from_instances(&[0, 0, 0, 0]).unwrap(), 0);
        assert_eq!(bag_label_from_instances(&[0, 0, 1, 0]).unwrap(), 1);
        assert_eq!(bag_label_from_instances(&[1, 1, 1]).unwrap(), 1);
        assert!(matches!(bag_label_from_instances(&[]), Err(Error::EmptyBag)));
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempdir("bag-rt");
        let path = dir.0.join("bag.bag");
        let record = sample_record();
        write_bag_file(&record, &path).unwrap();
        let loaded = read_bag_file(&path).unwrap();
        assert_eq!(record, loaded);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempdir("bag-magic");
        let path = dir.0.join("bad.bag");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00moredata").unwrap();
        assert!(matches!(read_bag_file(&path), Err(Error::UnrecognizedBagFile(_))));
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = tempdir("bag-trunc");
        let path = dir.0.join("bag.bag");
        write_bag_file(&sample_record(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_bag_file(&path), Err(Error::CorruptBagFile(_))));
    }

    #[test]
    fn single_instance_file_length_matches_layout() {
        // B=1, D=1 with instance labels: 18-byte header + one f32 feature
        // + two f32 coords + one label byte.
        let dir = tempdir("bag-len");
        let path = dir.0.join("one.bag");
        let record = BagRecord {
            bag_id: "one".into(),
            label: 0,
            features: array![[0.5f32]],
            coords: array![[0.0f32, 0.0]],
            instance_labels: Some(vec![0]),
        };
        write_bag_file(&record, &path).unwrap();
        let expected = 18 + 4 + 8 + 1;
        assert_eq!(bag_file_len(1, 1, true), expected);
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, expected);
    }
}
