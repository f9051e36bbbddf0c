//! Dataset manifest: the CSV index that maps bag ids to bag files and splits.

use crate::data::bag::{read_bag_file, BagRecord};
use crate::error::{Error, Result};
use crate::fsutil;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::BadManifest(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub bag_id: String,
    /// Bag file location, relative to the manifest's directory.
    pub path: PathBuf,
    pub label: u8,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn num_bags(&self) -> usize {
        self.entries.len()
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.bag_id.as_str()) {
                return Err(Error::BadManifest(format!("duplicate bag_id `{}`", e.bag_id)));
            }
            if e.label > 1 {
                return Err(Error::BadManifest(format!("bag `{}`: label must be 0/1", e.bag_id)));
            }
            for field in [e.bag_id.as_str(), e.path.to_str().unwrap_or("")] {
                if field.contains(',') || field.contains('\n') {
                    return Err(Error::BadManifest(format!("field `{field}` contains a delimiter")));
                }
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut out = String::from("bag_id,path,label,split\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.bag_id,
                e.path.display(),
                e.label,
                e.split
            ));
        }
        fsutil::atomic_write_str(path, &out)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some("bag_id,path,label,split") => {}
            _ => return Err(Error::BadManifest(format!("{}: missing header", path.display()))),
        }
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::BadManifest(format!(
                    "{}: line {} has {} fields",
                    path.display(),
                    lineno + 2,
                    fields.len()
                )));
            }
            entries.push(ManifestEntry {
                bag_id: fields[0].to_string(),
                path: PathBuf::from(fields[1]),
                label: fields[2]
                    .parse::<u8>()
                    .map_err(|_| Error::BadManifest(format!("bad label `{}`", fields[2])))?,
                split: fields[3].parse()?,
            });
        }
        let manifest = DatasetManifest { entries };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Load every bag of a split, resolving entry paths against `base_dir`
    /// (normally the manifest's own directory). Bag ids come from the
    /// manifest, which is authoritative.
    pub fn load_split(&self, base_dir: &Path, split: Split) -> Result<Vec<BagRecord>> {
        let mut bags = Vec::new();
        for entry in self.split_entries(split) {
            let mut bag = read_bag_file(&base_dir.join(&entry.path))?;
            bag.bag_id = entry.bag_id.clone();
            if bag.label != entry.label {
                return Err(Error::BadManifest(format!(
                    "bag `{}`: manifest label {} but file label {}",
                    entry.bag_id, entry.label, bag.label
                )));
            }
            bags.push(bag);
        }
        if bags.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        Ok(bags)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let manifest = DatasetManifest {
            entries: vec![
                ManifestEntry {
                    bag_id: "a".into(),
                    path: "bags/a.bag".into(),
                    label: 1,
                    split: Split::Train,
                },
                ManifestEntry {
                    bag_id: "b".into(),
                    path: "bags/b.bag".into(),
                    label: 0,
                    split: Split::Test,
                },
            ],
        };
        let dir = std::env::temp_dir().join(format!("pamil-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.csv");
        manifest.write_csv(&path).unwrap();
        let loaded = DatasetManifest::read_csv(&path).unwrap();
        assert_eq!(manifest, loaded);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn duplicate_ids_rejected() {
        let manifest = DatasetManifest {
            entries: vec![
                ManifestEntry { bag_id: "a".into(), path: "x".into(), label: 0, split: Split::Train },
                ManifestEntry { bag_id: "a".into(), path: "y".into(), label: 0, split: Split::Train },
            ],
        };
        assert!(manifest.validate().is_err());
    }
}
