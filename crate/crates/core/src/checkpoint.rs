//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): magic `PMLC`, version u32, config hash u64, epoch
//! u32, master seed u64, best validation AUC (f64 bits), two optimizer step
//! counters, the embedded config JSON, then three named-tensor tables:
//! parameters, first moments, infinity-norm moments. Tensors round-trip
//! bit-exactly; loading with a mismatched config hash warns but proceeds.

use crate::error::{Error, Result};
use crate::fsutil;
use ndarray::Array2;
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PMLC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything a training run needs to resume exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub config_hash: u64,
    pub config_json: String,
    /// Epochs completed so far.
    pub epoch: u32,
    pub master_seed: u64,
    pub best_val_auc: f64,
    pub sftc_opt_step: u64,
    pub policy_opt_step: u64,
    /// Model parameters, keyed `sffr.*`, `tcm.*`, `policy.*`.
    pub params: BTreeMap<String, Array2<f64>>,
    /// Optimizer first moments, keyed like the parameter they track.
    pub moments_m: BTreeMap<String, Array2<f64>>,
    /// Optimizer infinity-norm moments.
    pub moments_u: BTreeMap<String, Array2<f64>>,
}

fn push_tensor_table(buf: &mut Vec<u8>, table: &BTreeMap<String, Array2<f64>>) {
    buf.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, tensor) in table {
        let bytes = name.as_bytes();
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
        let (r, c) = tensor.dim();
        buf.extend_from_slice(&(r as u32).to_le_bytes());
        buf.extend_from_slice(&(c as u32).to_le_bytes());
        for v in tensor.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    offset: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.data.len() {
            return Err(Error::CorruptCheckpoint(format!("{}: truncated", self.path)));
        }
        let slice = &self.data[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor_table(&mut self) -> Result<BTreeMap<String, Array2<f64>>> {
        let count = self.u32()? as usize;
        let mut table = BTreeMap::new();
        for _ in 0..count {
            let name_len = self.u16()? as usize;
            let name = String::from_utf8(self.take(name_len)?.to_vec())
                .map_err(|_| Error::CorruptCheckpoint(format!("{}: bad tensor name", self.path)))?;
            let r = self.u32()? as usize;
            let c = self.u32()? as usize;
            let raw = self.take(r * c * 8)?;
            let mut values = Vec::with_capacity(r * c);
            for chunk in raw.chunks_exact(8) {
                values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            table.insert(name, Array2::from_shape_vec((r, c), values).expect("sized"));
        }
        Ok(table)
    }
}

pub fn checkpoint_save(data: &CheckpointData, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&data.config_hash.to_le_bytes());
    buf.extend_from_slice(&data.epoch.to_le_bytes());
    buf.extend_from_slice(&data.master_seed.to_le_bytes());
    buf.extend_from_slice(&data.best_val_auc.to_bits().to_le_bytes());
    buf.extend_from_slice(&data.sftc_opt_step.to_le_bytes());
    buf.extend_from_slice(&data.policy_opt_step.to_le_bytes());
    let config_bytes = data.config_json.as_bytes();
    buf.extend_from_slice(&(config_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_bytes);
    push_tensor_table(&mut buf, &data.params);
    push_tensor_table(&mut buf, &data.moments_m);
    push_tensor_table(&mut buf, &data.moments_u);
    fsutil::atomic_write(path, &buf)
}

pub fn checkpoint_load(path: &Path) -> Result<CheckpointData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = Reader { data: &bytes, offset: 0, path: path.display().to_string() };
    let magic = reader.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint(format!("{}: bad magic", path.display())));
    }
    let version = reader.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedCheckpointVersion(version));
    }
    let config_hash = reader.u64()?;
    let epoch = reader.u32()?;
    let master_seed = reader.u64()?;
    let best_val_auc = f64::from_bits(reader.u64()?);
    let sftc_opt_step = reader.u64()?;
    let policy_opt_step = reader.u64()?;
    let config_len = reader.u32()? as usize;
    let config_json = String::from_utf8(reader.take(config_len)?.to_vec())
        .map_err(|_| Error::CorruptCheckpoint(format!("{}: bad config", path.display())))?;
    let params = reader.tensor_table()?;
    let moments_m = reader.tensor_table()?;
    let moments_u = reader.tensor_table()?;
    if reader.offset != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{}: trailing bytes", path.display())));
    }
    Ok(CheckpointData {
        config_hash,
        config_json,
        epoch,
        master_seed,
        best_val_auc,
        sftc_opt_step,
        policy_opt_step,
        params,
        moments_m,
        moments_u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> CheckpointData {
        let mut params = BTreeMap::new();
        params.insert("sffr.init_token".to_string(), array![[0.1, -0.2, 0.3]]);
        params.insert("tcm.class_token".to_string(), array![[1.5, 2.5, -3.5]]);
        let mut m = BTreeMap::new();
        m.insert("sffr.init_token".to_string(), array![[0.0, 0.0, 1e-9]]);
        CheckpointData {
            config_hash: 0xdead_beef,
            config_json: "{\"train\":{\"seed\":7}}".to_string(),
            epoch: 12,
            master_seed: 7,
            best_val_auc: 0.987654321,
            sftc_opt_step: 144,
            policy_opt_step: 36,
            params,
            moments_m: m,
            moments_u: BTreeMap::new(),
        }
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("pamil-ckpt-{name}-{}", std::process::id()))
    }

    #[test]
    fn round_trip_is_bitwise() {
        let data = sample();
        let path = tmp("rt");
        checkpoint_save(&data, &path).unwrap();
        let loaded = checkpoint_load(&path).unwrap();
        assert_eq!(data, loaded);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn tampered_version_is_rejected() {
        let data = sample();
        let path = tmp("ver");
        checkpoint_save(&data, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            checkpoint_load(&path),
            Err(Error::UnsupportedCheckpointVersion(99))
        ));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn truncation_is_corrupt() {
        let data = sample();
        let path = tmp("trunc");
        checkpoint_save(&data, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(checkpoint_load(&path), Err(Error::CorruptCheckpoint(_))));
        std::fs::remove_file(&path).ok();
    }
}
