//! Self-describing binary checkpoint container.
//!
//! Layout: magic, little-endian u64 header length, UTF-8 JSON header,
//! u64 array count, then per array: u16 name length, name bytes, u8 kind,
//! u8 rank, u64 dims, raw little-endian f64 data. Round-trips bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::params::{ParamKind, ParamVisit};
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SEGFCKP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Teacher,
    Student,
    RgbForecaster,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub kind: ModelKind,
    pub model_config: ModelConfig,
    pub out_channels: usize,
    /// Global optimization step at save time (0 for untrained).
    pub step: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayKind {
    Param,
    Buffer,
    /// Optimizer state (Adam moments); present in training checkpoints.
    OptState,
}

impl ArrayKind {
    fn to_byte(self) -> u8 {
        match self {
            ArrayKind::Param => 0,
            ArrayKind::Buffer => 1,
            ArrayKind::OptState => 2,
        }
    }
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ArrayKind::Param),
            1 => Ok(ArrayKind::Buffer),
            2 => Ok(ArrayKind::OptState),
            other => Err(Error::Data(format!("unknown array kind byte {other}"))),
        }
    }
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: BTreeMap<String, (ArrayKind, ArrayD<f64>)>,
}

impl Checkpoint {
    /// Collect every named array of a model (params and buffers).
    pub fn from_model(header: CheckpointHeader, model: &dyn ParamVisit) -> Self {
        let mut arrays = BTreeMap::new();
        model.visit_params(&mut |name, kind, view| {
            let k = match kind {
                ParamKind::Trainable => ArrayKind::Param,
                ParamKind::Buffer => ArrayKind::Buffer,
            };
            arrays.insert(name.to_string(), (k, view.to_owned()));
        });
        Checkpoint { header, arrays }
    }

    /// Copy stored params/buffers into a freshly constructed model. Every
    /// model array must be present with a matching shape; optimizer-state
    /// arrays are ignored here.
    pub fn load_into(&self, model: &mut dyn ParamVisit) -> Result<()> {
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        model.visit_params_mut(&mut |name, _, mut view| {
            match self.arrays.get(name) {
                Some((_, stored)) => {
                    if stored.shape() == view.shape() {
                        view.assign(stored);
                    } else {
                        mismatched.push(format!(
                            "{name}: stored {:?} vs model {:?}",
                            stored.shape(),
                            view.shape()
                        ));
                    }
                }
                None => missing.push(name.to_string()),
            }
        });
        if !missing.is_empty() || !mismatched.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint does not match the model architecture (missing: {missing:?}, mismatched: {mismatched:?})"
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        let header = serde_json::to_vec(&self.header)?;
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, (kind, arr)) in &self.arrays {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(kind.to_byte());
            buf.push(arr.ndim() as u8);
            for &d in arr.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let std = arr.as_standard_layout();
            for v in std.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(Error::Data(format!(
                    "checkpoint {} is truncated",
                    path.display()
                )));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(Error::Data(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let hlen = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(&mut pos, hlen)?)?;
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
                .map_err(|_| Error::Data("checkpoint array name is not UTF-8".into()))?;
            let kind = ArrayKind::from_byte(take(&mut pos, 1)?[0])?;
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let n: usize = dims.iter().product();
            let raw = take(&mut pos, n * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Data(format!("bad array shape in checkpoint: {e}")))?;
            arrays.insert(name, (kind, arr));
        }
        if pos != buf.len() {
            return Err(Error::Data(format!(
                "checkpoint {} has {} trailing bytes",
                path.display(),
                buf.len() - pos
            )));
        }
        Ok(Checkpoint { header, arrays })
    }

    /// Optimizer-state arrays with the given prefix stripped.
    pub fn opt_state(&self, prefix: &str) -> BTreeMap<String, ArrayD<f64>> {
        self.arrays
            .iter()
            .filter(|(_, (k, _))| *k == ArrayKind::OptState)
            .filter_map(|(name, (_, a))| {
                name.strip_prefix(prefix)
                    .map(|rest| (rest.to_string(), a.clone()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Teacher;

    fn tiny_config() -> ModelConfig {
        let mut mc = ModelConfig::new(3).with_width(1.0 / 16.0);
        mc.num_input_frames = 2;
        mc
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mc = tiny_config();
        let teacher = Teacher::init(&mc, 7).unwrap();
        let header = CheckpointHeader {
            schema_version: 1,
            kind: ModelKind::Teacher,
            model_config: mc.clone(),
            out_channels: mc.num_classes,
            step: 123,
            seed: 7,
            train_config: None,
        };
        let ckpt = Checkpoint::from_model(header, &teacher);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        ckpt.save(&p1).unwrap();

        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded.header.step, 123);
        for (name, (kind, arr)) in &ckpt.arrays {
            let (k2, a2) = &loaded.arrays[name];
            assert_eq!(kind, k2);
            assert_eq!(arr, a2, "array {name} changed in roundtrip");
        }

        // save -> load -> save must produce identical bytes
        let p2 = dir.path().join("b.ckpt");
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn load_into_restores_model() {
        let mc = tiny_config();
        let teacher = Teacher::init(&mc, 7).unwrap();
        let header = CheckpointHeader {
            schema_version: 1,
            kind: ModelKind::Teacher,
            model_config: mc.clone(),
            out_channels: mc.num_classes,
            step: 0,
            seed: 7,
            train_config: None,
        };
        let ckpt = Checkpoint::from_model(header, &teacher);
        let mut other = Teacher::init(&mc, 999).unwrap();
        ckpt.load_into(&mut other).unwrap();
        let reread = Checkpoint::from_model(ckpt.header.clone(), &other);
        for (name, (_, arr)) in &ckpt.arrays {
            assert_eq!(arr, &reread.arrays[name].1, "array {name} not restored");
        }
    }

    #[test]
    fn mismatched_architecture_rejected() {
        let mc = tiny_config();
        let teacher = Teacher::init(&mc, 7).unwrap();
        let header = CheckpointHeader {
            schema_version: 1,
            kind: ModelKind::Teacher,
            model_config: mc.clone(),
            out_channels: mc.num_classes,
            step: 0,
            seed: 7,
            train_config: None,
        };
        let ckpt = Checkpoint::from_model(header, &teacher);
        let wider = ModelConfig::new(3).with_width(0.125);
        let mut other = Teacher::init(&wider, 1).unwrap();
        assert!(ckpt.load_into(&mut other).is_err());
    }
}
