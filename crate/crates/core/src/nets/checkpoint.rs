//! Checkpoint file: magic, length-prefixed JSON header, then a little-endian
//! `f32` blob holding parameters in slot order followed by each BN layer's
//! running mean and std.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{f32_blob, parse_f32_blob, sha256_hex};
use crate::nets::model::{Arch, Model, Normalization};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"CUDDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch_id: String,
    class_count: usize,
    input_shape: [usize; 3],
    normalization: Normalization,
    param_shapes: Vec<usize>,
    bn_channels: Vec<usize>,
    blob_sha256: String,
    #[serde(default)]
    train_meta: serde_json::Value,
}

impl<T: Scalar> Model<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut values = Vec::with_capacity(self.param_count());
        let mut param_shapes = Vec::new();
        self.visit_params(&mut |_, p| {
            param_shapes.push(p.len());
            values.extend(p.iter().map(|v| v.as_f64() as f32));
        });
        let mut bn_channels = Vec::new();
        for stats in self.bn_running() {
            bn_channels.push(stats.channels());
            values.extend(stats.mean.iter().map(|v| v.as_f64() as f32));
            values.extend(stats.std.iter().map(|v| v.as_f64() as f32));
        }
        let blob = f32_blob(&values);
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            arch_id: self.arch_id(),
            class_count: self.class_count,
            input_shape: self.input_shape,
            normalization: self.normalization.clone(),
            param_shapes,
            bn_channels,
            blob_sha256: sha256_hex(&blob),
            train_meta: self.train_meta.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(Error::Corruption("checkpoint header truncated".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", header.format_version)));
        }
        let blob = &body[hlen..];
        if sha256_hex(blob) != header.blob_sha256 {
            return Err(Error::Corruption("checkpoint blob checksum mismatch".into()));
        }
        let arch: Arch = header.arch_id.parse()?;
        let mut model = Model::<T>::new(arch, header.class_count, header.input_shape, 0)?;
        let mut expected_shapes = Vec::new();
        model.visit_params(&mut |_, p| expected_shapes.push(p.len()));
        let channels: Vec<usize> = model.bn_running().iter().map(|s| s.channels()).collect();
        if expected_shapes != header.param_shapes || channels != header.bn_channels {
            return Err(Error::Format("checkpoint shapes do not match architecture".into()));
        }
        let values = parse_f32_blob(blob)?;
        let total = expected_shapes.iter().sum::<usize>() + 2 * channels.iter().sum::<usize>();
        if values.len() != total {
            return Err(Error::Format(format!("checkpoint blob has {} values, expected {total}", values.len())));
        }
        let mut at = 0;
        model.visit_params_mut(&mut |_, p| {
            for v in p.iter_mut() {
                *v = T::of(values[at] as f64);
                at += 1;
            }
        });
        for bn in model.bn_layers_mut() {
            for v in bn.running.mean.iter_mut() {
                *v = T::of(values[at] as f64);
                at += 1;
            }
            for v in bn.running.std.iter_mut() {
                *v = T::of(values[at] as f64);
                at += 1;
            }
            if bn.running.std.iter().any(|&s| s <= T::zero()) {
                return Err(Error::Corruption("non-positive BN running std".into()));
            }
        }
        model.set_normalization(header.normalization)?;
        model.train_meta = header.train_meta;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use crate::nets::build_model;
    use crate::nets::Model;

    #[test]
    fn checkpoint_round_trip_is_exact_for_f32() {
        let mut m: Model<f32> = build_model("resnet18-cifar-w4", 3, [3, 8, 8], 5).unwrap();
        for bn in m.bn_layers_mut() {
            bn.running.mean[0] = 0.25;
            bn.running.std[0] = 2.5;
        }
        m.train_meta = serde_json::json!({"stage": "teacher"});
        let back = Model::<f32>::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), m.to_bytes());
        assert_eq!(back.bn_running(), m.bn_running());
    }

    #[test]
    fn corrupt_blob_is_detected() {
        let m: Model<f32> = build_model("convnet-1-w2", 2, [1, 4, 4], 0).unwrap();
        let mut bytes = m.to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(Model::<f32>::from_bytes(&bytes), Err(crate::Error::Corruption(_))));
        bytes.truncate(last);
        assert!(Model::<f32>::from_bytes(&bytes).is_err());
    }
}
