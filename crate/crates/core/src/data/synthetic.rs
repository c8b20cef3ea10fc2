//! Synthetic dataset directory: `manifest.json` plus `images.bin` (and
//! optionally `softlabels.bin`), little-endian `f32`, record-major, CHW.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumPlan;
use crate::error::{Error, Result};
use crate::io::{f32_blob, parse_f32_blob, read_json, sha256_hex, write_json};
use crate::tensor::Tensor;

pub const SYNTHETIC_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const IMAGES: &str = "images.bin";
const SOFT_LABELS: &str = "softlabels.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRecord {
    /// `C x H x W`, raw pixel range.
    pub image: Vec<f32>,
    pub label: usize,
    /// Index of the original image the record was initialized from.
    pub seed_index: Option<usize>,
    /// 1-based curriculum that produced the record.
    pub curriculum_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub dataset_id: String,
    pub ipc: usize,
    pub class_count: usize,
    pub image_shape: [usize; 3],
    pub curricula: CurriculumPlan,
    pub records: Vec<SyntheticRecord>,
    /// Optional teacher soft labels, `class_count` values per record.
    pub soft_labels: Option<Vec<Vec<f32>>>,
}

impl SyntheticDataset {
    /// Checks the per-class budget and seed provenance invariants.
    pub fn validate(&self) -> Result<()> {
        if self.records.len() != self.ipc * self.class_count {
            return Err(Error::Format(format!(
                "{} records but ipc {} x {} classes",
                self.records.len(),
                self.ipc,
                self.class_count
            )));
        }
        let pixels: usize = self.image_shape.iter().product();
        let mut per_class = vec![0usize; self.class_count];
        let mut seeds = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.label >= self.class_count {
                return Err(Error::Format(format!("record {i} label {} out of range", r.label)));
            }
            if r.image.len() != pixels {
                return Err(Error::Format(format!("record {i} has {} pixels, expected {pixels}", r.image.len())));
            }
            if r.curriculum_index == 0 {
                return Err(Error::Format(format!("record {i} has curriculum index 0")));
            }
            if let Some(s) = r.seed_index {
                if !seeds.insert(s) {
                    return Err(Error::Format(format!("seed index {s} used twice")));
                }
            }
            per_class[r.label] += 1;
        }
        if let Some((c, &n)) = per_class.iter().enumerate().find(|(_, &n)| n != self.ipc) {
            return Err(Error::Format(format!("class {c} has {n} records, expected {}", self.ipc)));
        }
        if let Some(soft) = &self.soft_labels {
            if soft.len() != self.records.len() || soft.iter().any(|s| s.len() != self.class_count) {
                return Err(Error::Format("soft labels do not match records".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn images(&self) -> Tensor<f32> {
        let slices: Vec<&[f32]> = self.records.iter().map(|r| r.image.as_slice()).collect();
        Tensor::stack(&slices, &self.image_shape).expect("validated record shapes")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Records of curricula `1..=j`.
    pub fn through_curriculum(&self, j: usize) -> Vec<&SyntheticRecord> {
        self.records.iter().filter(|r| r.curriculum_index <= j).collect()
    }

    pub fn per_class_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.label).or_default() += 1;
        }
        m
    }

    /// SHA-256 of the serialized image blob.
    pub fn image_hash(&self) -> String {
        sha256_hex(&f32_blob(self.images().data()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    label: usize,
    seed_index: Option<usize>,
    curriculum_index: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dataset_id: String,
    ipc: usize,
    class_count: usize,
    image_shape: [usize; 3],
    curricula: CurriculumPlan,
    images_file: String,
    images_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    softlabels_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    softlabels_sha256: Option<String>,
    records: Vec<ManifestRecord>,
}

/// Writes the dataset into `dir` (created if needed); returns the manifest path.
pub fn save_synthetic(sds: &SyntheticDataset, dir: &Path) -> Result<PathBuf> {
    sds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pixels: usize = sds.image_shape.iter().product();
    let mut values = Vec::with_capacity(sds.records.len() * pixels);
    let mut records = Vec::with_capacity(sds.records.len());
    for (i, r) in sds.records.iter().enumerate() {
        values.extend_from_slice(&r.image);
        records.push(ManifestRecord {
            label: r.label,
            seed_index: r.seed_index,
            curriculum_index: r.curriculum_index,
            offset: i * pixels * 4,
        });
    }
    let blob = f32_blob(&values);
    let images_path = dir.join(IMAGES);
    fs::write(&images_path, &blob).map_err(|e| Error::io(&images_path, e))?;
    let (softlabels_file, softlabels_sha256) = match &sds.soft_labels {
        Some(soft) => {
            let flat: Vec<f32> = soft.iter().flatten().copied().collect();
            let sblob = f32_blob(&flat);
            let p = dir.join(SOFT_LABELS);
            fs::write(&p, &sblob).map_err(|e| Error::io(&p, e))?;
            (Some(SOFT_LABELS.to_string()), Some(sha256_hex(&sblob)))
        }
        None => {
            // Stale soft labels from an earlier save would be orphaned.
            let _ = fs::remove_file(dir.join(SOFT_LABELS));
            (None, None)
        }
    };
    let manifest = Manifest {
        format_version: SYNTHETIC_VERSION,
        dataset_id: sds.dataset_id.clone(),
        ipc: sds.ipc,
        class_count: sds.class_count,
        image_shape: sds.image_shape,
        curricula: sds.curricula.clone(),
        images_file: IMAGES.into(),
        images_sha256: sha256_hex(&blob),
        softlabels_file,
        softlabels_sha256,
        records,
    };
    let path = dir.join(MANIFEST);
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn load_synthetic(dir: &Path) -> Result<SyntheticDataset> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    if manifest.format_version != SYNTHETIC_VERSION {
        return Err(Error::Format(format!("unsupported synthetic format version {}", manifest.format_version)));
    }
    if manifest.records.len() != manifest.ipc * manifest.class_count {
        return Err(Error::Format(format!(
            "manifest lists {} records, expected ipc {} x {} classes",
            manifest.records.len(),
            manifest.ipc,
            manifest.class_count
        )));
    }
    let images_path = dir.join(&manifest.images_file);
    let blob = fs::read(&images_path).map_err(|e| Error::io(&images_path, e))?;
    if sha256_hex(&blob) != manifest.images_sha256 {
        return Err(Error::Corruption(format!("{} checksum mismatch", images_path.display())));
    }
    let values = parse_f32_blob(&blob)?;
    let pixels: usize = manifest.image_shape.iter().product();
    if values.len() != manifest.records.len() * pixels {
        return Err(Error::Format("image blob size does not match manifest".into()));
    }
    let mut records = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        if r.offset % 4 != 0 || r.offset / 4 + pixels > values.len() {
            return Err(Error::Format(format!("record offset {} out of range", r.offset)));
        }
        let start = r.offset / 4;
        records.push(SyntheticRecord {
            image: values[start..start + pixels].to_vec(),
            label: r.label,
            seed_index: r.seed_index,
            curriculum_index: r.curriculum_index,
        });
    }
    let soft_labels = match (&manifest.softlabels_file, &manifest.softlabels_sha256) {
        (Some(file), Some(hash)) => {
            let p = dir.join(file);
            let sblob = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if &sha256_hex(&sblob) != hash {
                return Err(Error::Corruption(format!("{} checksum mismatch", p.display())));
            }
            let flat = parse_f32_blob(&sblob)?;
            if flat.len() != records.len() * manifest.class_count {
                return Err(Error::Format("soft label blob size does not match manifest".into()));
            }
            Some(flat.chunks(manifest.class_count).map(|c| c.to_vec()).collect())
        }
        (None, None) => None,
        _ => return Err(Error::Format("soft label file and checksum must appear together".into())),
    };
    let sds = SyntheticDataset {
        dataset_id: manifest.dataset_id,
        ipc: manifest.ipc,
        class_count: manifest.class_count,
        image_shape: manifest.image_shape,
        curricula: manifest.curricula,
        records,
        soft_labels,
    };
    sds.validate()?;
    Ok(sds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(ipc: usize, classes: usize, salt: f32) -> SyntheticDataset {
        let mut records = Vec::new();
        for c in 0..classes {
            for k in 0..ipc {
                let i = c * ipc + k;
                records.push(SyntheticRecord {
                    image: (0..12).map(|p| ((p + i) as f32 * 0.37 + salt).fract()).collect(),
                    label: c,
                    seed_index: if k == 0 { None } else { Some(i * 3) },
                    curriculum_index: 1 + k % 2,
                });
            }
        }
        SyntheticDataset {
            dataset_id: "toy2".into(),
            ipc,
            class_count: classes,
            image_shape: [3, 2, 2],
            curricula: CurriculumPlan::logarithmic(ipc).unwrap(),
            records,
            soft_labels: None,
        }
    }

    #[test]
    fn round_trip_twenty_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut sds = sample(10, 2, 0.1);
        sds.soft_labels = Some(vec![vec![0.25, 0.75]; 20]);
        save_synthetic(&sds, dir.path()).unwrap();
        let back = load_synthetic(dir.path()).unwrap();
        assert_eq!(back, sds);
        assert_eq!(back.image_hash(), sds.image_hash());
    }

    #[test]
    fn record_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_synthetic(&sample(2, 2, 0.0), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut m: serde_json::Value = read_json(&path).unwrap();
        m["ipc"] = serde_json::json!(3);
        write_json(&path, &m).unwrap();
        assert!(matches!(load_synthetic(dir.path()), Err(Error::Format(_))));

        let mut bad = sample(2, 2, 0.0);
        bad.records.pop();
        assert!(save_synthetic(&bad, dir.path()).is_err());
    }

    #[test]
    fn truncated_blob_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        save_synthetic(&sample(2, 2, 0.0), dir.path()).unwrap();
        let p = dir.path().join(IMAGES);
        let mut blob = fs::read(&p).unwrap();
        blob.pop();
        fs::write(&p, blob).unwrap();
        assert!(matches!(load_synthetic(dir.path()), Err(Error::Corruption(_))));
    }

    #[test]
    fn duplicate_seed_is_rejected() {
        let mut sds = sample(3, 2, 0.0);
        sds.records[2].seed_index = sds.records[1].seed_index;
        assert!(sds.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn persistence_is_bit_exact(ipc in 1usize..6, classes in 2usize..5, pixels in proptest::collection::vec(0f32..=1.0, 12)) {
            let mut sds = sample(ipc, classes, 0.0);
            for (k, r) in sds.records.iter_mut().enumerate() {
                for (p, v) in r.image.iter_mut().enumerate() {
                    *v = pixels[(p + k) % pixels.len()];
                }
            }
            let dir = tempfile::tempdir().unwrap();
            save_synthetic(&sds, dir.path()).unwrap();
            let back = load_synthetic(dir.path()).unwrap();
            for (a, b) in back.records.iter().zip(&sds.records) {
                let same = a.image.iter().zip(&b.image).all(|(x, y)| x.to_bits() == y.to_bits());
                prop_assert!(same);
            }
            prop_assert_eq!(back, sds);
        }
    }
}
