//! On-disk datasets: one container per split plus `manifest.json`.

use std::path::{Path, PathBuf};

use mome_core::exec::Executor;
use mome_core::synthdata::{generate_split, Sample, Split, SynthSpec};
use mome_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::DataSizes;
use crate::container::{sha256_hex, Container};
use crate::error::{self, LabError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub name: String,
    pub file: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SynthSpec,
    pub splits: Vec<SplitEntry>,
}

impl Manifest {
    pub fn entry(&self, split: Split) -> Option<&SplitEntry> {
        self.splits.iter().find(|e| e.name == split.as_str())
    }
}

pub fn encode_split(split: Split, spec: &SynthSpec, samples: &[Sample]) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(3 * samples.len());
    for (k, s) in samples.iter().enumerate() {
        let y = s.target.iter().map(|&v| v as f64).collect();
        tensors.push((format!("{k}.target"), Tensor::vector(y)));
        tensors.push((format!("{k}.audio"), s.audio.clone()));
        tensors.push((format!("{k}.video"), s.video.clone()));
    }
    Container {
        meta: serde_json::json!({
            "split": split.as_str(),
            "count": samples.len(),
            "spec": spec,
        }),
        tensors,
    }
    .encode()
}

pub fn decode_split(path: &Path, bytes: &[u8]) -> Result<Vec<Sample>> {
    let c = Container::decode(bytes).map_err(|e| LabError::integrity(path, e.to_string()))?;
    if c.tensors.len() % 3 != 0 {
        return Err(LabError::integrity(path, "split holds an incomplete sample"));
    }
    c.tensors
        .chunks_exact(3)
        .enumerate()
        .map(|(k, t)| {
            let want = [format!("{k}.target"), format!("{k}.audio"), format!("{k}.video")];
            if t.iter().map(|(n, _)| n).ne(want.iter()) {
                return Err(LabError::integrity(path, format!("sample {k} is out of order")));
            }
            let target = t[0].1.data().iter().map(|&v| v as usize).collect();
            Ok(Sample {
                target,
                audio: t[1].1.clone(),
                video: t[2].1.clone(),
            })
        })
        .collect()
}

/// Generates and writes all three splits into `dir`.
pub fn write_dataset(dir: &Path, spec: &SynthSpec, sizes: &DataSizes, exec: &impl Executor) -> Result<Manifest> {
    let mut splits = Vec::new();
    for (split, count) in [(Split::Train, sizes.train), (Split::Val, sizes.val), (Split::Test, sizes.test)] {
        let samples = generate_split(spec, split, count, exec)?;
        let bytes = encode_split(split, spec, &samples);
        let file = format!("{}.bin", split.as_str());
        error::write(&dir.join(&file), &bytes)?;
        splits.push(SplitEntry {
            name: split.as_str().into(),
            file,
            count,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format_version: 1,
        spec: spec.clone(),
        splits,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    error::write(&dir.join(MANIFEST), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = error::read(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| LabError::integrity(&path, e.to_string()))
}

/// Loads one split, verifying its checksum and that it was generated from
/// `spec`.
pub fn read_split(dir: &Path, split: Split, spec: &SynthSpec) -> Result<Vec<Sample>> {
    let manifest = read_manifest(dir)?;
    let mpath = dir.join(MANIFEST);
    if &manifest.spec != spec {
        return Err(LabError::integrity(&mpath, "dataset was generated from a different synth spec"));
    }
    let entry = manifest
        .entry(split)
        .ok_or_else(|| LabError::integrity(&mpath, format!("no {} split listed", split.as_str())))?;
    let path: PathBuf = dir.join(&entry.file);
    let bytes = error::read(&path)?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(LabError::integrity(&path, "checksum differs from manifest"));
    }
    let samples = decode_split(&path, &bytes)?;
    if samples.len() != entry.count {
        return Err(LabError::integrity(&path, "sample count differs from manifest"));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mome_core::exec::Sequential;

    #[test]
    fn regeneration_is_byte_identical() {
        let spec = SynthSpec::default();
        let sizes = DataSizes { train: 4, val: 2, test: 3 };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = write_dataset(a.path(), &spec, &sizes, &Sequential).unwrap();
        let mb = write_dataset(b.path(), &spec, &sizes, &Sequential).unwrap();
        assert_eq!(ma, mb);
        for f in ["train.bin", "val.bin", "test.bin", MANIFEST] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        let test = read_split(a.path(), Split::Test, &spec).unwrap();
        assert_eq!(test, generate_split(&spec, Split::Test, 3, &Sequential).unwrap());
        assert_eq!(ma.entry(Split::Val).unwrap().count, 2);
    }

    #[test]
    fn tampering_and_spec_drift_are_caught() {
        let spec = SynthSpec::default();
        let sizes = DataSizes { train: 2, val: 1, test: 1 };
        let d = tempfile::tempdir().unwrap();
        write_dataset(d.path(), &spec, &sizes, &Sequential).unwrap();
        let other = SynthSpec { noise_sigma: 0.0, ..spec.clone() };
        assert!(read_split(d.path(), Split::Train, &other).is_err());
        let p = d.path().join("val.bin");
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[20] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(read_split(d.path(), Split::Val, &spec).unwrap_err().exit_code(), 5);
    }
}
