//! Dataset manifests: a JSON index of volume/surface files with splits,
//! tags, optional injected displacements and payload digests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OctError, Result};
use crate::io::{payload_path, read_json, read_surfaces, read_volume, write_json, write_surfaces, write_volume};
use crate::synth::{generate_phantom, PhantomSpec};
use crate::types::{DisplacementVector, OctVolume, SurfaceSet};

pub const MANIFEST_FORMAT: &str = "octsurf-dataset-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub split: Split,
    /// Free-form tag such as `normal` or `amd`.
    #[serde(default)]
    pub tag: Option<String>,
    /// Volume header, relative to the manifest directory.
    pub volume: PathBuf,
    /// Surface header in the frame of the volume, relative to the manifest.
    pub truth: PathBuf,
    /// Known misalignment, when the case is synthetic.
    #[serde(default)]
    pub injected: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    #[serde(default)]
    pub generator: Option<PhantomSpec>,
    pub cases: Vec<CaseEntry>,
}

#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub split: Split,
    pub tag: Option<String>,
    pub volume: OctVolume,
    pub truth: SurfaceSet,
    pub injected: Option<DisplacementVector>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let m: Manifest = read_json(path)?;
        if m.format != MANIFEST_FORMAT {
            return Err(OctError::format(path, format!("expected format {MANIFEST_FORMAT}, found {}", m.format)));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load_case(&self, root: &Path, entry: &CaseEntry) -> Result<Case> {
        let volume = read_volume(&root.join(&entry.volume))?;
        let truth = read_surfaces(&root.join(&entry.truth))?;
        if truth.n_b() != volume.n_b() || truth.n_a() != volume.n_a() {
            return Err(OctError::Shape(format!(
                "case {}: surfaces are {}x{}, volume is {}x{}",
                entry.id,
                truth.n_b(),
                truth.n_a(),
                volume.n_b(),
                volume.n_a()
            )));
        }
        let injected = entry.injected.clone().map(DisplacementVector::new).transpose()?;
        Ok(Case { id: entry.id.clone(), split: entry.split, tag: entry.tag.clone(), volume, truth, injected })
    }
}

/// Loads every case of a manifest, optionally restricted to one split.
pub fn load_cases(manifest_path: &Path, split: Option<Split>) -> Result<Vec<Case>> {
    let m = Manifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    m.cases
        .iter()
        .filter(|c| split.is_none_or(|s| s == c.split))
        .map(|c| m.load_case(root, c))
        .collect()
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| OctError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// SHA-256 of a manifest file.
pub fn manifest_digest(path: &Path) -> Result<String> {
    file_digest(path)
}

/// Generates `n_train + n_test` phantoms under `out_dir` and writes
/// `manifest.json`. Truth is stored in the acquired (misaligned) frame.
pub fn make_dataset(spec: &PhantomSpec, n_train: usize, n_test: usize, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let mut cases = Vec::with_capacity(n_train + n_test);
    for i in 0..n_train + n_test {
        let sample = spec.for_sample(i as u64);
        let mut p = generate_phantom(&sample)?;
        let id = format!("case_{i:04}");
        p.volume.set_id(&id);
        let vol_rel = PathBuf::from("volumes").join(format!("{id}.json"));
        let truth_rel = PathBuf::from("truth").join(format!("{id}.json"));
        write_volume(&out_dir.join(&vol_rel), &p.volume)?;
        write_surfaces(&out_dir.join(&truth_rel), &p.acquired_truth())?;
        let digest = file_digest(&payload_path(&out_dir.join(&vol_rel)))?;
        cases.push(CaseEntry {
            id,
            split: if i < n_train { Split::Train } else { Split::Test },
            tag: Some(if p.drusen > 0 { "amd" } else { "normal" }.into()),
            volume: vol_rel,
            truth: truth_rel,
            injected: Some(p.injected.values().to_vec()),
            seed: Some(sample.seed),
            sha256: Some(digest),
        });
    }
    let manifest = Manifest { format: MANIFEST_FORMAT.into(), generator: Some(spec.clone()), cases };
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec { shape: [32, 4, 48], shift_range: 3.0, amplitude: 2.0, seed: 9, ..PhantomSpec::default() }
    }

    #[test]
    fn same_seed_gives_identical_manifests() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        make_dataset(&small(), 2, 1, d1.path()).unwrap();
        make_dataset(&small(), 2, 1, d2.path()).unwrap();
        let h1 = manifest_digest(&d1.path().join("manifest.json")).unwrap();
        let h2 = manifest_digest(&d2.path().join("manifest.json")).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn roundtrip_cases_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_dataset(&small(), 2, 1, dir.path()).unwrap();
        assert_eq!(m.cases.len(), 3);
        let path = dir.path().join("manifest.json");
        let train = load_cases(&path, Some(Split::Train)).unwrap();
        let test = load_cases(&path, Some(Split::Test)).unwrap();
        assert_eq!((train.len(), test.len()), (2, 1));
        let c = &test[0];
        let p = generate_phantom(&small().for_sample(2)).unwrap();
        let expected = p.acquired_truth();
        for (x, y) in c.truth.positions().iter().zip(expected.positions()) {
            assert!((x - y).abs() < 1e-4);
        }
        for (x, y) in c.injected.as_ref().unwrap().values().iter().zip(p.injected.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
