//! Dataset directories, phantom dataset generation and subject-level splits.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::brats::{load_subject, write_brats_subject};
use super::phantom::{generate_phantom, PhantomSpec};
use super::MultimodalVolume;
use crate::error::{Error, Result};
use crate::par;

pub const MANIFEST_FILE: &str = "manifest.json";
/// Per-subject sidecar holding the generating spec.
pub const PHANTOM_SIDECAR: &str = "phantom_spec.json";

const MANIFEST_FORMAT: &str = "dcseg_dataset_v1";

/// Index of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub modality_count: usize,
    /// Subject directory names, in load order.
    pub subjects: Vec<String>,
    /// Spec of the first phantom; later phantoms differ only in seed.
    pub phantom: Option<PhantomSpec>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `count` phantoms with seeds `spec.seed, spec.seed + 1, ...` under
/// `out_dir`, each in its own BraTS-layout directory with a sidecar.
pub fn generate_phantom_dataset(out_dir: impl AsRef<Path>, spec: &PhantomSpec, count: usize) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let written = par::map_range(count, |i| -> Result<String> {
        let s = spec.with_seed(spec.seed.wrapping_add(i as u64));
        let subject = generate_phantom(&s)?;
        let dir = out_dir.join(&subject.subject_id);
        write_brats_subject(&dir, &subject)?;
        write_json(&dir.join(PHANTOM_SIDECAR), &s)?;
        Ok(subject.subject_id)
    });
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        modality_count: spec.modality_count,
        subjects: written.into_iter().collect::<Result<_>>()?,
        phantom: Some(spec.clone()),
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads every subject of a dataset directory.
///
/// With a manifest the listed subjects are loaded in order; without one every
/// subdirectory is read as a four-modality BraTS subject, sorted by name.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<MultimodalVolume>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let (modality_count, subjects) = if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::contract(format!("unknown dataset format `{}`", m.format)));
        }
        (m.modality_count, m.subjects)
    } else {
        let mut names = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            if entry.path().is_dir() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        (4, names)
    };
    par::map_slice(&subjects, |name| load_subject(dir.join(name), modality_count))
        .into_iter()
        .collect()
}

/// First eight bytes of the SHA-256 digest of `subject_id`, big-endian.
pub fn subject_hash(subject_id: &str) -> u64 {
    let digest = Sha256::digest(subject_id.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Splits subjects into `(train, eval)` by hashing their ids.
///
/// A subject is held out when its hash, read as a fraction of `2^64`, falls
/// below `eval_fraction`. Membership depends on the id alone.
pub fn split_by_subject(
    subjects: Vec<MultimodalVolume>,
    eval_fraction: f64,
) -> (Vec<MultimodalVolume>, Vec<MultimodalVolume>) {
    let threshold = eval_fraction.clamp(0.0, 1.0) * 2f64.powi(64);
    subjects
        .into_iter()
        .partition(|s| (subject_hash(&s.subject_id) as f64) >= threshold)
}
