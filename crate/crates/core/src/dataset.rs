//! JSON dataset manifests and the salient-frame mask sidecar.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::{read_bag_checked, FrameBag};

/// Sidecar written next to a synthetic manifest.
pub const MASKS_FILE: &str = "salient_masks.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub d: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub class_names: Vec<String>,
    pub fine_descriptors: Vec<String>,
    pub bags: Vec<BagEntry>,
}

impl DatasetManifest {
    /// Structural checks that do not touch the bag files.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Manifest(msg));
        if self.d == 0 || self.classes == 0 {
            return bad("d and C must be positive".into());
        }
        if self.class_names.len() != self.classes {
            return bad(format!(
                "{} class names for C = {}",
                self.class_names.len(),
                self.classes
            ));
        }
        if self.fine_descriptors.len() != self.classes {
            return bad(format!(
                "{} fine descriptors for C = {}",
                self.fine_descriptors.len(),
                self.classes
            ));
        }
        let mut seen = HashSet::new();
        for name in &self.class_names {
            if !seen.insert(name) {
                return bad(format!("duplicate class name `{name}`"));
            }
        }
        let mut paths: BTreeMap<&str, Split> = BTreeMap::new();
        for entry in &self.bags {
            if let Some(prev) = paths.insert(&entry.path, entry.split) {
                if prev != entry.split {
                    return bad(format!("`{}` appears in both splits", entry.path));
                }
                return bad(format!("`{}` listed twice", entry.path));
            }
        }
        Ok(())
    }
}

/// A validated manifest with every bag loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    /// SHA-256 of the manifest file bytes.
    pub hash: String,
    pub train: Vec<FrameBag>,
    pub test: Vec<FrameBag>,
}

impl Dataset {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        manifest.validate()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut ids = HashSet::new();
        for entry in &manifest.bags {
            let bag_path = resolve(&root, &entry.path);
            let bag = read_bag_checked(&bag_path, manifest.d, manifest.classes)?;
            if !ids.insert(bag.bag_id.clone()) {
                return Err(Error::Manifest(format!("duplicate bag id `{}`", bag.bag_id)));
            }
            match entry.split {
                Split::Train => train.push(bag),
                Split::Test => test.push(bag),
            }
        }
        Ok(Self {
            manifest,
            root,
            hash: hex::encode(Sha256::digest(&bytes)),
            train,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &[FrameBag] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn dim(&self) -> usize {
        self.manifest.d
    }

    pub fn classes(&self) -> usize {
        self.manifest.classes
    }

    /// Salient masks from the sidecar next to the manifest.
    pub fn masks(&self) -> Result<SalientMasks> {
        SalientMasks::read(self.root.join(MASKS_FILE))
    }
}

fn resolve(root: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Ground-truth salient frames per bag id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SalientMasks {
    pub masks: BTreeMap<String, Vec<bool>>,
}

impl SalientMasks {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingMasks(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, bag_id: &str) -> Result<&[bool]> {
        self.masks
            .get(bag_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingMasks(format!("no mask for bag `{bag_id}`")))
    }
}
