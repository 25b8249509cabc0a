use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::{load_clip, CineClip, ClipMeta, MaskClip, SlicePosition, View};
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidParams(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Clip path, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub meta: ClipMeta,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Distinct scan ids in first-appearance order.
    pub fn scan_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.meta.scan_id.clone()))
            .map(|e| e.meta.scan_id.clone())
            .collect()
    }

    pub fn select(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn filter_views(&self, views: &[View]) -> Manifest {
        Manifest {
            entries: self.entries.iter().filter(|e| views.contains(&e.meta.view)).cloned().collect(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.path.display(),
                e.meta.scan_id,
                e.meta.view,
                e.meta.slice_position,
                e.meta.ed_index,
                e.meta.es_index,
                e.split
            ));
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::InvalidParams(format!("manifest line {}: {what}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(bad(&format!("expected 7 tab-separated fields, found {}", fields.len())));
            }
            let index = |s: &str, name: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad {name} {s:?}")));
            entries.push(ManifestEntry {
                path: PathBuf::from(fields[0]),
                meta: ClipMeta {
                    scan_id: fields[1].to_string(),
                    view: fields[2].parse()?,
                    slice_position: fields[3].parse::<SlicePosition>()?,
                    ed_index: index(fields[4], "ed")?,
                    es_index: index(fields[5], "es")?,
                },
                split: fields[6].parse()?,
            });
        }
        Ok(Self { entries })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        fs::write(&path, self.to_tsv()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads `manifest.tsv` from a dataset directory (or a manifest file path).
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        Self::parse_tsv(&text)
    }

    pub fn resolve(root: &Path, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            root.join(&entry.path)
        }
    }

    /// Loads one entry, taking the scan id from the manifest and checking that
    /// the container header agrees with the listed metadata.
    pub fn load_entry(root: &Path, entry: &ManifestEntry) -> Result<(CineClip, MaskClip)> {
        let path = Self::resolve(root, entry);
        let (mut clip, mask) = load_clip(&path)?;
        clip.meta.scan_id = entry.meta.scan_id.clone();
        if clip.meta != entry.meta {
            return Err(Error::InvalidParams(format!(
                "{}: container metadata {:?} disagrees with manifest {:?}",
                path.display(),
                clip.meta,
                entry.meta
            )));
        }
        Ok((clip, mask))
    }

    /// Checks that every path parses and no scan straddles splits.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut splits: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            if let Some(prev) = splits.insert(&e.meta.scan_id, e.split) {
                if prev != e.split {
                    return Err(Error::InvalidParams(format!("scan {:?} appears in both splits", e.meta.scan_id)));
                }
            }
            Self::load_entry(root, e)?;
        }
        Ok(())
    }
}

/// Shuffles the distinct scan ids with `seed` and assigns the first
/// `round(train_fraction * n)` (kept within `[1, n-1]`) to train.
pub fn split_manifest(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<Manifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidParams(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut ids = manifest.scan_ids();
    if ids.len() < 2 {
        return Err(Error::InvalidParams(format!("cannot split {} scan(s) into train and test", ids.len())));
    }
    ids.sort();
    ids.shuffle(&mut rng::stream(seed, &[rng::tag("split")]));
    let n = ids.len();
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let train: BTreeSet<&String> = ids[..n_train].iter().collect();
    Ok(Manifest {
        entries: manifest
            .entries
            .iter()
            .map(|e| ManifestEntry {
                split: if train.contains(&e.meta.scan_id) { Split::Train } else { Split::Test },
                ..e.clone()
            })
            .collect(),
    })
}
