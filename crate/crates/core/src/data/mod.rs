//! Re-identification datasets: manifests, directory scanning, image loading,
//! batching and a synthetic identity generator.

mod batches;
mod synthetic;

pub use batches::{load_image, load_images, make_batches, BatchConfig, BatchIter};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Market-1501 subdirectory names.
pub const TRAIN_DIR: &str = "bounding_box_train";
pub const QUERY_DIR: &str = "query";
pub const GALLERY_DIR: &str = "bounding_box_test";

/// Identity value marking a distractor image.
pub const DISTRACTOR_PID: i64 = -1;

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

/// Filename conventions understood by the scanner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Naming {
    /// `<pid>_c<cam>...`, e.g. `0002_c1s1_000451_03.jpg`; pid −1 is a distractor.
    MarketStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    /// Dense label in `[0, M)` for train entries, the original identity otherwise.
    pub pid: i64,
    pub camid: u32,
    pub split: Split,
}

impl ManifestEntry {
    pub fn is_distractor(&self) -> bool {
        self.pid == DISTRACTOR_PID
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    /// Distinct non-distractor identities.
    pub num_identities: usize,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<i64> {
        self.entries.iter().map(|e| e.pid).collect()
    }

    pub fn cameras(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.camid).collect()
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.entries.iter().map(|e| e.path.clone()).collect()
    }

    fn from_entries(split: Split, entries: Vec<ManifestEntry>) -> Self {
        let num_identities = entries
            .iter()
            .filter(|e| !e.is_distractor())
            .map(|e| e.pid)
            .collect::<BTreeSet<_>>()
            .len();
        Self {
            split,
            entries,
            num_identities,
        }
    }
}

/// Train, query and gallery manifests of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidDataset {
    pub train: DatasetManifest,
    pub query: DatasetManifest,
    pub gallery: DatasetManifest,
}

impl ReidDataset {
    pub fn num_train_identities(&self) -> usize {
        self.train.num_identities
    }

    /// Writes all entries as JSON lines: `{path, pid, camid, split}`.
    /// Paths under the manifest's directory are stored relative to it.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in self
            .train
            .entries
            .iter()
            .chain(&self.query.entries)
            .chain(&self.gallery.entries)
        {
            let mut e = e.clone();
            if let Ok(rel) = e.path.strip_prefix(base) {
                e.path = rel.to_path_buf();
            }
            serde_json::to_writer(&mut w, &e)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(""));
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut parts = [Vec::new(), Vec::new(), Vec::new()];
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut entry: ManifestEntry = serde_json::from_str(&line)?;
            if entry.path.is_relative() {
                entry.path = base.join(&entry.path);
            }
            let slot = match entry.split {
                Split::Train => 0,
                Split::Query => 1,
                Split::Gallery => 2,
            };
            parts[slot].push(entry);
        }
        let [train, query, gallery] = parts;
        Ok(Self {
            train: DatasetManifest::from_entries(Split::Train, train),
            query: DatasetManifest::from_entries(Split::Query, query),
            gallery: DatasetManifest::from_entries(Split::Gallery, gallery),
        })
    }
}

/// Parses `(pid, camera)` from a market-style file name.
pub fn parse_market_name(file_name: &str) -> Option<(i64, u32)> {
    let mut parts = file_name.split('_');
    let pid = parts.next()?.parse::<i64>().ok()?;
    if pid < DISTRACTOR_PID {
        return None;
    }
    let cam_token = parts.next()?.strip_prefix('c')?;
    let digits: String = cam_token.chars().take_while(|c| c.is_ascii_digit()).collect();
    let cam = digits.parse::<u32>().ok()?;
    Some((pid, cam))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Scans one directory of images for `split`.
///
/// Train entries get dense labels in sorted order of original identity, and
/// distractors are dropped from train. Query and gallery entries keep their
/// original identity and camera; distractors stay in place.
pub fn scan_split_dir(dir: &Path, split: Split, naming: Naming) -> Result<DatasetManifest> {
    let Naming::MarketStyle = naming;
    let read = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in read {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort();

    let mut parsed = Vec::with_capacity(files.len());
    let mut offenders = Vec::new();
    for path in files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        match parse_market_name(name) {
            Some((pid, cam)) => parsed.push((path, pid, cam)),
            None => offenders.push(name.to_string()),
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: unparseable file names: {}",
            dir.display(),
            offenders.join(", ")
        )));
    }

    let entries: Vec<ManifestEntry> = if split == Split::Train {
        let ids: Vec<i64> = parsed
            .iter()
            .map(|(_, pid, _)| *pid)
            .filter(|&p| p != DISTRACTOR_PID)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        parsed
            .into_iter()
            .filter(|(_, pid, _)| *pid != DISTRACTOR_PID)
            .map(|(path, pid, camid)| ManifestEntry {
                path,
                pid: ids.binary_search(&pid).expect("pid collected above") as i64,
                camid,
                split,
            })
            .collect()
    } else {
        parsed
            .into_iter()
            .map(|(path, pid, camid)| ManifestEntry {
                path,
                pid,
                camid,
                split,
            })
            .collect()
    };
    if entries.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no usable images for the {split} split",
            dir.display()
        )));
    }
    Ok(DatasetManifest::from_entries(split, entries))
}

/// Scans a Market-1501 style root with `bounding_box_train/`, `query/` and
/// `bounding_box_test/`.
pub fn scan_reid_directory(root: &Path, naming: Naming) -> Result<ReidDataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    Ok(ReidDataset {
        train: scan_split_dir(&root.join(TRAIN_DIR), Split::Train, naming)?,
        query: scan_split_dir(&root.join(QUERY_DIR), Split::Query, naming)?,
        gallery: scan_split_dir(&root.join(GALLERY_DIR), Split::Gallery, naming)?,
    })
}
