//! Directory-per-identity face datasets and their CSV index.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::face::{FaceImage, FACE_SIZE};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub identity_id: String,
    /// Path relative to the dataset root, `/`-separated.
    pub image_path: String,
    pub image_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    /// Builds an index from `(identity, path)` pairs, sorted by identity then path.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut by_id: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (id, path) in pairs {
            by_id.entry(id).or_default().push(path);
        }
        let mut entries = Vec::new();
        for (id, mut paths) in by_id {
            paths.sort();
            paths.dedup();
            let count = paths.len();
            entries.extend(paths.into_iter().map(|p| IndexEntry { identity_id: id.clone(), image_path: p, image_count: count }));
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Identities in sorted order with the entry indices of their images.
    pub fn groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            by_id.entry(&e.identity_id).or_default().push(i);
        }
        by_id.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn num_identities(&self) -> usize {
        self.groups().len()
    }

    /// Dense identity label per entry, following the sorted identity order.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.entries.len()];
        for (label, (_, members)) in self.groups().into_iter().enumerate() {
            for i in members {
                labels[i] = label;
            }
        }
        labels
    }

    pub fn identity_of(&self) -> HashMap<&str, &str> {
        self.entries.iter().map(|e| (e.image_path.as_str(), e.identity_id.as_str())).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let pairs = r
            .deserialize::<IndexEntry>()
            .map(|e| e.map(|e| (e.identity_id, e.image_path)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if pairs.is_empty() {
            bail!(Data, "index {} has no entries", path.display());
        }
        Ok(Self::from_pairs(pairs))
    }
}

/// Result of scanning a dataset directory.
#[derive(Debug, Clone)]
pub struct IndexScan {
    pub index: DatasetIndex,
    pub warnings: Vec<String>,
}

/// Scans `root/<identity>/<image>` and indexes every 112×112 image.
/// Images of any other size are excluded and reported as warnings.
pub fn index_dataset(root: &Path) -> Result<IndexScan> {
    if !root.is_dir() {
        bail!(Data, "dataset root {} is not a directory", root.display());
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for dir in dirs {
        let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .map(|x| IMAGE_EXTENSIONS.contains(&x.to_string_lossy().to_lowercase().as_str()))
                        .unwrap_or(false)
            })
            .collect();
        files.sort();
        for file in files {
            let rel = format!("{}/{}", id, file.file_name().unwrap_or_default().to_string_lossy());
            match image::image_dimensions(&file) {
                Ok((w, h)) if w as usize == FACE_SIZE && h as usize == FACE_SIZE => pairs.push((id.clone(), rel)),
                Ok((w, h)) => warnings.push(format!("{rel}: size {w}x{h}, expected 112x112")),
                Err(e) => warnings.push(format!("{rel}: unreadable ({e})")),
            }
        }
    }
    if pairs.is_empty() {
        bail!(Data, "no usable images under {}", root.display());
    }
    Ok(IndexScan { index: DatasetIndex::from_pairs(pairs), warnings })
}

/// Source of face images keyed by their index path.
pub trait ImageStore {
    fn image(&self, key: &str) -> Result<FaceImage>;
}

/// Images read lazily from a dataset root.
#[derive(Debug, Clone)]
pub struct DirImageStore {
    pub root: PathBuf,
}

impl ImageStore for DirImageStore {
    fn image(&self, key: &str) -> Result<FaceImage> {
        FaceImage::load(&self.root.join(key))
    }
}

/// A fully loaded dataset: index plus decoded images in index order.
#[derive(Debug, Clone)]
pub struct FaceDataset {
    pub index: DatasetIndex,
    pub images: Vec<FaceImage>,
    by_path: HashMap<String, usize>,
}

impl FaceDataset {
    pub fn load(root: &Path, index: DatasetIndex) -> Result<Self> {
        let images = index
            .entries()
            .iter()
            .map(|e| FaceImage::load(&root.join(&e.image_path)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(index, images)
    }

    pub fn from_images(index: DatasetIndex, images: Vec<FaceImage>) -> Result<Self> {
        if images.len() != index.len() {
            bail!(Validation, "{} images for {} index entries", images.len(), index.len());
        }
        let by_path = index.entries().iter().enumerate().map(|(i, e)| (e.image_path.clone(), i)).collect();
        Ok(Self { index, images, by_path })
    }

    pub fn position(&self, key: &str) -> Option<usize> {
        self.by_path.get(key).copied()
    }
}

impl ImageStore for FaceDataset {
    fn image(&self, key: &str) -> Result<FaceImage> {
        match self.by_path.get(key) {
            Some(&i) => Ok(self.images[i].clone()),
            None => bail!(Data, "image {key} is not in the dataset"),
        }
    }
}
