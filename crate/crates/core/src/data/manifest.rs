use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::decode_image;
use super::Sample;
use crate::density::{in_bounds, Point, PointSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    image: String,
    points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Path as written in the manifest, relative to the manifest's directory.
    pub image: String,
    pub points: Vec<Point>,
}

/// A list of annotated images. On disk this is a JSON array of
/// `{"image": "relative/path.ppm", "points": [[x, y], ...]}` objects.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>, split: Split) -> Self {
        Self {
            root: root.into(),
            entries,
            split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.entries[index].image)
    }

    pub fn to_json(&self) -> Result<String> {
        let records: Vec<EntryRecord> = self
            .entries
            .iter()
            .map(|e| EntryRecord {
                image: e.image.clone(),
                points: e.points.iter().map(|p| [p.x, p.y]).collect(),
            })
            .collect();
        Ok(serde_json::to_string_pretty(&records)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Decodes entry `index` and attaches its bounds-checked annotations.
    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let path = self.image_path(index);
        let image = decode_image(&path)?;
        let (_, h, w) = image.chw("load_sample")?;
        let entry = &self.entries[index];
        if let Some((i, p)) = entry.points.iter().enumerate().find(|(_, p)| !in_bounds(p, w, h)) {
            return Err(Error::PointOutOfBounds {
                path,
                entry: index,
                point: i,
                x: p.x,
                y: p.y,
                width: w,
                height: h,
            });
        }
        let annotations = PointSet::new(entry.points.clone(), w, h)?;
        Ok(Sample { image, annotations })
    }
}

/// Parses a manifest and checks that every image decodes and every point
/// lies inside its image. Image paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let records: Vec<EntryRecord> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let entries = records
        .into_iter()
        .map(|r| ManifestEntry {
            image: r.image,
            points: r.points.into_iter().map(|[x, y]| Point::new(x, y)).collect(),
        })
        .collect();
    let manifest = DatasetManifest::new(root, entries, Split::Train);
    for i in 0..manifest.len() {
        manifest.load_sample(i)?;
    }
    Ok(manifest)
}
