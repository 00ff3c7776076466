//! Labelled dataset on disk.
//!
//! ```text
//! root/
//!   images/<id>.png | <id>.ppm
//!   labels/<id>.txt     one line per object: class cx cy w h (normalized)
//! ```
//!
//! Image ids are file stems; every image needs a label file and vice versa.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use edgedet::metrics::{GroundTruth, PerImage};
use edgedet::postprocess::BBox;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imageio::{dimensions, is_image_path};
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

/// Items sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub items: Vec<DatasetItem>,
}

fn stems(
    dir: &Path,
    keep: impl Fn(&Path) -> bool,
) -> Result<BTreeMap<String, Vec<PathBuf>>, CliError> {
    let mut out: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(CliError::io(dir))? {
        let path = entry.map_err(CliError::io(dir))?.path();
        if !path.is_file() || !keep(&path) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.entry(stem.to_string()).or_default().push(path);
        }
    }
    Ok(out)
}

/// Sorted image files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut v: Vec<PathBuf> = stems(dir, is_image_path)?.into_values().flatten().collect();
    v.sort();
    Ok(v)
}

pub fn open_dataset(root: &Path) -> Result<Dataset, CliError> {
    let images = stems(&root.join("images"), is_image_path)?;
    let labels = stems(&root.join("labels"), |p| {
        p.extension().is_some_and(|e| e == "txt")
    })?;
    let mut problems = Vec::new();
    for (id, paths) in &images {
        if paths.len() > 1 {
            problems.push(format!("image id `{id}` has {} files", paths.len()));
        }
        if !labels.contains_key(id) {
            problems.push(format!("image without label: {}", paths[0].display()));
        }
    }
    for (id, paths) in &labels {
        if !images.contains_key(id) {
            problems.push(format!("label without image: {}", paths[0].display()));
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Data(format!(
            "dataset {} is inconsistent:\n  {}",
            root.display(),
            problems.join("\n  ")
        )));
    }
    let items = images
        .into_iter()
        .map(|(id, mut paths)| DatasetItem {
            label: labels[&id][0].clone(),
            image: paths.remove(0),
            id,
        })
        .collect();
    Ok(Dataset {
        root: root.to_path_buf(),
        items,
    })
}

/// Parse a YOLO label file for an image of `width` x `height` pixels.
pub fn parse_labels(text: &str, width: u32, height: u32) -> Result<Vec<GroundTruth>, String> {
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |m: &str| format!("line {}: {m}", i + 1);
        if fields.len() != 5 {
            return Err(err("expected `class cx cy w h`"));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err("class is not a non-negative integer"))?;
        let mut v = [0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f.parse().map_err(|_| err("coordinate is not a number"))?;
            if !(0.0..=1.0).contains(&v[k]) {
                return Err(err("coordinates must be normalized to [0, 1]"));
            }
        }
        let [cx, cy, bw, bh] = v;
        out.push(GroundTruth {
            bbox: BBox::new(
                ((cx - bw / 2.0) * w).max(0.0) as f32,
                ((cy - bh / 2.0) * h).max(0.0) as f32,
                ((cx + bw / 2.0) * w).min(w) as f32,
                ((cy + bh / 2.0) * h).min(h) as f32,
            ),
            class_id,
        });
    }
    Ok(out)
}

impl Dataset {
    /// Ground truth in image pixels for every item.
    pub fn truths(&self) -> Result<PerImage<GroundTruth>, CliError> {
        let parsed: Result<Vec<_>, CliError> = self
            .items
            .par_iter()
            .map(|it| {
                let (w, h) = dimensions(&it.image)?;
                let text = std::fs::read_to_string(&it.label).map_err(CliError::io(&it.label))?;
                let gts = parse_labels(&text, w, h)
                    .map_err(|m| CliError::Data(format!("{}: {m}", it.label.display())))?;
                Ok((it.id.clone(), gts))
            })
            .collect();
        Ok(parsed?.into_iter().collect())
    }
}

/// Train/val/test split sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SplitEntry {
    Count(usize),
    Files(Vec<String>),
}

impl SplitEntry {
    fn len(&self) -> usize {
        match self {
            SplitEntry::Count(n) => *n,
            SplitEntry::Files(f) => f.len(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    train: SplitEntry,
    val: SplitEntry,
    test: SplitEntry,
}

/// Read a TOML manifest whose `train`, `val` and `test` keys are either
/// counts or lists of image ids.
pub fn load_manifest(path: &Path) -> Result<Splits, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let m: ManifestFile = toml::from_str(&text)
        .map_err(|e| CliError::Data(format!("manifest {}: {e}", path.display())))?;
    Ok(Splits {
        train: m.train.len(),
        val: m.val.len(),
        test: m.test.len(),
    })
}

impl std::fmt::Display for Splits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "train/val/test {}/{}/{}",
            self.train, self.val, self.test
        )
    }
}
