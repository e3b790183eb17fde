//! Dataset manifests, annotation files, split protocols and a synthetic
//! thermal scene generator.

mod partition;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{Sample, SampleTags, SamplePool, TimeOfDay};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::GrayImage;

pub use partition::{partition, range_key, Granularity, Partition, ProtocolKind, SplitProtocol};
pub use synth::{generate_synthetic, render_scene, Archetype, SyntheticSceneConfig};

/// Class names in the order of their ids.
pub const DEFAULT_CLASSES: [&str; 4] = ["T72", "BTR70", "SUV", "Pickup"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub range_km: f64,
    pub time_of_day: TimeOfDay,
    pub sequence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].image)
    }

    pub fn annotation_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].annotation)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Reads entry `i`, resizing its image to `size × size` when needed.
    pub fn load_sample(&self, i: usize, size: usize) -> Result<Sample> {
        let e = &self.entries[i];
        let image = GrayImage::load_png(&self.image_path(i))?;
        let image = if image.width != size || image.height != size { image.resize(size, size) } else { image };
        let boxes = load_annotation(&self.annotation_path(i), self.num_classes())?;
        Ok(Sample { image, boxes, tags: SampleTags { range_km: e.range_km, time_of_day: e.time_of_day } })
    }

    pub fn load_samples(&self, indices: &[usize], size: usize) -> Result<Vec<Sample>> {
        indices.iter().map(|&i| self.load_sample(i, size)).collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.into(), line: e.line(), msg: e.to_string() })?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if m.class_names.is_empty() {
        return Err(Error::Load(format!("{}: manifest lists no classes", path.display())));
    }
    for (i, e) in m.entries.iter().enumerate() {
        if !(e.range_km > 0.0 && e.range_km.is_finite()) {
            return Err(Error::Load(format!("entry {i}: range_km {} must be positive", e.range_km)));
        }
        for p in [m.image_path(i), m.annotation_path(i)] {
            if !p.is_file() {
                return Err(Error::Load(format!("entry {i}: {} does not exist", p.display())));
            }
        }
    }
    Ok(m)
}

/// Parses `class cx cy w h` lines. Blank lines are skipped.
pub fn parse_annotations(text: &str, path: &Path, num_classes: usize) -> Result<Vec<BBox>> {
    let mut boxes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse { path: path.into(), line: n + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class: usize = fields[0].parse().map_err(|_| err(format!("bad class id {:?}", fields[0])))?;
        if class >= num_classes {
            return Err(err(format!("class {class} out of range for {num_classes} classes")));
        }
        let mut v = [0.0; 4];
        for (slot, (name, f)) in v.iter_mut().zip(["cx", "cy", "w", "h"].iter().zip(&fields[1..])) {
            *slot = f.parse().map_err(|_| err(format!("bad {name} {f:?}")))?;
        }
        let b = BBox::new(class, v[0], v[1], v[2], v[3]);
        if !b.is_valid(num_classes) {
            return Err(err(format!("box {} {} {} {} is out of range", v[0], v[1], v[2], v[3])));
        }
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn format_annotations(boxes: &[BBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{} {:.6} {:.6} {:.6} {:.6}\n", b.class_id, b.cx, b.cy, b.w, b.h))
        .collect()
}

pub fn load_annotation(path: &Path, num_classes: usize) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    parse_annotations(&text, path, num_classes)
}

pub fn write_annotation(path: &Path, boxes: &[BBox]) -> Result<()> {
    fs::write(path, format_annotations(boxes))?;
    Ok(())
}

/// Samples held in memory, for augmentation and evaluation.
#[derive(Debug, Clone, Default)]
pub struct InMemoryDataset {
    pub samples: Vec<Sample>,
}

impl SamplePool for InMemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }
    fn sample(&self, index: usize) -> Result<Sample> {
        Ok(self.samples[index].clone())
    }
}
