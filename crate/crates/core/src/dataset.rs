//! Manifest-driven dataset loading.

use crate::error::{Error, Result};
use crate::pgm;
use crate::synth::{DatasetManifest, ManifestEntry, Split, NUM_CLASSES};
use crate::types::{DomainTag, ImageBatch, LabelMap};
use ndarray::{Array3, Array4};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// One sample loaded into memory; images are `[1, 1, H, W]` in `[0, 1]`.
#[derive(Debug)]
pub struct Sample {
    pub id: String,
    pub image: ImageBatch,
    pub label: LabelMap,
    pub domain: DomainTag,
    pub split: Split,
}

#[derive(Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Indices of samples matching a domain and split, in manifest order.
    pub fn select(&self, domain: DomainTag, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.domain == domain && s.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("manifest {}: {e}", path.display())))?;
    let mut seen = BTreeSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.id.clone()) {
            return Err(Error::Data(format!("duplicate sample id {}", e.id)));
        }
    }
    Ok(manifest)
}

/// Loads one 8-bit PGM as a `[1, 1, H, W]` image batch; file values are
/// divided by 255.
pub fn load_image_pgm(path: &Path, domain: DomainTag) -> Result<ImageBatch> {
    let img = pgm::read_pgm(path)?;
    let data = Array4::from_shape_vec(
        (1, 1, img.height, img.width),
        img.pixels.iter().map(|&v| pgm::dequantize_intensity(v)).collect(),
    )
    .expect("pgm payload length already checked");
    ImageBatch::new(data, domain)
}

fn load_entry(root: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let image = load_image_pgm(&root.join(&entry.image), entry.domain)?;
    let lab = pgm::read_pgm(&root.join(&entry.label))?;
    if image.width() != lab.width || image.height() != lab.height {
        return Err(Error::shape(
            format!("sample {}", entry.id),
            format!("{}x{}", image.width(), image.height()),
            format!("{}x{}", lab.width, lab.height),
        ));
    }
    let (h, w) = (lab.height, lab.width);
    let label = Array3::from_shape_vec((1, h, w), lab.pixels)
        .expect("pgm payload length already checked");
    Ok(Sample {
        id: entry.id.clone(),
        image,
        label: LabelMap::new(label, NUM_CLASSES)
            .map_err(|e| Error::Data(format!("sample {}: {e}", entry.id)))?,
        domain: entry.domain,
        split: entry.split,
    })
}

/// Loads every manifest entry; missing files are reported all at once.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let root: PathBuf = manifest_path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));

    let missing: Vec<String> = manifest
        .entries
        .iter()
        .flat_map(|e| [&e.image, &e.label])
        .filter(|rel| !root.join(rel).exists())
        .map(|rel| rel.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "missing dataset files: {}",
            missing.join(", ")
        )));
    }

    let samples = manifest
        .entries
        .iter()
        .map(|e| load_entry(&root, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}
