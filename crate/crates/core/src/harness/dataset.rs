use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::io::{self, ManifestEntry};
use crate::error::{Error, Result};
use crate::genome::mix64;
use crate::imgcore::{Image, Mask};

/// One labelled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    content_hash: u64,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, mask: Mask) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::DimensionMismatch {
                expected: image.dims(),
                actual: mask.dims(),
            });
        }
        let content_hash = hash_content(&image, &mask);
        Ok(Self {
            id: id.into(),
            image,
            mask,
            content_hash,
        })
    }

    /// Seed for the stochastic perturbations applied to this sample in a run
    /// seeded with `run_seed`. It depends on pixel content, not on position,
    /// so duplicated or reordered samples are perturbed identically.
    pub fn perturbation_seed(&self, run_seed: u64) -> u64 {
        mix64(run_seed ^ self.content_hash)
    }
}

fn hash_content(image: &Image, mask: &Mask) -> u64 {
    // FNV-1a over the dimensions, pixel bits and mask bits
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |b: u64| {
        h ^= b;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    feed(image.width() as u64);
    feed(image.height() as u64);
    for v in image.data() {
        feed(v.to_bits() as u64);
    }
    for &b in mask.data() {
        feed(b as u64);
    }
    h
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate image id `{}`", s.id)));
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// Loads a manifest. Relative paths resolve against the manifest directory.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let entries = io::read_manifest(manifest)?;
    let resolve = |p: &PathBuf| {
        if p.is_absolute() {
            p.clone()
        } else {
            base.join(p)
        }
    };
    let samples = entries
        .par_iter()
        .map(|e: &ManifestEntry| {
            let image = io::read_ppm(&resolve(&e.image_path))?;
            let mask = io::read_rle(&resolve(&e.mask_path))?;
            Sample::new(e.image_id.clone(), image, mask).map_err(|err| match err {
                Error::DimensionMismatch { expected, actual } => Error::invalid(format!(
                    "image `{}` is {expected:?} but its mask is {actual:?}",
                    e.image_id
                )),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}

/// Writes images as PPM and masks as RLE under `dir`, plus `manifest.csv`.
/// Returns the manifest path.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d)
            .map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let image_path = PathBuf::from("images").join(format!("{}.ppm", s.id));
        let mask_path = PathBuf::from("masks").join(format!("{}.rle", s.id));
        io::write_ppm(&dir.join(&image_path), &s.image)?;
        io::write_rle(&dir.join(&mask_path), &s.mask)?;
        entries.push(ManifestEntry {
            image_id: s.id.clone(),
            image_path,
            mask_path,
        });
    }
    let manifest = dir.join("manifest.csv");
    io::write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
