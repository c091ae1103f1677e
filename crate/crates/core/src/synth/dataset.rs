use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::binvox::{encode_binvox, read_binvox};
use super::image::{encode_png, read_png};
use super::render::{render, Camera};
use super::shape::{generate, Category};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::{mix, stream};
use crate::voxel::VoxelGrid;

pub const MANIFEST: &str = "manifest.json";
const SPLIT_STREAM: u64 = 0x5b17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_samples: usize,
    pub views: usize,
    pub dim: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 || self.views == 0 {
            return Err(Error::Config("need at least one sample and one view".into()));
        }
        if !matches!(self.dim, 16 | 32) {
            return Err(Error::Config(format!("grid extent must be 16 or 32, got {}", self.dim)));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image size {} too small", self.image_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestView {
    pub file: String,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub category: Category,
    pub id: String,
    pub split: Split,
    pub views: Vec<ManifestView>,
    pub gt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub dim: usize,
    pub image_size: usize,
    pub samples: Vec<ManifestSample>,
}

impl Manifest {
    /// Every file path the manifest references, relative to the root.
    pub fn files(&self) -> Vec<String> {
        let mut f = vec![MANIFEST.to_string()];
        for s in &self.samples {
            f.extend(s.views.iter().map(|v| v.file.clone()));
            f.push(s.gt.clone());
        }
        f
    }
}

/// One object: its rendered views and ground-truth occupancy.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub category: Category,
    pub id: String,
    pub split: Split,
    /// Seed of this sample's random streams (shape, cameras, view subsets).
    pub seed: u64,
    pub views: Vec<Tensor<f32>>,
    pub gt: VoxelGrid,
}

pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    mix(&[dataset_seed, index as u64])
}

/// Split label of every sample: a seeded shuffle puts 80% in the training
/// pool, of which 10% is held out for validation; the rest is test.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(&[seed, SPLIT_STREAM]));
    let pool = (0.8 * n as f64).round() as usize;
    let val = (0.1 * pool as f64).round() as usize;
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < val {
            Split::Val
        } else if rank < pool {
            Split::Train
        } else {
            Split::Test
        };
    }
    out
}

/// Builds the dataset in memory. Each sample depends only on
/// `(seed, index)`, so the result is independent of the thread count.
pub fn synthesize(cfg: &DatasetConfig) -> Result<(Manifest, Vec<Sample>)> {
    cfg.validate()?;
    let splits = assign_splits(cfg.num_samples, cfg.seed);
    let built: Vec<(ManifestSample, Sample)> = (0..cfg.num_samples)
        .into_par_iter()
        .map(|i| {
            let category = Category::ALL[i % Category::ALL.len()];
            let seed = sample_seed(cfg.seed, i);
            let id = format!("{i:04}");
            let (_, gt) = generate(category, seed, cfg.dim)?;
            let dir = format!("{category}/{id}");
            let mut views = Vec::with_capacity(cfg.views);
            let mut entries = Vec::with_capacity(cfg.views);
            for k in 0..cfg.views {
                let cam = Camera::for_view(seed, k);
                views.push(render(&gt, &cam, cfg.image_size)?);
                entries.push(ManifestView {
                    file: format!("{dir}/view_{k}.png"),
                    azimuth_deg: cam.azimuth_deg,
                    elevation_deg: cam.elevation_deg,
                });
            }
            let entry = ManifestSample { category, id: id.clone(), split: splits[i], views: entries, gt: format!("{dir}/gt.binvox") };
            Ok((entry, Sample { category, id, split: splits[i], seed, views, gt }))
        })
        .collect::<Result<_>>()?;
    let (entries, samples) = built.into_iter().unzip();
    Ok((Manifest { seed: cfg.seed, dim: cfg.dim, image_size: cfg.image_size, samples: entries }, samples))
}

/// Writes the dataset to `root`. Files are staged in a sibling temporary
/// directory and moved into place at the end; `root` must be absent or empty.
pub fn gen_dataset(cfg: &DatasetConfig, root: &Path) -> Result<Manifest> {
    if root.exists() {
        let mut entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        if entries.next().is_some() {
            return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output directory is not empty")));
        }
    }
    let (manifest, samples) = synthesize(cfg)?;
    let parent = match root.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = tempfile::Builder::new().prefix(".refine3d-data-").tempdir_in(&parent).map_err(|e| Error::io(&parent, e))?;
    let write = |rel: &str, bytes: &[u8]| -> Result<()> {
        let p = staging.path().join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    manifest.samples.par_iter().zip(&samples).try_for_each(|(entry, s)| -> Result<()> {
        for (v, img) in entry.views.iter().zip(&s.views) {
            write(&v.file, &encode_png(img)?)?;
        }
        write(&entry.gt, &encode_binvox(&s.gt))
    })?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Data(format!("manifest: {e}")))?;
    write(MANIFEST, &json)?;
    if root.exists() {
        std::fs::remove_dir(root).map_err(|e| Error::io(root, e))?;
    }
    let staged = staging.keep();
    std::fs::rename(&staged, root).map_err(|e| {
        let _ = std::fs::remove_dir_all(&staged);
        Error::io(root, e)
    })?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// A dataset loaded from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let (d, s) = (manifest.dim, manifest.image_size);
    let samples = manifest
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let gt = read_binvox(&root.join(&m.gt))?;
            if gt.dim() != d || !gt.is_binary() {
                return Err(Error::Data(format!("{}: expected a binary {d}³ grid", m.gt)));
            }
            let views = m
                .views
                .iter()
                .map(|v| {
                    let img = read_png(&root.join(&v.file))?;
                    if img.shape() != [3, s, s] {
                        return Err(Error::Data(format!("{}: expected {s}×{s} pixels, got {:?}", v.file, img.shape())));
                    }
                    Ok(img)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Sample { category: m.category, id: m.id.clone(), split: m.split, seed: sample_seed(manifest.seed, i), views, gt })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts() {
        let s = assign_splits(10, 3);
        let count = |x| s.iter().filter(|&&v| v == x).count();
        assert_eq!(count(Split::Train) + count(Split::Val), 8);
        assert_eq!(count(Split::Test), 2);
        assert_eq!(count(Split::Val), 1);
    }
}
