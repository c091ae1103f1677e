//! Procedural stand-in dataset: analytic solids voxelized into occupancy
//! grids, shaded orthographic renderings, and the on-disk layout.

mod binvox;
mod dataset;
mod image;
mod render;
mod shape;

pub use binvox::{decode_binvox, encode_binvox, read_binvox, write_binvox};
pub use dataset::{
    assign_splits, gen_dataset, load_dataset, read_manifest, sample_seed, synthesize, Dataset, DatasetConfig, Manifest,
    ManifestSample, ManifestView, Sample, Split, MANIFEST,
};
pub use image::{decode_png, encode_png, read_png, write_png};
pub use render::{render, silhouette, slab, Camera, DEFAULT_SCALE, MAX_ELEVATION_DEG};
pub use shape::{gen_shape, generate, Category, ShapeSpec, Solid, MAX_OCCUPANCY, MIN_OCCUPANCY};
