use std::collections::BTreeMap;
use std::path::PathBuf;

use refine3d::synth::{gen_dataset, DatasetConfig, Split};

use crate::usage;

#[derive(clap::Args)]
pub struct Args {
    /// Output directory; must be absent or empty.
    #[arg(long)]
    out: PathBuf,
    /// Number of shapes.
    #[arg(long, default_value_t = 8)]
    num: usize,
    /// Rendered views per shape.
    #[arg(long, default_value_t = 4)]
    views: usize,
    /// Voxel grid extent.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 32)]
    img: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn run(a: Args) -> anyhow::Result<()> {
    if a.out.is_dir() && a.out.read_dir()?.next().is_some() {
        return Err(usage(format!("{} exists and is not empty", a.out.display())));
    }
    if a.out.exists() && !a.out.is_dir() {
        return Err(usage(format!("{} exists and is not a directory", a.out.display())));
    }
    let cfg = DatasetConfig { num_samples: a.num, views: a.views, dim: a.dim, image_size: a.img, seed: a.seed };
    let manifest = gen_dataset(&cfg, &a.out)?;
    let mut table: BTreeMap<String, BTreeMap<&str, usize>> = BTreeMap::new();
    for s in &manifest.samples {
        let split = match s.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        *table.entry(s.category.to_string()).or_default().entry(split).or_default() += 1;
    }
    println!(
        "wrote {} shapes to {} ({} views each, {}³ voxels, {}×{} images, seed {})",
        manifest.samples.len(),
        a.out.display(),
        a.views,
        a.dim,
        a.img,
        a.img,
        a.seed
    );
    println!("{:<10} {:>6} {:>6} {:>6}", "category", "train", "val", "test");
    for (cat, splits) in &table {
        let n = |k: &str| splits.get(k).copied().unwrap_or(0);
        println!("{cat:<10} {:>6} {:>6} {:>6}", n("train"), n("val"), n("test"));
    }
    Ok(())
}
