use std::path::PathBuf;

use refine3d::objectives::{binarize, IOU_THRESHOLD};
use refine3d::synth::{encode_binvox, read_png};
use refine3d::train::load_checkpoint;
use refine3d::util::write_atomic;
use refine3d::ViewSet;

use crate::usage;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated PNG paths, in any order.
    #[arg(long, value_delimiter = ',', required = true)]
    images: Vec<PathBuf>,
    /// Thresholded grid as binvox.
    #[arg(long)]
    out: PathBuf,
    /// Raw refined probabilities as little-endian f32, y fastest.
    #[arg(long)]
    probs: Option<PathBuf>,
    #[arg(long, default_value_t = IOU_THRESHOLD)]
    threshold: f32,
}

pub fn run(a: Args) -> anyhow::Result<()> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(usage("--threshold must lie in (0, 1)"));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let images = a.images.iter().map(|p| read_png(p)).collect::<refine3d::Result<Vec<_>>>()?;
    let views = ViewSet::new(images)?;
    let rec = ckpt.model.reconstruct(&views)?;
    let grid = binarize(&rec.refined, a.threshold);
    let probs = a.probs.as_ref().map(|_| {
        let d = rec.refined.dim();
        let mut bytes = Vec::with_capacity(rec.refined.len() * 4);
        for x in 0..d {
            for z in 0..d {
                for y in 0..d {
                    bytes.extend(rec.refined.get(x, y, z).to_le_bytes());
                }
            }
        }
        bytes
    });
    write_atomic(&a.out, &encode_binvox(&grid))?;
    if let (Some(path), Some(bytes)) = (&a.probs, probs) {
        write_atomic(path, &bytes)?;
    }
    println!(
        "{} views → {} occupied of {} voxels at threshold {}; wrote {}",
        views.len(),
        grid.occupied(),
        grid.len(),
        a.threshold,
        a.out.display()
    );
    Ok(())
}
