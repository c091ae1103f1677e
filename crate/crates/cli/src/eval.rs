use std::path::PathBuf;

use clap::ValueEnum;
use refine3d::eval::evaluate;
use refine3d::objectives::{write_iou_csv, IouReport, IOU_THRESHOLD, OVERALL};
use refine3d::synth::{load_dataset, Sample, Split};
use refine3d::train::load_checkpoint;
use refine3d::util::write_atomic;

use crate::train::{check_compatible, sibling};
use crate::usage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated view counts.
    #[arg(long, default_value = "1,2,3,4")]
    views: String,
    /// IoU table of the refined output. With `--compare-refiner` the decoder
    /// table goes to `<stem>_decoder.csv` beside it.
    #[arg(long)]
    out: PathBuf,
    /// Also tabulate IoU of the decoder output before refinement.
    #[arg(long)]
    compare_refiner: bool,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = IOU_THRESHOLD)]
    threshold: f32,
    /// View sets per forward pass.
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

pub fn parse_views(text: &str) -> anyhow::Result<Vec<usize>> {
    let views: Vec<usize> = text
        .split(',')
        .map(|v| v.trim().parse::<usize>().ok().filter(|&n| n > 0))
        .collect::<Option<_>>()
        .ok_or_else(|| usage(format!("--views expects positive counts like `1,3,5`, got `{text}`")))?;
    if views.is_empty() {
        return Err(usage("--views is empty"));
    }
    Ok(views)
}

/// Categories as rows, view counts as columns.
fn print_table(title: &str, reports: &[IouReport]) {
    println!("{title}");
    let mut header = format!("{:<12}", "category");
    for r in reports {
        header.push_str(&format!(" {:>7}", format!("{}v", r.views)));
    }
    println!("{header}");
    let cats: Vec<&String> = reports[0].categories.keys().collect();
    for cat in cats {
        let mut line = format!("{cat:<12}");
        for r in reports {
            line.push_str(&format!(" {:>7.4}", r.categories.get(cat).copied().unwrap_or(f64::NAN)));
        }
        println!("{line}");
    }
    let mut line = format!("{OVERALL:<12}");
    for r in reports {
        line.push_str(&format!(" {:>7.4}", r.overall));
    }
    println!("{line}");
}

pub fn run(a: Args) -> anyhow::Result<()> {
    let views = parse_views(&a.views)?;
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(usage("--threshold must lie in (0, 1)"));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.data)?;
    check_compatible(ckpt.model.config(), &dataset.manifest)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let samples: Vec<&Sample> = dataset.split(split);
    if samples.is_empty() {
        return Err(usage(format!("{} has no {:?} samples", a.data.display(), a.split).to_lowercase()));
    }
    let available = samples.iter().map(|s| s.views.len()).min().unwrap_or(0);
    if let Some(&n) = views.iter().find(|&&n| n > available) {
        return Err(usage(format!("{n} views requested but some samples have only {available}")));
    }
    let tables = evaluate(&ckpt.model, &samples, &views, a.threshold, a.batch)?;
    let decoder_path = sibling(&a.out, "_decoder");
    write_atomic(&a.out, write_iou_csv(&tables.refined).as_bytes())?;
    print_table("refined IoU", &tables.refined);
    if a.compare_refiner {
        write_atomic(&decoder_path, write_iou_csv(&tables.decoder).as_bytes())?;
        print_table("decoder IoU", &tables.decoder);
    }
    Ok(())
}
