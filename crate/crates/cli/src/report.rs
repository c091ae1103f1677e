use std::path::PathBuf;

use anyhow::Context;
use refine3d::objectives::{parse_iou_csv, IouReport, OVERALL};
use refine3d::train::parse_metrics_csv;
use refine3d::util::write_atomic;

use crate::svg::{line_chart, Series};
use crate::train::sibling;
use crate::usage;

#[derive(clap::Args)]
pub struct Args {
    /// Metrics CSV from `train`.
    #[arg(long)]
    metrics: PathBuf,
    /// Refined IoU table from `eval`.
    #[arg(long)]
    eval: PathBuf,
    /// Decoder IoU table [default: `<eval stem>_decoder.csv` if present].
    #[arg(long)]
    decoder: Option<PathBuf>,
    /// Directory for the SVG charts.
    #[arg(long)]
    out: PathBuf,
}

fn read(path: &PathBuf) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn iou_series(reports: &[IouReport], value: impl Fn(&IouReport, &str) -> Option<f64>) -> Vec<Series> {
    let mut names: Vec<String> = reports.iter().flat_map(|r| r.categories.keys().cloned()).collect();
    names.sort();
    names.dedup();
    names.push(OVERALL.to_string());
    names
        .into_iter()
        .map(|name| {
            let points = reports.iter().filter_map(|r| value(r, &name).map(|v| (r.views as f64, v))).collect();
            let label = if name == OVERALL { "overall".to_string() } else { name };
            Series { name: label, points }
        })
        .collect()
}

fn lookup(r: &IouReport, name: &str) -> Option<f64> {
    if name == OVERALL {
        Some(r.overall)
    } else {
        r.categories.get(name).copied()
    }
}

pub fn run(a: Args) -> anyhow::Result<()> {
    let rows = parse_metrics_csv(&read(&a.metrics)?).with_context(|| format!("in {}", a.metrics.display()))?;
    if rows.is_empty() {
        return Err(usage(format!("{} has no metric rows", a.metrics.display())));
    }
    let mut refined = parse_iou_csv(&read(&a.eval)?).with_context(|| format!("in {}", a.eval.display()))?;
    refined.sort_by_key(|r| r.views);
    let decoder_path = a.decoder.clone().or_else(|| Some(sibling(&a.eval, "_decoder")).filter(|p| p.exists()));
    let decoder = match &decoder_path {
        Some(p) => {
            let mut d = parse_iou_csv(&read(p)?).with_context(|| format!("in {}", p.display()))?;
            d.sort_by_key(|r| r.views);
            Some(d)
        }
        None => None,
    };

    let mut charts = Vec::new();
    let pick = |f: fn(&refine3d::train::MetricsRow) -> f64| rows.iter().map(|r| (r.step as f64, f(r))).collect();
    charts.push((
        "loss.svg",
        line_chart(
            "Training loss",
            "step",
            "cross-entropy",
            &[
                Series { name: "l_p".into(), points: pick(|r| r.loss.l_p) },
                Series { name: "l_r".into(), points: pick(|r| r.loss.l_r) },
                Series { name: "l_m".into(), points: pick(|r| r.loss.l_m) },
            ],
        ),
    ));
    charts.push(("iou_views.svg", line_chart("Mean IoU by number of views", "views", "IoU", &iou_series(&refined, lookup))));
    match &decoder {
        Some(dec) => {
            let gap = iou_series(&refined, |r, name| {
                let d = dec.iter().find(|d| d.views == r.views)?;
                Some(lookup(r, name)? - lookup(d, name)?)
            });
            charts.push(("refiner_gap.svg", line_chart("Refined minus decoder IoU", "views", "IoU gap", &gap)));
        }
        None => log::warn!("no decoder table found; skipping refiner_gap.svg (run eval with --compare-refiner)"),
    }

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, svg) in &charts {
        write_atomic(&a.out.join(name), svg.as_bytes())?;
    }
    println!("wrote {} charts to {}", charts.len(), a.out.display());
    Ok(())
}
