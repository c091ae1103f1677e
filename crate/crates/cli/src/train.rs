use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::ValueEnum;
use refine3d::model::ModelConfig;
use refine3d::synth::{load_dataset, Manifest, Sample, Split};
use refine3d::train::{
    load_checkpoint, parse_metrics_csv, save_checkpoint, MetricsRow, Phase, RunConfig, Trainer, METRICS_HEADER,
};
use refine3d::util::write_atomic;

use crate::usage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
    /// Every partition at once (ablation only).
    Joint,
}

#[derive(clap::Args)]
pub struct Args {
    /// JSON run configuration; unknown keys are rejected. Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PhaseArg::All)]
    phase: PhaseArg,
    /// Checkpoint to write. With `--phase all`, `<stem>_phase{1,2,3}.<ext>`
    /// are written next to it at each phase boundary.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics CSV to write.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from a checkpoint (required for phases 2 and 3 run alone).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured model preset (desk or paper).
    #[arg(long)]
    preset: Option<String>,
    /// Run a phase even if the earlier ones have not completed.
    #[arg(long)]
    allow_out_of_order: bool,
}

/// Errors unless the dataset's image and voxel sizes fit the model.
pub fn check_compatible(model: &ModelConfig, manifest: &Manifest) -> anyhow::Result<()> {
    if model.input_size != manifest.image_size || model.voxel_dim != manifest.dim {
        return Err(usage(format!(
            "preset `{}` expects {s}×{s} images and {d}³ grids; the dataset has {is}×{is} images and {md}³ grids",
            model.name,
            s = model.input_size,
            d = model.voxel_dim,
            is = manifest.image_size,
            md = manifest.dim
        )));
    }
    Ok(())
}

pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

fn metrics_text(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

pub fn run(a: Args) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.preset {
        cfg.preset = p;
    }
    cfg.data = a.data.or(cfg.data);
    cfg.out = a.out.or(cfg.out);
    cfg.metrics = a.metrics.or(cfg.metrics);
    cfg.validate()?;
    let data = cfg.data.clone().ok_or_else(|| usage("no dataset given (--data or `data` in the config)"))?;
    let out = cfg.out.clone().ok_or_else(|| usage("no checkpoint path given (--out or `out` in the config)"))?;

    let dataset = load_dataset(&data)?;
    check_compatible(&cfg.model()?, &dataset.manifest)?;
    let train: Vec<&Sample> = dataset.split(Split::Train);
    let val: Vec<&Sample> = dataset.split(Split::Val);
    if train.is_empty() {
        return Err(usage(format!("{} has no training samples", data.display())));
    }

    let mut trainer = match &a.resume {
        Some(p) => Trainer::from_checkpoint(cfg.clone(), load_checkpoint(p)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    trainer.allow_out_of_order = a.allow_out_of_order;

    let mut rows: Vec<MetricsRow> = Vec::new();
    if let (Some(_), Some(m)) = (&a.resume, &cfg.metrics) {
        if m.exists() {
            let text = std::fs::read_to_string(m).with_context(|| format!("reading {}", m.display()))?;
            let step = trainer.state.global_step;
            rows = parse_metrics_csv(&text)?.into_iter().filter(|r| r.step <= step).collect();
        }
    }

    let phases: Vec<Phase> = match a.phase {
        PhaseArg::One => vec![Phase::One],
        PhaseArg::Two => vec![Phase::Two],
        PhaseArg::Three => vec![Phase::Three],
        PhaseArg::Joint => vec![Phase::Joint],
        PhaseArg::All => {
            let done = trainer.state.completed;
            let left: Vec<Phase> = [Phase::One, Phase::Two, Phase::Three].into_iter().filter(|p| p.number() > done).collect();
            if left.is_empty() {
                return Err(refine3d::Error::State("all three phases are already completed".into()).into());
            }
            left
        }
    };

    log::info!(
        "training preset `{}` on {} samples ({} validation), seed {}",
        cfg.preset,
        train.len(),
        val.len(),
        cfg.seed
    );
    for phase in phases {
        let report = trainer.run_phase(phase, &train, &val, &mut |r| {
            if let Some(iou) = r.val_iou {
                log::info!("phase {} step {}: l_m {:.4}, val IoU {:.4}, lr {}", r.phase, r.step, r.loss.l_m, iou, r.lr);
            }
            rows.push(*r);
            Ok(())
        })?;
        log::info!(
            "phase {} finished after {} steps{}",
            phase.number(),
            report.steps,
            if report.converged { " (converged)" } else { "" }
        );
        if a.phase == PhaseArg::All {
            let path = sibling(&out, &format!("_phase{}", phase.number()));
            save_checkpoint(&trainer.checkpoint(), &path)?;
            log::info!("wrote {}", path.display());
        }
        if let Some(m) = &cfg.metrics {
            write_atomic(m, metrics_text(&rows).as_bytes())?;
        }
    }
    save_checkpoint(&trainer.checkpoint(), &out)?;
    println!("wrote {} ({} optimizer steps)", out.display(), trainer.state.global_step);
    Ok(())
}
