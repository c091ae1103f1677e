//! Voxel cross-entropy, thresholded IoU and per-category aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::voxel::VoxelGrid;

/// Predictions are clipped to `[CLIP_EPS, 1 − CLIP_EPS]` before taking logs.
pub const CLIP_EPS: f64 = 1e-7;

/// Default occupancy threshold for IoU.
pub const IOU_THRESHOLD: f32 = 0.25;

/// Label of the aggregate row in IoU tables.
pub const OVERALL: &str = "__overall__";

fn same_extent(a: &VoxelGrid, b: &VoxelGrid) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dim("voxel grids", format!("{}³ vs {}³", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean binary cross-entropy `−(1/V)Σ[g·ln p + (1−g)·ln(1−p)]`, non-negative.
pub fn voxel_cross_entropy(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<f64> {
    same_extent(pred, gt)?;
    if !gt.is_binary() {
        return Err(Error::Data("ground truth must be binary".into()));
    }
    let total: f64 = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| {
            let p = (p as f64).clamp(CLIP_EPS, 1.0 - CLIP_EPS);
            let g = g as f64;
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Decoder-output loss, refiner-output loss and their mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTriple {
    pub l_p: f64,
    pub l_r: f64,
    pub l_m: f64,
}

impl LossTriple {
    pub fn new(l_p: f64, l_r: f64) -> Self {
        LossTriple { l_p, l_r, l_m: (l_p + l_r) / 2.0 }
    }
}

/// 1 where `p > t`, else 0.
pub fn binarize(pred: &VoxelGrid, t: f32) -> VoxelGrid {
    let values = pred.values().iter().map(|&p| if p > t { 1.0 } else { 0.0 }).collect();
    VoxelGrid::new(pred.dim(), values).expect("same extent")
}

/// Intersection over union of `binarize(pred, t)` and `gt`. Two empty sets
/// agree perfectly and score 1.
pub fn iou(pred: &VoxelGrid, gt: &VoxelGrid, t: f32) -> Result<f64> {
    same_extent(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        let (a, b) = (p > t, g > 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean IoU per category at one view count, plus the mean over categories.
#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub views: usize,
    pub threshold: f32,
    pub categories: BTreeMap<String, f64>,
    pub overall: f64,
}

/// Unweighted mean within each category; `overall` is the mean of the
/// category means.
pub fn aggregate(samples: &[(String, f64)], views: usize, threshold: f32) -> Result<IouReport> {
    if samples.is_empty() {
        return Err(Error::Empty("no IoU samples to aggregate".into()));
    }
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (cat, v) in samples {
        let e = sums.entry(cat.clone()).or_default();
        e.0 += v;
        e.1 += 1;
    }
    let categories: BTreeMap<String, f64> =
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    let overall = categories.values().sum::<f64>() / categories.len() as f64;
    Ok(IouReport { views, threshold, categories, overall })
}

pub const IOU_CSV_HEADER: &str = "category,views,threshold,mean_iou";

/// One row per category and view count, then the overall row for that count.
pub fn write_iou_csv(reports: &[IouReport]) -> String {
    let mut out = String::from(IOU_CSV_HEADER);
    out.push('\n');
    for r in reports {
        for (cat, v) in &r.categories {
            let _ = writeln!(out, "{cat},{},{},{v}", r.views, r.threshold);
        }
        let _ = writeln!(out, "{OVERALL},{},{},{}", r.views, r.threshold, r.overall);
    }
    out
}

/// Parses [`write_iou_csv`] output. Errors name the 1-based line number.
pub fn parse_iou_csv(text: &str) -> Result<Vec<IouReport>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == IOU_CSV_HEADER => {}
        _ => return Err(Error::Data(format!("line 1: expected header `{IOU_CSV_HEADER}`"))),
    }
    let mut reports: Vec<IouReport> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Data(format!("line {}: {what}", i + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let views: usize = fields[1].parse().map_err(|_| bad("bad view count"))?;
        let threshold: f32 = fields[2].parse().map_err(|_| bad("bad threshold"))?;
        let value: f64 = fields[3].parse().map_err(|_| bad("bad IoU"))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(bad("IoU outside [0, 1]"));
        }
        let idx = match reports.iter().position(|r| r.views == views) {
            Some(idx) => idx,
            None => {
                reports.push(IouReport { views, threshold, categories: BTreeMap::new(), overall: f64::NAN });
                reports.len() - 1
            }
        };
        if fields[0] == OVERALL {
            reports[idx].overall = value;
        } else {
            reports[idx].categories.insert(fields[0].to_string(), value);
        }
    }
    if reports.is_empty() {
        return Err(Error::Empty("IoU table has no rows".into()));
    }
    if let Some(r) = reports.iter().find(|r| r.overall.is_nan()) {
        return Err(Error::Data(format!("missing {OVERALL} row for {} views", r.views)));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(values: &[f32]) -> VoxelGrid {
        VoxelGrid::new(2, values.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_edge_cases() {
        let gt = grid(&[1., 0., 1., 1., 0., 0., 1., 0.]);
        assert!(voxel_cross_entropy(&gt, &gt).unwrap() <= 2e-7);
        let half = VoxelGrid::full(2, 0.5);
        assert!((voxel_cross_entropy(&half, &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(voxel_cross_entropy(&half, &half).is_err());
        assert!(voxel_cross_entropy(&VoxelGrid::zeros(3), &gt).is_err());
    }

    #[test]
    fn binarize_is_strict() {
        let b = binarize(&grid(&[0.25, 0.26, 0.0, 1.0, 0.2, 0.3, 0.25, 0.9]), 0.25);
        assert_eq!(b.values(), &[0., 1., 0., 1., 0., 1., 0., 1.]);
        assert_eq!(binarize(&VoxelGrid::zeros(4), 0.25), VoxelGrid::zeros(4));
    }

    #[test]
    fn iou_edge_cases() {
        let gt = grid(&[1., 1., 0., 0., 0., 0., 0., 0.]);
        assert_eq!(iou(&gt, &gt, 0.25).unwrap(), 1.0);
        let disjoint = grid(&[0., 0., 1., 1., 0., 0., 0., 0.]);
        assert_eq!(iou(&disjoint, &gt, 0.25).unwrap(), 0.0);
        assert_eq!(iou(&VoxelGrid::zeros(2), &VoxelGrid::zeros(2), 0.25).unwrap(), 1.0);
        assert!(iou(&VoxelGrid::zeros(3), &gt, 0.25).is_err());
    }

    #[test]
    fn loss_triple_mean() {
        let l = LossTriple::new(0.3, 0.7);
        assert_eq!(l.l_m, (0.3 + 0.7) / 2.0);
    }

    #[test]
    fn aggregate_means() {
        let r = aggregate(&[("a".into(), 0.4), ("a".into(), 0.6)], 1, 0.25).unwrap();
        assert!((r.categories["a"] - 0.5).abs() < 1e-12);
        assert!((r.overall - 0.5).abs() < 1e-12);
        let r = aggregate(&[("a".into(), 1.0), ("b".into(), 0.0), ("b".into(), 0.0)], 1, 0.25).unwrap();
        assert_eq!(r.overall, 0.5);
        assert!(matches!(aggregate(&[], 1, 0.25), Err(Error::Empty(_))));
    }

    #[test]
    fn csv_round_trip() {
        let reports = vec![
            aggregate(&[("box".into(), 0.75), ("sphere".into(), 0.5)], 1, 0.25).unwrap(),
            aggregate(&[("box".into(), 0.8), ("sphere".into(), 0.6)], 3, 0.25).unwrap(),
        ];
        let text = write_iou_csv(&reports);
        assert!(text.starts_with("category,views,threshold,mean_iou\n"));
        assert!(text.contains("__overall__,1,0.25,0.625"));
        assert_eq!(parse_iou_csv(&text).unwrap(), reports);
        assert!(parse_iou_csv("category,views,threshold,mean_iou\n").is_err());
        let err = parse_iou_csv("category,views,threshold,mean_iou\nbox,1,0.25,abc\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }
}
