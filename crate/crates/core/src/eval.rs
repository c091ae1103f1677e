//! Batched evaluation over a sample list: losses, IoU tables and the
//! deterministic view subsets they are computed on.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{Reconstruction, Refine3dNet, ViewSet};
use crate::objectives::{aggregate, iou, voxel_cross_entropy, IouReport, LossTriple};
use crate::synth::Sample;
use crate::util::stream;

const SUBSET_STREAM: u64 = 0xe5a1;

/// The `n` views of `sample` used whenever it is evaluated with `n` views.
pub fn view_subset(sample: &Sample, n: usize) -> Result<Vec<usize>> {
    let k = sample.views.len();
    if n == 0 || n > k {
        return Err(Error::Data(format!(
            "sample {}/{} has {k} views, {n} requested",
            sample.category, sample.id
        )));
    }
    let mut idx: Vec<usize> = (0..k).collect();
    idx.shuffle(&mut stream(&[sample.seed, n as u64, SUBSET_STREAM]));
    idx.truncate(n);
    Ok(idx)
}

pub fn view_set(sample: &Sample, indices: &[usize]) -> Result<ViewSet> {
    ViewSet::new(indices.iter().map(|&i| sample.views[i].clone()).collect())
}

/// Eval-mode reconstructions of every sample from its `n`-view subset, in
/// input order.
pub fn reconstruct_all(model: &Refine3dNet<f32>, samples: &[&Sample], n: usize, batch: usize) -> Result<Vec<Reconstruction>> {
    let sets = samples.iter().map(|s| view_set(s, &view_subset(s, n)?)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in sets.chunks(batch.max(1)) {
        let refs: Vec<&ViewSet> = chunk.iter().collect();
        out.extend(model.reconstruct_batch(&refs)?);
    }
    Ok(out)
}

/// Per-sample scores at one view count.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub category: String,
    pub loss: LossTriple,
    pub iou_decoded: f64,
    pub iou_refined: f64,
}

pub fn score(model: &Refine3dNet<f32>, samples: &[&Sample], n: usize, threshold: f32, batch: usize) -> Result<Vec<SampleScore>> {
    let recs = reconstruct_all(model, samples, n, batch)?;
    samples
        .iter()
        .zip(&recs)
        .map(|(s, r)| {
            Ok(SampleScore {
                category: s.category.to_string(),
                loss: LossTriple::new(voxel_cross_entropy(&r.decoded, &s.gt)?, voxel_cross_entropy(&r.refined, &s.gt)?),
                iou_decoded: iou(&r.decoded, &s.gt, threshold)?,
                iou_refined: iou(&r.refined, &s.gt, threshold)?,
            })
        })
        .collect()
}

/// Mean losses and mean refined IoU over samples.
pub fn summarize(scores: &[SampleScore]) -> Result<(LossTriple, f64)> {
    if scores.is_empty() {
        return Err(Error::Empty("nothing to summarize".into()));
    }
    let n = scores.len() as f64;
    let l_p = scores.iter().map(|s| s.loss.l_p).sum::<f64>() / n;
    let l_r = scores.iter().map(|s| s.loss.l_r).sum::<f64>() / n;
    let iou = scores.iter().map(|s| s.iou_refined).sum::<f64>() / n;
    Ok((LossTriple::new(l_p, l_r), iou))
}

/// IoU tables of the refined and the decoder output, one report per view
/// count.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTables {
    pub refined: Vec<IouReport>,
    pub decoder: Vec<IouReport>,
}

pub fn evaluate(
    model: &Refine3dNet<f32>,
    samples: &[&Sample],
    views: &[usize],
    threshold: f32,
    batch: usize,
) -> Result<EvalTables> {
    let mut tables = EvalTables { refined: Vec::new(), decoder: Vec::new() };
    for &n in views {
        let scores = score(model, samples, n, threshold, batch)?;
        let pick = |f: fn(&SampleScore) -> f64| scores.iter().map(|s| (s.category.clone(), f(s))).collect::<Vec<_>>();
        tables.refined.push(aggregate(&pick(|s| s.iou_refined), n, threshold)?);
        tables.decoder.push(aggregate(&pick(|s| s.iou_decoded), n, threshold)?);
    }
    Ok(tables)
}
