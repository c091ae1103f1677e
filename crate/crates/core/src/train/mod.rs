//! Three-phase training: the encoder-decoder first, then the attention
//! fusion, then alternating single-view and multi-view sub-steps. The
//! refiner learns from its own output loss throughout.

mod adam;
mod checkpoint;
mod config;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use adam::{lr_at, Adam, AdamSlot, LrSchedule, BETA1, BETA2, EPSILON};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::RunConfig;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::eval::{score, summarize};
use crate::model::{stack_views, Mode, Partition, Refine3dNet, ViewSet};
use crate::objectives::{LossTriple, CLIP_EPS};
use crate::synth::Sample;
use crate::tensor::{Scalar, Tensor};
use crate::util::stream;
use crate::voxel::VoxelGrid;

const STEP_STREAM: u64 = 0x57e9;
const EPOCH_STREAM: u64 = 0xe90c;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Encoder-decoder on single views.
    One,
    /// Attention fusion on multi-view sets.
    Two,
    /// Alternating single-view and multi-view sub-steps within a category.
    Three,
    /// Every partition at once, for ablation.
    Joint,
}

impl Phase {
    /// Numeric label used in state and metrics; joint training is 0.
    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
            Phase::Three => 3,
            Phase::Joint => 0,
        }
    }
}

/// Which partitions one optimizer step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Phase1,
    Phase2,
    /// Single-view sub-step of phase 3.
    Phase3A,
    /// Multi-view sub-step of phase 3.
    Phase3B,
    Joint,
}

impl StepKind {
    pub fn updates(self) -> &'static [Partition] {
        match self {
            StepKind::Phase1 | StepKind::Phase3A => &[Partition::ThetaBase, Partition::PhiRef],
            StepKind::Phase2 | StepKind::Phase3B => &[Partition::PhiAtt, Partition::PhiRef],
            StepKind::Joint => &Partition::ALL,
        }
    }
}

/// Early stopping on validation loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceMonitor {
    pub patience: u32,
    pub min_delta: f64,
    pub best: f64,
    pub stale: u32,
}

impl ConvergenceMonitor {
    pub fn new(patience: u32, min_delta: f64) -> Self {
        ConvergenceMonitor { patience, min_delta, best: f64::INFINITY, stale: 0 }
    }

    /// Records a validation loss; true once `patience` consecutive
    /// observations failed to improve on the best by more than `min_delta`.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.converged()
    }

    pub fn converged(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainState {
    /// Highest phase run to completion (0 = none).
    pub completed: u8,
    /// Phase of the step counters below.
    pub phase: u8,
    pub phase_step: u64,
    /// Samples drawn by the phase's epoch sampler.
    pub phase_samples: u64,
    pub global_step: u64,
    pub samples_seen: u64,
    pub epoch: u64,
    pub seed: u64,
    pub monitor: ConvergenceMonitor,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Self {
        TrainState {
            completed: 0,
            phase: 0,
            phase_step: 0,
            phase_samples: 0,
            global_step: 0,
            samples_seen: 0,
            epoch: 0,
            seed: cfg.seed,
            monitor: ConvergenceMonitor::new(cfg.patience, cfg.min_delta),
        }
    }
}

pub const METRICS_HEADER: &str = "step,phase,l_p,l_r,l_m,val_iou,lr";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: u8,
    pub loss: LossTriple,
    pub val_iou: Option<f64>,
    pub lr: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let mut s = format!("{},{},{},{},{},", self.step, self.phase, self.loss.l_p, self.loss.l_r, self.loss.l_m);
        if let Some(v) = self.val_iou {
            let _ = write!(s, "{v}");
        }
        let _ = write!(s, ",{}", self.lr);
        s
    }

    pub fn parse(line: &str, line_no: usize) -> Result<Self> {
        let bad = |what: &str| Error::Data(format!("line {line_no}: {what}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let num = |i: usize, name: &str| f[i].parse::<f64>().map_err(|_| bad(&format!("bad {name}")));
        Ok(MetricsRow {
            step: f[0].parse().map_err(|_| bad("bad step"))?,
            phase: f[1].parse().map_err(|_| bad("bad phase"))?,
            loss: LossTriple { l_p: num(2, "l_p")?, l_r: num(3, "l_r")?, l_m: num(4, "l_m")? },
            val_iou: if f[5].is_empty() { None } else { Some(num(5, "val_iou")?) },
            lr: num(6, "lr")?,
        })
    }
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(Error::Data(format!("line 1: expected header `{METRICS_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| MetricsRow::parse(l, i + 2))
        .collect()
}

/// Outcome of [`Trainer::run_phase`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseReport {
    pub steps: u64,
    pub converged: bool,
    pub last: Option<LossTriple>,
}

/// Indices `start..start + size` of an endless sequence of seeded
/// permutations of `0..n`, one permutation per epoch.
pub fn epoch_batch(n: usize, seed: u64, stream_id: u64, start: u64, size: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for k in start..start + size as u64 {
        let epoch = k / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream(&[seed, stream_id, epoch, EPOCH_STREAM]));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[(k % n as u64) as usize]);
    }
    out
}

/// `count` members of `pool`, without repetition while the pool lasts.
fn draw<R: Rng>(pool: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut p = pool.to_vec();
        p.shuffle(rng);
        out.extend(p.into_iter().take(count - out.len()));
    }
    out
}

fn multi_view(train: &[&Sample]) -> Vec<usize> {
    (0..train.len()).filter(|&i| train[i].views.len() >= 2).collect()
}

/// One optimizer step of a phase: its kind, the batch and the view count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubStep {
    pub kind: StepKind,
    pub samples: Vec<usize>,
    pub views: usize,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Refine3dNet<f32>,
    pub adam: Adam<f32>,
    pub state: TrainState,
    /// Skip the 1 → 2 → 3 ordering check.
    pub allow_out_of_order: bool,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Refine3dNet::new(config.model()?, config.seed)?;
        let adam = Adam::new(model.params());
        let state = TrainState::new(&config);
        Ok(Trainer { config, model, adam, state, allow_out_of_order: false })
    }

    /// Continues from a checkpoint. The checkpoint's preset must match.
    pub fn from_checkpoint(config: RunConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        if ckpt.model.config().name != config.preset {
            return Err(Error::Config(format!(
                "checkpoint holds preset `{}`, run is configured for `{}`",
                ckpt.model.config().name,
                config.preset
            )));
        }
        let mut state = ckpt.state;
        state.monitor.patience = config.patience;
        state.monitor.min_delta = config.min_delta;
        Ok(Trainer { config, model: ckpt.model, adam: ckpt.adam, state, allow_out_of_order: false })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { model: self.model.clone(), adam: self.adam.clone(), state: self.state }
    }

    pub fn lr(&self) -> f64 {
        self.config.schedule().lr_at(self.state.epoch)
    }

    /// One optimizer step on explicit view sets (all of one view count) and
    /// their ground truth.
    pub fn train_step_on(&mut self, kind: StepKind, sets: &[ViewSet], gts: &[&VoxelGrid]) -> Result<LossTriple> {
        if sets.is_empty() || sets.len() != gts.len() {
            return Err(Error::Data("a batch needs one ground-truth grid per view set".into()));
        }
        let d = self.model.config().voxel_dim;
        if let Some(g) = gts.iter().find(|g| g.dim() != d) {
            return Err(Error::dim("train step", format!("ground truth {}³, model predicts {d}³", g.dim())));
        }
        let updates = kind.updates();
        let lr = self.lr();
        let (triple, grads, stats) = {
            let g = Graph::new();
            let p = self.model.bind(&g, |part| updates.contains(&part));
            let refs: Vec<&ViewSet> = sets.iter().collect();
            let x = g.constant(stack_views(&refs)?);
            let out = self.model.forward(&p, x, sets[0].len(), Mode::Train)?;
            let target = Tensor::new(
                [gts.len(), 1, d, d, d],
                gts.iter().flat_map(|g| g.values().iter().copied()).collect(),
            )?;
            let lp = out.decoded.bce(&target, CLIP_EPS)?;
            let lr_ = out.refined.bce(&target, CLIP_EPS)?;
            let triple = LossTriple::new(lp.value().item().as_f64(), lr_.value().item().as_f64());
            if !(triple.l_p.is_finite() && triple.l_r.is_finite()) {
                return Err(Error::Numeric(format!("non-finite loss at step {}: {triple:?}", self.state.global_step)));
            }
            let lm = lp.add(lr_)?.scale(0.5);
            let mut grads = g.backward(lm)?;
            let grads: Vec<Option<Tensor<f32>>> = p.iter().map(|v| grads.take(*v)).collect();
            (triple, grads, out.stats)
        };
        let mut grads = grads;
        let mut subset = Vec::new();
        for i in 0..self.model.params().len() {
            let part = self.model.params().at(i).1.partition;
            if !updates.contains(&part) {
                continue;
            }
            subset.push(i);
            if let Some(t) = grads[i].as_mut() {
                if part == Partition::PhiRef {
                    // The decoder loss does not depend on the refiner, so
                    // d(l_m)/dΦ_ref is half of d(l_r)/dΦ_ref.
                    t.data_mut().iter_mut().for_each(|v| *v = *v * 2.0);
                }
                if !t.all_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient for `{}`", self.model.params().at(i).0)));
                }
            }
        }
        self.adam.step(self.model.params_mut(), &subset, &grads, lr)?;
        self.model.apply_batch_stats(&stats)?;
        self.state.global_step += 1;
        self.state.samples_seen += sets.len() as u64;
        Ok(triple)
    }

    /// One optimizer step with `views` randomly chosen views per sample.
    pub fn train_step<R: Rng>(&mut self, kind: StepKind, batch: &[&Sample], views: usize, rng: &mut R) -> Result<LossTriple> {
        let sets = batch
            .iter()
            .map(|s| {
                if s.views.len() < views {
                    return Err(Error::Data(format!("sample {}/{} has fewer than {views} views", s.category, s.id)));
                }
                let mut idx: Vec<usize> = (0..s.views.len()).collect();
                idx.shuffle(rng);
                ViewSet::new(idx[..views].iter().map(|&i| s.views[i].clone()).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let gts: Vec<&VoxelGrid> = batch.iter().map(|s| &s.gt).collect();
        self.train_step_on(kind, &sets, &gts)
    }

    /// Mean validation losses and refined IoU for a phase.
    pub fn validate(&self, val: &[&Sample], phase: Phase) -> Result<(LossTriple, f64)> {
        let min_views = val.iter().map(|s| s.views.len()).min().unwrap_or(0);
        let multi = self.config.views_max.min(min_views).max(1);
        let counts: Vec<usize> = match phase {
            Phase::One => vec![1],
            Phase::Two => vec![multi],
            Phase::Three | Phase::Joint => vec![1, multi],
        };
        let (t, b) = (self.config.threshold, self.config.batch_size);
        let mut parts = Vec::new();
        for n in counts {
            parts.push(summarize(&score(&self.model, val, n, t, b)?)?);
        }
        if let Some(p) = parts.iter().find(|p| !(p.0.l_m.is_finite() && p.1.is_finite())) {
            return Err(Error::Numeric(format!("non-finite validation result at step {}: {:?}", self.state.global_step, p.0)));
        }
        let k = parts.len() as f64;
        let l_p = parts.iter().map(|p| p.0.l_p).sum::<f64>() / k;
        let l_r = parts.iter().map(|p| p.0.l_r).sum::<f64>() / k;
        Ok((LossTriple::new(l_p, l_r), parts.iter().map(|p| p.1).sum::<f64>() / k))
    }

    /// Batches of the next step of `phase`, as indices into `train`, and the
    /// random stream that then picks their views. Depends only on the seed,
    /// the phase and the phase's step and sample counters.
    pub fn plan_step(&self, phase: Phase, train: &[&Sample]) -> Result<(Vec<SubStep>, ChaCha8Rng)> {
        if train.is_empty() {
            return Err(Error::Empty("no training samples".into()));
        }
        let num = phase.number();
        let (bs, vmax, seed) = (self.config.batch_size, self.config.views_max, self.state.seed);
        let mut rng = stream(&[seed, u64::from(num), self.state.phase_step, STEP_STREAM]);
        let min_views = |idx: &[usize]| idx.iter().map(|&i| train[i].views.len()).min().unwrap_or(0);
        let plan = match phase {
            Phase::One => {
                let samples = epoch_batch(train.len(), seed, 1, self.state.phase_samples, bs);
                vec![SubStep { kind: StepKind::Phase1, samples, views: 1 }]
            }
            Phase::Two => {
                let multi = multi_view(train);
                if multi.is_empty() {
                    return Err(Error::Data("phase 2 needs samples with at least 2 views".into()));
                }
                let samples: Vec<usize> =
                    epoch_batch(multi.len(), seed, 2, self.state.phase_samples, bs).into_iter().map(|i| multi[i]).collect();
                let views = rng.gen_range(2..=vmax).min(min_views(&samples));
                vec![SubStep { kind: StepKind::Phase2, samples, views }]
            }
            Phase::Three => {
                let mut categories: Vec<_> = train.iter().map(|s| s.category).collect();
                categories.sort();
                categories.dedup();
                let cat = categories[rng.gen_range(0..categories.len())];
                let members: Vec<usize> = (0..train.len()).filter(|&i| train[i].category == cat).collect();
                let a = draw(&members, bs, &mut rng);
                let mut plan = vec![SubStep { kind: StepKind::Phase3A, samples: a, views: 1 }];
                let multi: Vec<usize> = members.into_iter().filter(|&i| train[i].views.len() >= 2).collect();
                if multi.is_empty() {
                    log::warn!("category {cat} has no multi-view samples; skipping sub-step B");
                } else {
                    let b = draw(&multi, bs, &mut rng);
                    let views = rng.gen_range(2..=vmax).min(min_views(&b));
                    plan.push(SubStep { kind: StepKind::Phase3B, samples: b, views });
                }
                plan
            }
            Phase::Joint => {
                let samples = epoch_batch(train.len(), seed, 4, self.state.phase_samples, bs);
                let views = rng.gen_range(1..=vmax).min(min_views(&samples));
                vec![SubStep { kind: StepKind::Joint, samples, views }]
            }
        };
        Ok((plan, rng))
    }

    fn check_order(&self, phase: Phase) -> Result<()> {
        if self.allow_out_of_order || phase == Phase::Joint {
            return Ok(());
        }
        let want = phase.number() - 1;
        let done = self.state.completed;
        if done != want {
            return Err(Error::State(if done < want {
                format!("phase {} requires phase {want} to be completed first (completed: {done})", phase.number())
            } else {
                format!("phase {} was already completed", phase.number())
            }));
        }
        Ok(())
    }

    fn budget(&self, phase: Phase) -> u64 {
        let c = &self.config;
        match phase {
            Phase::One => c.phase1_steps,
            Phase::Two => c.phase2_steps,
            Phase::Three => c.phase3_steps,
            Phase::Joint => c.phase1_steps + c.phase2_steps + c.phase3_steps,
        }
    }

    /// Runs `phase` until its step budget or convergence, resuming if the
    /// state stopped partway through the same phase. Each optimizer step is
    /// reported to `on_row`.
    pub fn run_phase(
        &mut self,
        phase: Phase,
        train: &[&Sample],
        val: &[&Sample],
        on_row: &mut dyn FnMut(&MetricsRow) -> Result<()>,
    ) -> Result<PhaseReport> {
        self.check_order(phase)?;
        if train.is_empty() {
            return Err(Error::Empty("no training samples".into()));
        }
        let num = phase.number();
        if self.state.phase != num || self.state.completed >= num.max(1) && phase != Phase::Joint {
            self.state.phase = num;
            self.state.phase_step = 0;
            self.state.phase_samples = 0;
            self.state.monitor = ConvergenceMonitor::new(self.config.patience, self.config.min_delta);
        }
        let multi = multi_view(train);
        if matches!(phase, Phase::Two | Phase::Three) && multi.len() < train.len() {
            log::warn!("skipping {} samples with fewer than 2 views in multi-view steps", train.len() - multi.len());
        }
        if phase == Phase::Two && multi.is_empty() {
            return Err(Error::Data("phase 2 needs samples with at least 2 views".into()));
        }

        let budget = self.budget(phase);
        let mut last = None;
        let mut converged = false;
        while self.state.phase_step < budget {
            let (plan, mut rng) = self.plan_step(phase, train)?;
            if phase != Phase::Three {
                self.state.phase_samples += self.config.batch_size as u64;
            }
            let mut rows = Vec::new();
            for sub in &plan {
                let batch: Vec<&Sample> = sub.samples.iter().map(|&i| train[i]).collect();
                let loss = self.train_step(sub.kind, &batch, sub.views, &mut rng)?;
                rows.push(MetricsRow { step: self.state.global_step, phase: num, loss, val_iou: None, lr: self.lr() });
            }
            self.state.phase_step += 1;
            self.state.epoch = self.state.samples_seen / train.len() as u64;
            let every = self.config.eval_every;
            if every > 0 && !val.is_empty() && self.state.phase_step % every == 0 {
                let (loss, iou) = self.validate(val, phase)?;
                if let Some(r) = rows.last_mut() {
                    r.val_iou = Some(iou);
                }
                last = Some(loss);
                converged = self.state.monitor.observe(loss.l_m);
            }
            for r in &rows {
                on_row(r)?;
            }
            if converged {
                break;
            }
        }
        if phase != Phase::Joint {
            self.state.completed = self.state.completed.max(num);
        }
        Ok(PhaseReport { steps: self.state.phase_step, converged, last })
    }
}
