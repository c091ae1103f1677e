//! The reconstruction network: a shared 2D encoder applied to every view,
//! multi-head self-attention over the view tokens, a 3D decoder and a 3D
//! U-Net refiner.

mod config;
mod registry;
mod stages;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub(crate) use registry::{Init, ParamSpec};
pub use registry::{Parameter, ParameterRegistry, Partition};

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::voxel::VoxelGrid;
use stages::Layout;

/// Negative slope of every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.1;
/// Weight of the previous running estimate in batch-norm updates.
pub const BN_MOMENTUM: f64 = 0.9;

/// Element counts of a configuration, per partition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub theta_base: usize,
    pub phi_att: usize,
    pub phi_ref: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.theta_base + self.phi_att + self.phi_ref
    }

    pub fn get(&self, p: Partition) -> usize {
        match p {
            Partition::ThetaBase => self.theta_base,
            Partition::PhiAtt => self.phi_att,
            Partition::PhiRef => self.phi_ref,
        }
    }
}

/// Counts parameters without allocating them. Stage lists may be empty.
pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let (specs, _) = stages::plan(cfg);
    let mut c = ParamCount::default();
    for s in specs {
        let n: usize = s.shape.iter().product();
        match s.partition {
            Partition::ThetaBase => c.theta_base += n,
            Partition::PhiAtt => c.phi_att += n,
            Partition::PhiRef => c.phi_ref += n,
        }
    }
    c
}

/// Running batch-norm statistics for one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar = f32> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Statistics source for batch-norm layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// The N views of one object, each `[3, S, S]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    images: Vec<Tensor<f32>>,
}

impl ViewSet {
    pub fn new(images: Vec<Tensor<f32>>) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::Empty("a view set needs at least one image".into()));
        };
        let s = first.shape().to_vec();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
            return Err(Error::dim("view set", format!("images must be [3, S, S], got {s:?}")));
        }
        if let Some(bad) = images.iter().find(|t| t.shape() != s.as_slice()) {
            return Err(Error::dim("view set", format!("mixed image shapes {s:?} and {:?}", bad.shape())));
        }
        Ok(ViewSet { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn size(&self) -> usize {
        self.images[0].shape()[1]
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        ViewSet { images: order.iter().map(|&i| self.images[i].clone()).collect() }
    }
}

/// Stacks `batch` view sets of `views` images each into `[B·N, 3, S, S]`,
/// sample-major.
pub fn stack_views<T: Scalar>(sets: &[&ViewSet]) -> Result<Tensor<T>> {
    let Some(first) = sets.first() else {
        return Err(Error::Empty("no view sets to stack".into()));
    };
    let (n, s) = (first.len(), first.size());
    let mut data = Vec::with_capacity(sets.len() * n * 3 * s * s);
    for set in sets {
        if set.len() != n || set.size() != s {
            return Err(Error::dim("stack views", "view sets differ in count or size"));
        }
        for img in set.images() {
            data.extend(img.data().iter().map(|&v| T::of(v as f64)));
        }
    }
    Tensor::new([sets.len() * n, 3, s, s], data)
}

/// Graph nodes produced by one batched forward pass.
pub struct Outputs<'g, T: Scalar> {
    /// Decoder probabilities `[B, 1, D, D, D]`.
    pub decoded: Var<'g, T>,
    /// Refiner probabilities `[B, 1, D, D, D]`.
    pub refined: Var<'g, T>,
    /// Batch statistics per batch-norm layer (train mode only).
    pub stats: Vec<BatchStats<T>>,
    /// Stage name and output shape, in execution order.
    pub trace: Vec<(String, Vec<usize>)>,
}

/// Decoder and refiner output of one view set.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub decoded: VoxelGrid,
    pub refined: VoxelGrid,
}

#[derive(Clone, Debug)]
pub struct Refine3dNet<T: Scalar = f32> {
    config: ModelConfig,
    params: ParameterRegistry<T>,
    running: Vec<RunningStats<T>>,
    layout: Layout,
}

impl<T: Scalar> Refine3dNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = stages::plan(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParameterRegistry::from_specs(&specs, &mut rng)?;
        let running = layout
            .bn_layers()
            .map(|(name, c)| RunningStats { name, mean: vec![T::zero(); c], var: vec![T::one(); c] })
            .collect();
        Ok(Refine3dNet { config, params, running, layout })
    }

    /// Rebuilds a model from stored tensors, checking every name and shape
    /// against the configuration.
    pub fn from_parts(config: ModelConfig, params: ParameterRegistry<T>, running: Vec<RunningStats<T>>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = stages::plan(&config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "preset `{}` has {} parameters, got {}",
                config.name,
                specs.len(),
                params.len()
            )));
        }
        for (i, s) in specs.iter().enumerate() {
            let (name, p) = params.at(i);
            if name != s.name || p.partition != s.partition || p.tensor.shape() != s.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {i} is `{name}` {:?}, preset `{}` expects `{}` {:?}",
                    p.tensor.shape(),
                    config.name,
                    s.name,
                    s.shape
                )));
            }
        }
        let bn: Vec<_> = layout.bn_layers().collect();
        let ok = bn.len() == running.len()
            && bn.iter().zip(&running).all(|((n, c), r)| *n == r.name && r.mean.len() == *c && r.var.len() == *c);
        if !ok {
            return Err(Error::Config("running statistics do not match the preset".into()));
        }
        Ok(Refine3dNet { config, params, running, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterRegistry<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterRegistry<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn param_count(&self) -> ParamCount {
        let mut c = ParamCount::default();
        for p in Partition::ALL {
            let n = self.params.numel_in(p);
            match p {
                Partition::ThetaBase => c.theta_base = n,
                Partition::PhiAtt => c.phi_att = n,
                Partition::PhiRef => c.phi_ref = n,
            }
        }
        c
    }

    pub fn cast<U: Scalar>(&self) -> Refine3dNet<U> {
        Refine3dNet {
            config: self.config.clone(),
            params: self.params.cast(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    name: r.name.clone(),
                    mean: r.mean.iter().map(|v| U::of(v.as_f64())).collect(),
                    var: r.var.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Binds all parameters into `g`; see [`ParameterRegistry::bind`].
    pub fn bind<'g>(&self, g: &'g Graph<T>, trainable: impl Fn(Partition) -> bool) -> Vec<Var<'g, T>> {
        self.params.bind(g, trainable)
    }

    /// `[B, 3, S, S]` images to `[B, latent]` features.
    pub fn encode<'g>(&self, p: &[Var<'g, T>], images: Var<'g, T>) -> Result<Var<'g, T>> {
        stages::encode(&self.layout, &self.config, p, images, &mut Vec::new())
    }

    /// `[B·N, latent]` sample-major tokens to (`[B·N, latent]` attended
    /// tokens, `[B, latent]` fused vectors).
    pub fn attend<'g>(&self, p: &[Var<'g, T>], tokens: Var<'g, T>, views: usize) -> Result<(Var<'g, T>, Var<'g, T>)> {
        stages::attend(&self.layout, &self.config, p, tokens, views)
    }

    /// `[B, latent]` to `[B, 1, D, D, D]` probabilities.
    pub fn decode<'g>(&self, p: &[Var<'g, T>], latent: Var<'g, T>) -> Result<Var<'g, T>> {
        stages::decode(&self.layout, &self.config, p, latent, &mut Vec::new())
    }

    /// `[B, 1, D, D, D]` to `[B, 1, D, D, D]` probabilities.
    pub fn refine<'g>(&self, p: &[Var<'g, T>], v: Var<'g, T>, mode: Mode) -> Result<Outputs<'g, T>> {
        let mut trace = Vec::new();
        let mut stats = Vec::new();
        let refined = stages::refine(&self.layout, p, &self.running, v, mode, &mut stats, &mut trace)?;
        Ok(Outputs { decoded: v, refined, stats, trace })
    }

    /// Full pipeline on `[B·N, 3, S, S]` sample-major images.
    pub fn forward<'g>(&self, p: &[Var<'g, T>], images: Var<'g, T>, views: usize, mode: Mode) -> Result<Outputs<'g, T>> {
        let cfg = &self.config;
        let mut trace = Vec::new();
        let feats = stages::encode(&self.layout, cfg, p, images, &mut trace)?;
        let (tokens, fused) = stages::attend(&self.layout, cfg, p, feats, views)?;
        trace.push(("attention.tokens".into(), tokens.shape()));
        trace.push(("attention.fused".into(), fused.shape()));
        let decoded = stages::decode(&self.layout, cfg, p, fused, &mut trace)?;
        let mut stats = Vec::new();
        let refined = stages::refine(&self.layout, p, &self.running, decoded, mode, &mut stats, &mut trace)?;
        Ok(Outputs { decoded, refined, stats, trace })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::State(format!(
                "expected statistics for {} batch-norm layers, got {}",
                self.running.len(),
                stats.len()
            )));
        }
        let m = T::of(BN_MOMENTUM);
        let one_m = T::one() - m;
        for (r, s) in self.running.iter_mut().zip(stats) {
            if s.mean.len() != r.mean.len() || s.var.len() != r.var.len() {
                return Err(Error::State(format!("statistics shape mismatch for `{}`", r.name)));
            }
            for (a, &b) in r.mean.iter_mut().zip(&s.mean) {
                *a = m * *a + one_m * b;
            }
            for (a, &b) in r.var.iter_mut().zip(&s.var) {
                *a = m * *a + one_m * b;
            }
        }
        Ok(())
    }

    pub fn set_running_stats(&mut self, running: Vec<RunningStats<T>>) -> Result<()> {
        let ok = running.len() == self.running.len()
            && running
                .iter()
                .zip(&self.running)
                .all(|(a, b)| a.name == b.name && a.mean.len() == b.mean.len() && a.var.len() == b.var.len());
        if !ok {
            return Err(Error::Config("running statistics do not match the preset".into()));
        }
        self.running = running;
        Ok(())
    }

    /// Eval-mode reconstruction of several view sets sharing a view count.
    pub fn reconstruct_batch(&self, sets: &[&ViewSet]) -> Result<Vec<Reconstruction>> {
        let Some(first) = sets.first() else {
            return Ok(Vec::new());
        };
        if first.size() != self.config.input_size {
            return Err(Error::dim(
                "reconstruct",
                format!("images are {0}×{0}, preset `{1}` expects {2}×{2}", first.size(), self.config.name, self.config.input_size),
            ));
        }
        let g = Graph::new();
        let p = self.bind(&g, |_| false);
        let x = g.constant(stack_views(sets)?);
        let out = self.forward(&p, x, first.len(), Mode::Eval)?;
        let (dv, rv) = (out.decoded.value(), out.refined.value());
        let d = self.config.voxel_dim;
        let per = d * d * d;
        (0..sets.len())
            .map(|b| {
                let grid = |t: &Tensor<T>| {
                    VoxelGrid::new(d, t.data()[b * per..(b + 1) * per].iter().map(|v| v.as_f64() as f32).collect())
                };
                Ok(Reconstruction { decoded: grid(&dv)?, refined: grid(&rv)? })
            })
            .collect()
    }

    pub fn reconstruct(&self, views: &ViewSet) -> Result<Reconstruction> {
        Ok(self.reconstruct_batch(&[views])?.remove(0))
    }
}
