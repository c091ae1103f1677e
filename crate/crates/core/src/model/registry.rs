use indexmap::IndexMap;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which training phase may update a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    /// Encoder and decoder.
    ThetaBase,
    /// Self-attention fusion.
    PhiAtt,
    /// 3D refiner.
    PhiRef,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::ThetaBase, Partition::PhiAtt, Partition::PhiRef];

    pub fn tag(self) -> u8 {
        match self {
            Partition::ThetaBase => 0,
            Partition::PhiAtt => 1,
            Partition::PhiRef => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Partition::ALL.into_iter().find(|p| p.tag() == tag)
    }

    pub fn label(self) -> &'static str {
        match self {
            Partition::ThetaBase => "theta_base",
            Partition::PhiAtt => "phi_att",
            Partition::PhiRef => "phi_ref",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Uniform with He bound for leaky-ReLU networks.
    He { fan_in: usize },
    /// Uniform Glorot bound.
    Glorot { fan_in: usize, fan_out: usize },
}

impl Init {
    fn sample<T: Scalar, R: Rng>(self, rng: &mut R) -> T {
        let bound = match self {
            Init::Zeros => return T::zero(),
            Init::Ones => return T::one(),
            Init::He { fan_in } => (6.0 / ((1.0 + 0.01) * fan_in as f64)).sqrt(),
            Init::Glorot { fan_in, fan_out } => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        T::of(rng.gen_range(-bound..bound))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub partition: Partition,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Scalar = f32> {
    pub partition: Partition,
    pub tensor: Tensor<T>,
}

/// Named trainable tensors in construction order, each tagged with one
/// [`Partition`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterRegistry<T: Scalar = f32> {
    entries: IndexMap<String, Parameter<T>>,
}

impl<T: Scalar> Default for ParameterRegistry<T> {
    fn default() -> Self {
        ParameterRegistry { entries: IndexMap::new() }
    }
}

impl<T: Scalar> ParameterRegistry<T> {
    pub(crate) fn from_specs<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut reg = ParameterRegistry::default();
        for s in specs {
            let n: usize = s.shape.iter().product();
            let data = (0..n).map(|_| s.init.sample(rng)).collect();
            reg.insert(&s.name, s.partition, Tensor::new(s.shape.clone(), data)?)?;
        }
        Ok(reg)
    }

    pub fn insert(&mut self, name: &str, partition: Partition, tensor: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name.to_string(), Parameter { partition, tensor });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.entries.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn at(&self, index: usize) -> (&str, &Parameter<T>) {
        let (k, v) = self.entries.get_index(index).expect("index in range");
        (k.as_str(), v)
    }

    pub fn at_mut(&mut self, index: usize) -> (&str, &mut Parameter<T>) {
        let (k, v) = self.entries.get_index_mut(index).expect("index in range");
        (k.as_str(), v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    pub fn numel_in(&self, partition: Partition) -> usize {
        self.entries.values().filter(|p| p.partition == partition).map(|p| p.tensor.len()).sum()
    }

    /// Concatenated raw bytes of every tensor in a partition.
    pub fn partition_bytes(&self, partition: Partition) -> Vec<u8> {
        self.entries
            .values()
            .filter(|p| p.partition == partition)
            .flat_map(|p| p.tensor.data().iter().flat_map(|v| v.as_f64().to_le_bytes()))
            .collect()
    }

    /// Records every parameter as a graph leaf. Only parameters whose
    /// partition satisfies `trainable` request gradients.
    pub fn bind<'g>(&self, g: &'g Graph<T>, trainable: impl Fn(Partition) -> bool) -> Vec<Var<'g, T>> {
        self.entries
            .values()
            .map(|p| g.leaf(p.tensor.clone(), trainable(p.partition)))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterRegistry<U> {
        ParameterRegistry {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Parameter { partition: p.partition, tensor: p.tensor.cast() }))
                .collect(),
        }
    }
}
