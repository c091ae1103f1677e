//! Multi-view voxel reconstruction: a shared image encoder, self-attention
//! fusion over the unordered view set, a 3D decoder and a 3D U-Net refiner,
//! trained in three phases that update disjoint parameter partitions.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod util;
pub mod voxel;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, Refine3dNet, ViewSet};
pub use tensor::{Scalar, Tensor};
pub use voxel::VoxelGrid;
