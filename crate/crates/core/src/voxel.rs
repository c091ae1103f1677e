use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Cubic occupancy grid, `D×D×D`, stored with `z` fastest: `(x·D + y)·D + z`.
///
/// Values are probabilities in `[0, 1]`, or exactly `0`/`1` for binary grids.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    dim: usize,
    values: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != dim * dim * dim {
            return Err(Error::dim(
                "voxel grid",
                format!("{dim}³ grid needs {} values, got {}", dim * dim * dim, values.len()),
            ));
        }
        Ok(VoxelGrid { dim, values })
    }

    pub fn zeros(dim: usize) -> Self {
        VoxelGrid { dim, values: vec![0.0; dim * dim * dim] }
    }

    pub fn full(dim: usize, value: f32) -> Self {
        VoxelGrid { dim, values: vec![value; dim * dim * dim] }
    }

    /// Takes the values of a `[.., D, D, D]` tensor holding a single volume.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let dim = *s.last().ok_or_else(|| Error::dim("voxel grid", "rank-0 tensor"))?;
        Self::new(dim, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    pub fn to_tensor<T: Scalar>(&self, shape: &[usize]) -> Result<Tensor<T>> {
        Tensor::new(shape.to_vec(), self.values.iter().map(|&v| T::of(v as f64)).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dim + y) * self.dim + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.values[i] = v;
    }

    /// Occupancy at a signed coordinate; outside the grid reads as empty.
    pub fn occupied_at(&self, x: isize, y: isize, z: isize) -> bool {
        let d = self.dim as isize;
        if x < 0 || y < 0 || z < 0 || x >= d || y >= d || z >= d {
            return false;
        }
        self.get(x as usize, y as usize, z as usize) > 0.5
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn occupied(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }
}
