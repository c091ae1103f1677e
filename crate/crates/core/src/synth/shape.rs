use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::stream;
use crate::voxel::VoxelGrid;

/// Minimum and maximum occupied fraction of a generated grid.
pub const MIN_OCCUPANCY: f64 = 0.02;
pub const MAX_OCCUPANCY: f64 = 0.60;
const MAX_ATTEMPTS: u64 = 32;
const SHAPE_STREAM: u64 = 0x5a4e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Sphere,
    Box,
    Cylinder,
    Union2,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Sphere, Category::Box, Category::Cylinder, Category::Union2];

    pub fn name(self) -> &'static str {
        match self {
            Category::Sphere => "sphere",
            Category::Box => "box",
            Category::Cylinder => "cylinder",
            Category::Union2 => "union2",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown category `{s}`")))
    }
}

/// An analytic solid in voxel units. A voxel is inside when its center is.
#[derive(Clone, Debug, PartialEq)]
pub enum Solid {
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box covering `[min, min + size)` on each axis.
    Box { min: [f64; 3], size: [f64; 3] },
    /// Cylinder around an axis (0 = x, 1 = y, 2 = z).
    Cylinder { center: [f64; 3], radius: f64, half_height: f64, axis: usize },
    Union(Vec<Solid>),
}

impl Solid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Solid::Sphere { center, radius } => (0..3).map(|i| (p[i] - center[i]).powi(2)).sum::<f64>() <= radius * radius,
            Solid::Box { min, size } => (0..3).all(|i| p[i] >= min[i] && p[i] < min[i] + size[i]),
            Solid::Cylinder { center, radius, half_height, axis } => {
                let r2: f64 = (0..3).filter(|i| i != axis).map(|i| (p[i] - center[i]).powi(2)).sum();
                r2 <= radius * radius && (p[*axis] - center[*axis]).abs() <= *half_height
            }
            Solid::Union(parts) => parts.iter().any(|s| s.contains(p)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub category: Category,
    pub solid: Solid,
    pub seed: u64,
}

impl ShapeSpec {
    /// Draws the solid for `(category, seed, attempt)` in a grid of extent `d`.
    pub fn random(category: Category, seed: u64, attempt: u64, d: usize) -> Self {
        let mut r = stream(&[seed, attempt, SHAPE_STREAM]);
        let d = d as f64;
        let mid = d / 2.0;
        let jitter = |r: &mut rand_chacha::ChaCha8Rng, slack: f64| -> [f64; 3] {
            let s = slack.max(0.0);
            [0, 1, 2].map(|_| mid + if s > 0.0 { r.gen_range(-s..s) } else { 0.0 })
        };
        let solid = match category {
            Category::Sphere => {
                let radius = r.gen_range(0.22 * d..0.38 * d);
                Solid::Sphere { center: jitter(&mut r, mid - radius - 1.5), radius }
            }
            Category::Box => {
                let size = [0, 1, 2].map(|_| r.gen_range((0.3 * d).round() as usize..=(0.7 * d).round() as usize) as f64);
                let min = [0, 1, 2].map(|i| {
                    let free = d as usize - size[i] as usize - 2;
                    (1 + r.gen_range(0..=free)) as f64
                });
                Solid::Box { min, size }
            }
            Category::Cylinder => {
                let radius = r.gen_range(0.15 * d..0.3 * d);
                let half_height = r.gen_range(0.2 * d..0.4 * d);
                let axis = r.gen_range(0..3);
                let mut center = jitter(&mut r, mid - radius - 1.5);
                center[axis] = mid + r.gen_range(-1.0..1.0) * (mid - half_height - 1.5).max(0.0);
                Solid::Cylinder { center, radius, half_height, axis }
            }
            Category::Union2 => {
                let a = r.gen_range(0.15 * d..0.25 * d);
                let b = r.gen_range(0.15 * d..0.25 * d);
                let dir: [f64; 3] = {
                    let v = [0, 1, 2].map(|_| r.gen_range(-1.0..1.0f64));
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                    v.map(|x| x / n)
                };
                let sep = 0.6 * (a + b);
                let c1 = [0, 1, 2].map(|i| mid + dir[i] * sep * b / (a + b));
                let c2 = [0, 1, 2].map(|i| mid - dir[i] * sep * a / (a + b));
                let half = [b, b, b].map(|x| x * 0.85);
                let cube_min = [0, 1, 2].map(|i| (c2[i] - half[i]).round());
                Solid::Union(vec![
                    Solid::Sphere { center: c1, radius: a },
                    Solid::Box { min: cube_min, size: half.map(|h| (2.0 * h).round().max(1.0)) },
                ])
            }
        };
        ShapeSpec { category, solid, seed }
    }
}

/// Voxelizes `spec` into a `d³` binary grid, checking occupancy bounds and the
/// one-voxel empty margin.
pub fn gen_shape(spec: &ShapeSpec, d: usize) -> Result<VoxelGrid> {
    if d < 4 {
        return Err(Error::Config(format!("grid extent {d} too small")));
    }
    let mut grid = VoxelGrid::zeros(d);
    for x in 0..d {
        for y in 0..d {
            for z in 0..d {
                if spec.solid.contains([x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]) {
                    grid.set(x, y, z, 1.0);
                }
            }
        }
    }
    let frac = grid.occupied() as f64 / grid.len() as f64;
    if !(MIN_OCCUPANCY..=MAX_OCCUPANCY).contains(&frac) {
        return Err(Error::Data(format!("{} occupies {:.1}% of the grid", spec.category, frac * 100.0)));
    }
    let edge = |i: usize| i == 0 || i == d - 1;
    for x in 0..d {
        for y in 0..d {
            for z in 0..d {
                if (edge(x) || edge(y) || edge(z)) && grid.get(x, y, z) > 0.5 {
                    return Err(Error::Data(format!("{} touches the grid boundary", spec.category)));
                }
            }
        }
    }
    Ok(grid)
}

/// Draws and voxelizes a shape, retrying with fresh parameters when the
/// occupancy or margin constraints fail.
pub fn generate(category: Category, seed: u64, d: usize) -> Result<(ShapeSpec, VoxelGrid)> {
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let spec = ShapeSpec::random(category, seed, attempt, d);
        match gen_shape(&spec, d) {
            Ok(g) => return Ok((spec, g)),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Data(format!(
        "no valid {category} after {MAX_ATTEMPTS} attempts (seed {seed}): {}",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}
