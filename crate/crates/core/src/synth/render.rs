use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::stream;
use crate::voxel::VoxelGrid;

/// Half-width of the view window as a fraction of the grid extent.
pub const DEFAULT_SCALE: f64 = 0.5;
pub const MAX_ELEVATION_DEG: f64 = 30.0;

const ALBEDO: [f64; 3] = [0.95, 0.7, 0.45];
const AMBIENT: f64 = 0.4;
const LIGHT: [f64; 3] = [0.36, 0.8, 0.48];
const CAMERA_STREAM: u64 = 0xca3e;

/// Orthographic camera looking at the grid center, y up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub scale: f64,
}

impl Camera {
    /// Camera `view` of the sample with seed `seed`.
    pub fn for_view(seed: u64, view: usize) -> Self {
        let mut r = stream(&[seed, view as u64, CAMERA_STREAM]);
        Camera {
            azimuth_deg: r.gen_range(0.0..360.0),
            elevation_deg: r.gen_range(-MAX_ELEVATION_DEG..=MAX_ELEVATION_DEG),
            scale: DEFAULT_SCALE,
        }
    }

    /// Unit vectors: toward the camera, image right, image up.
    fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let (az, el) = (self.azimuth_deg.to_radians(), self.elevation_deg.to_radians());
        let back = [el.cos() * az.sin(), el.sin(), el.cos() * az.cos()];
        let right = normalize(cross([0.0, 1.0, 0.0], back));
        let up = cross(back, right);
        (back, right, up)
    }

    /// Ray through the center of pixel `(u, v)` (column, row from the top)
    /// of an `s × s` image of a `d³` grid.
    pub fn ray(&self, d: usize, s: usize, u: usize, v: usize) -> ([f64; 3], [f64; 3]) {
        let (back, right, up) = self.basis();
        let half = self.scale * d as f64;
        let px = ((u as f64 + 0.5) / s as f64 * 2.0 - 1.0) * half;
        let py = (1.0 - (v as f64 + 0.5) / s as f64 * 2.0) * half;
        let c = d as f64 / 2.0;
        let origin = [0, 1, 2].map(|i| c + back[i] * 2.0 * d as f64 + right[i] * px + up[i] * py);
        (origin, back.map(|x| -x))
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Entry and exit parameters of a ray through the box `[lo, hi]³`.
pub fn slab(origin: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64, usize)> {
    let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
    for i in 0..3 {
        if dir[i] == 0.0 {
            if origin[i] < lo[i] || origin[i] > hi[i] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[i] - origin[i]) / dir[i], (hi[i] - origin[i]) / dir[i]);
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        if near > t0 {
            t0 = near;
            axis = i;
        }
        t1 = t1.min(far);
    }
    (t0 <= t1 && t1 >= 0.0).then_some((t0, t1, axis))
}

/// First occupied voxel along the ray and the axis through which it was
/// entered, by 3D DDA traversal.
fn cast(grid: &VoxelGrid, origin: [f64; 3], dir: [f64; 3]) -> Option<([usize; 3], usize)> {
    let d = grid.dim();
    let (t0, t1, mut axis) = slab(origin, dir, [0.0; 3], [d as f64; 3])?;
    let p = [0, 1, 2].map(|i| origin[i] + dir[i] * t0);
    let mut cell = [0, 1, 2].map(|i| (p[i].floor() as isize).clamp(0, d as isize - 1));
    let step = dir.map(|x| if x > 0.0 { 1isize } else { -1 });
    let mut t_max = [0, 1, 2].map(|i| {
        if dir[i] == 0.0 {
            f64::INFINITY
        } else {
            let boundary = cell[i] as f64 + if step[i] > 0 { 1.0 } else { 0.0 };
            t0 + (boundary - p[i]) / dir[i]
        }
    });
    let t_delta = dir.map(|x| if x == 0.0 { f64::INFINITY } else { 1.0 / x.abs() });
    loop {
        if grid.occupied_at(cell[0], cell[1], cell[2]) {
            return Some((cell.map(|c| c as usize), axis));
        }
        axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if t_max[axis] > t1 {
            return None;
        }
        cell[axis] += step[axis];
        if cell[axis] < 0 || cell[axis] >= d as isize {
            return None;
        }
        t_max[axis] += t_delta[axis];
    }
}

/// Shaded orthographic rendering `[3, s, s]` on a white background.
pub fn render(grid: &VoxelGrid, cam: &Camera, s: usize) -> Result<Tensor<f32>> {
    if grid.occupied() == 0 {
        return Err(Error::Data("cannot render an empty grid".into()));
    }
    let light = normalize(LIGHT);
    let d = grid.dim();
    let mut img = Tensor::full([3, s, s], 1.0f32);
    for v in 0..s {
        for u in 0..s {
            let (origin, dir) = cam.ray(d, s, u, v);
            let Some((c, axis)) = cast(grid, origin, dir) else { continue };
            let occ = |dx: isize, dy: isize, dz: isize| {
                f64::from(u8::from(grid.occupied_at(c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz)))
            };
            let grad = [occ(1, 0, 0) - occ(-1, 0, 0), occ(0, 1, 0) - occ(0, -1, 0), occ(0, 0, 1) - occ(0, 0, -1)];
            let mut face = [0.0; 3];
            face[axis] = -dir[axis].signum();
            let len = dot(grad, grad).sqrt();
            let mut n = if len > 0.0 { grad.map(|g| -g / len) } else { face };
            if dot(n, dir) >= 0.0 {
                n = face;
            }
            let shade = AMBIENT + (1.0 - AMBIENT) * dot(n, light).max(0.0);
            for ch in 0..3 {
                img.data_mut()[(ch * s + v) * s + u] = (ALBEDO[ch] * shade).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(img)
}

/// Foreground mask of a rendering: any pixel that is not pure background.
pub fn silhouette(img: &Tensor<f32>) -> Vec<bool> {
    let s = img.shape()[1];
    let plane = s * s;
    (0..plane).map(|i| (0..3).any(|c| img.data()[c * plane + i] != 1.0)).collect()
}
