//! Convolution, pooling and upsampling kernels over `[N, C, D, H, W]` buffers.
//!
//! 2D operations run through the same code with a depth extent of 1.
//! Convolutions lower to GEMM over column blocks of a fixed width, so every
//! output element is reduced in the same order regardless of how many worker
//! threads execute the per-sample loops.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Output positions lowered per GEMM call.
const COLUMN_BLOCK: usize = 512;

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub input: [usize; 3],
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        op: &'static str,
        n: usize,
        c_in: usize,
        input: [usize; 3],
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for d in 0..3 {
            if stride[d] == 0 || kernel[d] == 0 {
                return Err(Error::dim(op, "kernel and stride must be positive"));
            }
            let padded = input[d] + 2 * pad[d];
            if padded < kernel[d] {
                return Err(Error::dim(
                    op,
                    format!(
                        "kernel {:?} larger than padded input {:?} (pad {:?})",
                        kernel, input, pad
                    ),
                ));
            }
            output[d] = (padded - kernel[d]) / stride[d] + 1;
        }
        Ok(ConvGeom { n, c_in, input, c_out, kernel, stride, pad, output })
    }

    pub fn in_size(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_size(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the lowered column matrix: one per (input channel, kernel tap).
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kernel_size()
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.col_rows()
    }
}

/// A run of output positions sharing one output row: `(column of the first
/// position, oz, oy, ox range)`.
type Segment = (usize, usize, usize, std::ops::Range<usize>);

fn segments(g: &ConvGeom, p0: usize, len: usize) -> Vec<Segment> {
    let [_, oh, ow] = g.output;
    let mut segs = Vec::new();
    let mut p = p0;
    while p < p0 + len {
        let ox = p % ow;
        let end = (p - ox + ow).min(p0 + len);
        segs.push((p - p0, p / (oh * ow), (p / ow) % oh, ox..ox + (end - p)));
        p = end;
    }
    segs
}

/// Range of `o` in `range` with `0 <= o*stride + offset < extent`.
fn valid_range(range: &std::ops::Range<usize>, stride: usize, offset: isize, extent: usize) -> std::ops::Range<usize> {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi = if extent as isize - offset <= 0 { 0 } else { (extent as isize - offset + s - 1) / s };
    let lo = (lo as usize).max(range.start);
    let hi = (hi as usize).min(range.end);
    lo..hi.max(lo)
}

/// Visits every (column-row, column, input index) triple of a column block
/// whose receptive-field tap lands inside the input.
fn for_each_tap(g: &ConvGeom, p0: usize, len: usize, mut f: impl FnMut(usize, usize, usize)) {
    let segs = segments(g, p0, len);
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad.map(|v| v as isize);
    let vol = g.in_size();
    let mut row = 0;
    for c in 0..g.c_in {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    for (col0, oz, oy, oxs) in &segs {
                        let z = (oz * sd) as isize - pd + kz as isize;
                        let y = (oy * sh) as isize - ph + ky as isize;
                        if z < 0 || z >= id as isize || y < 0 || y >= ih as isize {
                            continue;
                        }
                        let off = kx as isize - pw;
                        let base = c * vol + (z as usize * ih + y as usize) * iw;
                        for ox in valid_range(oxs, sw, off, iw) {
                            let x = (ox * sw) as isize + off;
                            f(row, col0 + ox - oxs.start, base + x as usize);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, p0: usize, len: usize, cols: &mut [T]) {
    cols.fill(T::zero());
    for_each_tap(g, p0, len, |r, j, idx| cols[r * len + j] = x[idx]);
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, p0: usize, len: usize, dx: &mut [T]) {
    for_each_tap(g, p0, len, |r, j, idx| dx[idx] = dx[idx] + cols[r * len + j]);
}

/// Cross-correlation `y[n,k,p] = Σ w[k,c,t]·x[n,c,p+t] + b[k]`.
pub(crate) fn conv_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (isz, osz, rows) = (g.c_in * g.in_size(), g.c_out * g.out_size(), g.col_rows());
    let p_total = g.out_size();
    let mut out = vec![T::zero(); g.n * osz];
    if g.n == 0 || osz == 0 {
        return out;
    }
    out.par_chunks_mut(osz)
        .zip(x.par_chunks(isz))
        .for_each(|(out_n, x_n)| {
            let mut cols = vec![T::zero(); rows * COLUMN_BLOCK.min(p_total)];
            for p0 in (0..p_total).step_by(COLUMN_BLOCK) {
                let len = COLUMN_BLOCK.min(p_total - p0);
                let cols = &mut cols[..rows * len];
                im2col(x_n, g, p0, len, cols);
                // SAFETY: w is [c_out, rows], cols is [rows, len], and the
                // destination block spans rows of out_n with stride p_total.
                unsafe {
                    T::gemm(
                        g.c_out,
                        rows,
                        len,
                        w.as_ptr(),
                        rows as isize,
                        1,
                        cols.as_ptr(),
                        len as isize,
                        1,
                        T::zero(),
                        out_n.as_mut_ptr().add(p0),
                        p_total as isize,
                        1,
                    );
                }
            }
            if let Some(b) = bias {
                for (k, plane) in out_n.chunks_mut(p_total).enumerate() {
                    for v in plane {
                        *v = *v + b[k];
                    }
                }
            }
        });
    out
}

/// Adjoint of [`conv_forward`] with respect to its input.
pub(crate) fn conv_backward_input<T: Scalar>(dy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (isz, osz, rows) = (g.c_in * g.in_size(), g.c_out * g.out_size(), g.col_rows());
    let p_total = g.out_size();
    let mut dx = vec![T::zero(); g.n * isz];
    if g.n == 0 || isz == 0 {
        return dx;
    }
    dx.par_chunks_mut(isz)
        .zip(dy.par_chunks(osz))
        .for_each(|(dx_n, dy_n)| {
            let mut cols = vec![T::zero(); rows * COLUMN_BLOCK.min(p_total)];
            for p0 in (0..p_total).step_by(COLUMN_BLOCK) {
                let len = COLUMN_BLOCK.min(p_total - p0);
                let cols = &mut cols[..rows * len];
                // SAFETY: wᵀ is read as [rows, c_out] with strides (1, rows);
                // dy_n block is [c_out, len] with row stride p_total.
                unsafe {
                    T::gemm(
                        rows,
                        g.c_out,
                        len,
                        w.as_ptr(),
                        1,
                        rows as isize,
                        dy_n.as_ptr().add(p0),
                        p_total as isize,
                        1,
                        T::zero(),
                        cols.as_mut_ptr(),
                        len as isize,
                        1,
                    );
                }
                col2im_add(cols, g, p0, len, dx_n);
            }
        });
    dx
}

/// Adjoint of [`conv_forward`] with respect to its weight.
pub(crate) fn conv_backward_weight<T: Scalar>(dy: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let (isz, osz, rows) = (g.c_in * g.in_size(), g.c_out * g.out_size(), g.col_rows());
    let p_total = g.out_size();
    if g.n == 0 || osz == 0 {
        return vec![T::zero(); g.weight_len()];
    }
    let partials: Vec<Vec<T>> = dy
        .par_chunks(osz)
        .zip(x.par_chunks(isz))
        .map(|(dy_n, x_n)| {
            let mut dw = vec![T::zero(); g.weight_len()];
            let mut cols = vec![T::zero(); rows * COLUMN_BLOCK.min(p_total)];
            for p0 in (0..p_total).step_by(COLUMN_BLOCK) {
                let len = COLUMN_BLOCK.min(p_total - p0);
                let cols = &mut cols[..rows * len];
                im2col(x_n, g, p0, len, cols);
                // SAFETY: dy_n block is [c_out, len] (row stride p_total);
                // colsᵀ is read as [len, rows] with strides (1, len).
                unsafe {
                    T::gemm(
                        g.c_out,
                        len,
                        rows,
                        dy_n.as_ptr().add(p0),
                        p_total as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        len as isize,
                        T::one(),
                        dw.as_mut_ptr(),
                        rows as isize,
                        1,
                    );
                }
            }
            dw
        })
        .collect();
    let mut dw = vec![T::zero(); g.weight_len()];
    for part in &partials {
        for (a, &b) in dw.iter_mut().zip(part) {
            *a = *a + b;
        }
    }
    dw
}

/// Geometry of a window-2 max pool with stride 2 over `[N, C, D, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub input: [usize; 3],
    pub window: [usize; 3],
    pub output: [usize; 3],
}

impl PoolGeom {
    pub fn new(op: &'static str, n: usize, c: usize, input: [usize; 3], window: [usize; 3]) -> Result<Self> {
        let mut output = [0; 3];
        for d in 0..3 {
            if input[d] < window[d] {
                return Err(Error::dim(
                    op,
                    format!("extent {:?} smaller than window {:?}", input, window),
                ));
            }
            output[d] = input[d] / window[d];
        }
        Ok(PoolGeom { n, c, input, window, output })
    }
}

/// Returns pooled values and, per output element, the flat input index of
/// the first maximum in window scan order.
pub(crate) fn maxpool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<u32>) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [wd, wh, ww] = g.window;
    let in_vol = id * ih * iw;
    let out_len = g.n * g.c * od * oh * ow;
    let mut vals = Vec::with_capacity(out_len);
    let mut arg = Vec::with_capacity(out_len);
    for plane in 0..g.n * g.c {
        let base = plane * in_vol;
        for z in 0..od {
            for y in 0..oh {
                for x0 in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for dz in 0..wd {
                        for dy in 0..wh {
                            for dx in 0..ww {
                                let idx = base
                                    + ((z * wd + dz) * ih + (y * wh + dy)) * iw
                                    + (x0 * ww + dx);
                                let v = x[idx];
                                if best_idx == usize::MAX || v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    vals.push(best);
                    arg.push(best_idx as u32);
                }
            }
        }
    }
    (vals, arg)
}

/// Nearest-neighbour upsampling by 2 along all three spatial axes.
pub(crate) fn upsample2_forward<T: Scalar>(x: &[T], planes: usize, input: [usize; 3]) -> Vec<T> {
    let [d, h, w] = input;
    let mut out = Vec::with_capacity(planes * 8 * d * h * w);
    for p in 0..planes {
        let base = p * d * h * w;
        for z in 0..2 * d {
            for y in 0..2 * h {
                for x0 in 0..2 * w {
                    out.push(x[base + ((z / 2) * h + y / 2) * w + x0 / 2]);
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(dy: &[T], planes: usize, input: [usize; 3]) -> Vec<T> {
    let [d, h, w] = input;
    let mut dx = vec![T::zero(); planes * d * h * w];
    let mut i = 0;
    for p in 0..planes {
        let base = p * d * h * w;
        for z in 0..2 * d {
            for y in 0..2 * h {
                for x0 in 0..2 * w {
                    let idx = base + ((z / 2) * h + y / 2) * w + x0 / 2;
                    dx[idx] = dx[idx] + dy[i];
                    i += 1;
                }
            }
        }
    }
    dx
}
