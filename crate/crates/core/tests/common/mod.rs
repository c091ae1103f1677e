//! Shared by the integration suites: reference implementations that never
//! call into the engine's kernels, plus gradient-check fixtures.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refine3d::autodiff::{relative_error, BnMode};
use refine3d::model::{Mode, ModelConfig, Refine3dNet};
use refine3d::{Graph, Tensor, Var, ViewSet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
}

/// Random values kept at least `gap` away from zero, so piecewise-linear
/// activations are differentiable within a finite-difference step.
pub fn random_away_from_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = r.gen_range(gap..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

pub fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                c[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    c
}

/// Direct-sum 3D cross-correlation. `x` is [N,C,D,H,W], `w` is [K,C,kd,kh,kw].
#[allow(clippy::too_many_arguments)]
pub fn conv3d_oracle(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [n, c, d, h, wd] = xs;
    let [k, _, kd, kh, kw] = ws;
    let od = (d + 2 * pad[0] - kd) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let mut out = vec![0.0; n * k * od * oh * ow];
    for s in 0..n {
        for o in 0..k {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[o]);
                        for ci in 0..c {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let iz = (z * stride[0] + a) as isize - pad[0] as isize;
                                        let iy = (y * stride[1] + bb) as isize - pad[1] as isize;
                                        let ix = (xx * stride[2] + cc) as isize - pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((s * c + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((o * c + ci) * kd + a) * kh + bb) * kw + cc;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[(((s * k + o) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (out, [n, k, od, oh, ow])
}

/// Direct scatter form of the transposed 3D convolution, weight [Cin,Cout,k,k,k].
pub fn conv_transpose3d_oracle(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [n, cin, d, h, wd] = xs;
    let [_, cout, k, _, _] = ws;
    let ext = |i: usize| (i - 1) * stride + k + output_padding - 2 * pad;
    let (od, oh, ow) = (ext(d), ext(h), ext(wd));
    let mut out = vec![0.0; n * cout * od * oh * ow];
    for s in 0..n {
        for ci in 0..cin {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let v = x[(((s * cin + ci) * d + z) * h + y) * wd + xx];
                        for co in 0..cout {
                            for a in 0..k {
                                for b in 0..k {
                                    for c in 0..k {
                                        let oz = (z * stride + a) as isize - pad as isize;
                                        let oy = (y * stride + b) as isize - pad as isize;
                                        let ox = (xx * stride + c) as isize - pad as isize;
                                        if oz < 0 || oy < 0 || ox < 0 || oz >= od as isize || oy >= oh as isize || ox >= ow as isize {
                                            continue;
                                        }
                                        let wi = (((ci * cout + co) * k + a) * k + b) * k + c;
                                        let oi = (((s * cout + co) * od + oz as usize) * oh + oy as usize) * ow + ox as usize;
                                        out[oi] += v * w[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [n, cout, od, oh, ow])
}

/// Two-pass per-channel batch normalization over `[N, C, plane]`.
pub fn batchnorm_oracle(x: &[f64], n: usize, c: usize, plane: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|s| x[(s * c + ch) * plane..(s * c + ch + 1) * plane].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        for s in 0..n {
            for i in 0..plane {
                let idx = (s * c + ch) * plane + i;
                out[idx] = gamma[ch] * (x[idx] - mean) / (var + 1e-5).sqrt() + beta[ch];
            }
        }
    }
    out
}

/// Literal loop transcription of multi-head scaled dot-product
/// self-attention with a residual and mean over tokens.
///
/// `x` is [N, d], per-head projections are [d, dk], `wo` is [d, d].
/// Returns (output tokens [N, d], fused [d]).
pub fn attention_oracle(
    x: &[f64],
    n: usize,
    d: usize,
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
    wo: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let h = wq.len();
    let dk = d / h;
    let proj = |w: &[f64], t: usize, j: usize| -> f64 { (0..d).map(|i| x[t * d + i] * w[i * dk + j]).sum() };
    let mut concat = vec![0.0; n * d];
    for head in 0..h {
        for t in 0..n {
            let mut scores = vec![0.0; n];
            for u in 0..n {
                let mut dot = 0.0;
                for j in 0..dk {
                    dot += proj(&wq[head], t, j) * proj(&wk[head], u, j);
                }
                scores[u] = dot / (dk as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..dk {
                let mut acc = 0.0;
                for u in 0..n {
                    acc += exps[u] / z * proj(&wv[head], u, j);
                }
                concat[t * d + head * dk + j] = acc;
            }
        }
    }
    let mut tokens = vec![0.0; n * d];
    for t in 0..n {
        for j in 0..d {
            let mut acc = x[t * d + j];
            for i in 0..d {
                acc += concat[t * d + i] * wo[i * d + j];
            }
            tokens[t * d + j] = acc;
        }
    }
    let fused = (0..d).map(|j| (0..n).map(|t| tokens[t * d + j]).sum::<f64>() / n as f64).collect();
    (tokens, fused)
}

/// Voxel cross-entropy by direct summation with clipping at `eps`.
pub fn bce_oracle(p: &[f64], gt: &[f64], eps: f64) -> f64 {
    let mut acc = 0.0;
    for (&pv, &g) in p.iter().zip(gt) {
        let q = pv.clamp(eps, 1.0 - eps);
        acc += g * q.ln() + (1.0 - g) * (1.0 - q).ln();
    }
    -acc / p.len() as f64
}

/// IoU by explicit coordinate sets.
pub fn iou_oracle(pred: &[f32], gt: &[f32], t: f32) -> f64 {
    use std::collections::BTreeSet;
    let p: BTreeSet<usize> = pred.iter().enumerate().filter(|(_, &v)| v > t).map(|(i, _)| i).collect();
    let g: BTreeSet<usize> = gt.iter().enumerate().filter(|(_, &v)| v > 0.5).map(|(i, _)| i).collect();
    let inter = p.intersection(&g).count();
    let union = p.union(&g).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}


pub type ScalarFn = Box<dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> refine3d::Result<Var<'g, f64>>>;

pub struct GradCase {
    pub name: String,
    pub input: Tensor<f64>,
    pub f: ScalarFn,
}

/// Weighted sum with fixed random weights, so every output coordinate gets a
/// distinct upstream gradient.
fn probe<'g>(g: &'g Graph<f64>, y: Var<'g, f64>, seed: u64) -> refine3d::Result<Var<'g, f64>> {
    let w = g.constant(random_tensor(&y.shape(), seed ^ 0xabcd));
    Ok(y.mul(w)?.sum())
}

fn case(name: &str, seed: u64, shape_idx: usize, input: Tensor<f64>, f: ScalarFn) -> GradCase {
    GradCase { name: format!("{name}/shape{shape_idx}/seed{seed}"), input, f }
}

/// Every differentiable operation, differentiated with respect to each of its
/// tensor operands, over 5 seeds and 2 shapes.
pub fn op_grad_cases() -> Vec<GradCase> {
    let mut cases = Vec::new();
    for seed in 0..5u64 {
        for (si, &(m, k, n)) in [(3usize, 4usize, 2usize), (2, 5, 3)].iter().enumerate() {
            let b = random_tensor(&[k, n], seed + 100);
            cases.push(case("matmul.lhs", seed, si, random_tensor(&[m, k], seed), Box::new(move |g, x| {
                let y = x.matmul(g.constant(b.clone()))?;
                probe(g, y, seed)
            })));
            let a = random_tensor(&[m, k], seed + 200);
            cases.push(case("matmul.rhs", seed, si, random_tensor(&[k, n], seed), Box::new(move |g, x| {
                let y = g.constant(a.clone()).matmul(x)?;
                probe(g, y, seed)
            })));
            cases.push(case("transpose", seed, si, random_tensor(&[m, k], seed), Box::new(move |g, x| probe(g, x.transpose()?, seed))));
            let other = random_tensor(&[m, k], seed + 300);
            let o2 = other.clone();
            cases.push(case("add", seed, si, random_tensor(&[m, k], seed), Box::new(move |g, x| {
                let y = x.add(g.constant(o2.clone()))?.add(x)?;
                probe(g, y, seed)
            })));
            let row = random_tensor(&[k], seed + 400);
            cases.push(case("add_row.x", seed, si, random_tensor(&[m, k], seed), Box::new(move |g, x| {
                let y = x.add_row(g.constant(row.clone()))?;
                probe(g, y, seed)
            })));
            let base = random_tensor(&[m, k], seed + 500);
            cases.push(case("add_row.bias", seed, si, random_tensor(&[k], seed), Box::new(move |g, x| {
                let y = g.constant(base.clone()).add_row(x)?;
                probe(g, y, seed)
            })));
            cases.push(case("mul", seed, si, random_tensor(&[m, k], seed), Box::new(move |g, x| {
                let y = x.mul(g.constant(other.clone()))?.mul(x)?;
                probe(g, y, seed)
            })));
            cases.push(case("scale", seed, si, random_tensor(&[m, k], seed), Box::new(move |g, x| probe(g, x.scale(-1.75), seed))));
            cases.push(case("leaky_relu", seed, si, random_away_from_zero(&[m, k], seed, 0.01), Box::new(move |g, x| probe(g, x.leaky_relu(0.1), seed))));
            cases.push(case("relu", seed, si, random_away_from_zero(&[m, k], seed, 0.01), Box::new(move |g, x| probe(g, x.relu(), seed))));
            cases.push(case("sigmoid", seed, si, random_tensor(&[m, k], seed).cast::<f64>(), Box::new(move |g, x| probe(g, x.scale(3.0).sigmoid(), seed))));
            cases.push(case("softmax", seed, si, random_tensor(&[m, k], seed), Box::new(move |g, x| probe(g, x.scale(2.0).softmax(), seed))));
            cases.push(case("reshape", seed, si, random_tensor(&[m, k], seed), Box::new(move |g, x| probe(g, x.reshape([k, m])?, seed))));
            let extra = random_tensor(&[m, 2], seed + 600);
            cases.push(case("concat", seed, si, random_tensor(&[m, k], seed), Box::new(move |g, x| {
                let y = g.concat(&[g.constant(extra.clone()), x, x], 1)?;
                probe(g, y, seed)
            })));
            cases.push(case("slice", seed, si, random_tensor(&[m, k], seed), Box::new(move |g, x| probe(g, x.slice(1, 1, k - 2)?, seed))));
            cases.push(case("mean", seed, si, random_tensor(&[m, k, 2], seed), Box::new(move |g, x| probe(g, x.mean(1)?, seed))));
            cases.push(case("sum", seed, si, random_tensor(&[m, k], seed), Box::new(move |_, x| Ok(x.mul(x)?.sum()))));
        }

        // Spatial operations.
        let conv2d_shapes = [([1usize, 2, 5, 5], [3usize, 2, 3, 3], 2usize, 1usize), ([2, 1, 4, 6], [2, 1, 2, 3], 1, 0)];
        for (si, &(xs, ws, stride, pad)) in conv2d_shapes.iter().enumerate() {
            let w = random_tensor(&ws, seed + 10);
            let bias = random_tensor(&[ws[0]], seed + 11);
            let (w1, b1) = (w.clone(), bias.clone());
            cases.push(case("conv2d.x", seed, si, random_tensor(&xs, seed), Box::new(move |g, x| {
                let y = x.conv2d(g.constant(w1.clone()), Some(g.constant(b1.clone())), stride, pad)?;
                probe(g, y, seed)
            })));
            let input = random_tensor(&xs, seed + 12);
            let (i2, b2) = (input.clone(), bias.clone());
            cases.push(case("conv2d.w", seed, si, random_tensor(&ws, seed), Box::new(move |g, wv| {
                let y = g.constant(i2.clone()).conv2d(wv, Some(g.constant(b2.clone())), stride, pad)?;
                probe(g, y, seed)
            })));
            cases.push(case("conv2d.bias", seed, si, random_tensor(&[ws[0]], seed), Box::new(move |g, b| {
                let y = g.constant(input.clone()).conv2d(g.constant(w.clone()), Some(b), stride, pad)?;
                probe(g, y, seed)
            })));
            let pool_in = [[1usize, 2, 4, 4], [2, 1, 5, 3]][si];
            cases.push(case("maxpool2d", seed, si, random_tensor(&pool_in, seed), Box::new(move |g, x| probe(g, x.maxpool2d()?, seed))));
        }
        let conv3d_shapes = [([1usize, 2, 4, 4, 4], [2usize, 2, 3, 3, 3], 1usize, 1usize), ([2, 1, 3, 4, 5], [2, 1, 4, 4, 4], 2, 2)];
        for (si, &(xs, ws, stride, pad)) in conv3d_shapes.iter().enumerate() {
            let w = random_tensor(&ws, seed + 20);
            let bias = random_tensor(&[ws[0]], seed + 21);
            let (w1, b1) = (w.clone(), bias.clone());
            cases.push(case("conv3d.x", seed, si, random_tensor(&xs, seed), Box::new(move |g, x| {
                let y = x.conv3d(g.constant(w1.clone()), Some(g.constant(b1.clone())), stride, pad)?;
                probe(g, y, seed)
            })));
            let input = random_tensor(&xs, seed + 22);
            let i2 = input.clone();
            cases.push(case("conv3d.w", seed, si, random_tensor(&ws, seed), Box::new(move |g, wv| {
                let y = g.constant(i2.clone()).conv3d(wv, None, stride, pad)?;
                probe(g, y, seed)
            })));
            cases.push(case("conv3d.bias", seed, si, random_tensor(&[ws[0]], seed), Box::new(move |g, b| {
                let y = g.constant(input.clone()).conv3d(g.constant(w.clone()), Some(b), stride, pad)?;
                probe(g, y, seed)
            })));
            let pool_in = [[1usize, 2, 4, 4, 4], [1, 1, 5, 3, 4]][si];
            cases.push(case("maxpool3d", seed, si, random_tensor(&pool_in, seed), Box::new(move |g, x| probe(g, x.maxpool3d()?, seed))));
            let up_in = [[1usize, 2, 2, 2, 2], [2, 1, 1, 2, 3]][si];
            cases.push(case("upsample3d", seed, si, random_tensor(&up_in, seed), Box::new(move |g, x| probe(g, x.upsample3d()?, seed))));
        }
        let tconv_shapes = [([1usize, 2, 2, 2, 2], [2usize, 3, 4, 4, 4], 2usize, 1usize, 0usize), ([2, 1, 2, 3, 2], [1, 2, 3, 3, 3], 2, 1, 1)];
        for (si, &(xs, ws, stride, pad, op)) in tconv_shapes.iter().enumerate() {
            let w = random_tensor(&ws, seed + 30);
            let bias = random_tensor(&[ws[1]], seed + 31);
            let (w1, b1) = (w.clone(), bias.clone());
            cases.push(case("conv_transpose3d.x", seed, si, random_tensor(&xs, seed), Box::new(move |g, x| {
                let y = x.conv_transpose3d(g.constant(w1.clone()), Some(g.constant(b1.clone())), stride, pad, op)?;
                probe(g, y, seed)
            })));
            let input = random_tensor(&xs, seed + 32);
            let i2 = input.clone();
            cases.push(case("conv_transpose3d.w", seed, si, random_tensor(&ws, seed), Box::new(move |g, wv| {
                let y = g.constant(i2.clone()).conv_transpose3d(wv, None, stride, pad, op)?;
                probe(g, y, seed)
            })));
            cases.push(case("conv_transpose3d.bias", seed, si, random_tensor(&[ws[1]], seed), Box::new(move |g, b| {
                let y = g.constant(input.clone()).conv_transpose3d(g.constant(w.clone()), Some(b), stride, pad, op)?;
                probe(g, y, seed)
            })));
        }
        for (si, xs) in [&[3usize, 2, 4][..], &[2, 3, 2, 2, 2][..]].into_iter().enumerate() {
            let c = xs[1];
            let gamma = random_tensor(&[c], seed + 40);
            let beta = random_tensor(&[c], seed + 41);
            let (g1, b1) = (gamma.clone(), beta.clone());
            cases.push(case("batchnorm.train.x", seed, si, random_tensor(xs, seed), Box::new(move |g, x| {
                let (y, _) = x.batch_norm(g.constant(g1.clone()), g.constant(b1.clone()), BnMode::Train)?;
                probe(g, y, seed)
            })));
            let input = random_tensor(xs, seed + 42);
            let (i2, b2) = (input.clone(), beta.clone());
            cases.push(case("batchnorm.train.gamma", seed, si, random_tensor(&[c], seed), Box::new(move |g, gm| {
                let (y, _) = g.constant(i2.clone()).batch_norm(gm, g.constant(b2.clone()), BnMode::Train)?;
                probe(g, y, seed)
            })));
            let (i3, g3) = (input.clone(), gamma.clone());
            cases.push(case("batchnorm.train.beta", seed, si, random_tensor(&[c], seed), Box::new(move |g, bt| {
                let (y, _) = g.constant(i3.clone()).batch_norm(g.constant(g3.clone()), bt, BnMode::Train)?;
                probe(g, y, seed)
            })));
            let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
            let var: Vec<f64> = (0..c).map(|i| 0.5 + 0.25 * i as f64).collect();
            cases.push(case("batchnorm.eval.x", seed, si, random_tensor(xs, seed), Box::new(move |g, x| {
                let (y, _) = x.batch_norm(g.constant(gamma.clone()), g.constant(beta.clone()), BnMode::Eval { mean: &mean, var: &var })?;
                probe(g, y, seed)
            })));
        }
        for (si, shape) in [[4usize, 4, 4], [2, 3, 5]].iter().enumerate() {
            let mut r = rng(seed + 50);
            let target = Tensor::from_fn(shape.to_vec(), |_| if r.gen_bool(0.4) { 1.0 } else { 0.0 });
            let mut r2 = rng(seed + 51);
            let p = Tensor::from_fn(shape.to_vec(), |_| r2.gen_range(0.05..0.95));
            cases.push(case("bce", seed, si, p, Box::new(move |_, x| x.bce(&target, 1e-7))));
        }
    }
    cases
}


pub fn randomize<T: refine3d::Scalar>(net: &mut Refine3dNet<T>, name: &str, seed: u64, scale: f64) {
    let p = net.params_mut().get_mut(name).unwrap();
    let mut r = rng(seed);
    p.tensor.data_mut().iter_mut().for_each(|v| *v = T::of(r.gen_range(-scale..scale)));
}

pub fn random_views(n: usize, size: usize, seed: u64) -> ViewSet {
    let mut r = rng(seed);
    ViewSet::new((0..n).map(|_| Tensor::from_fn([3, size, size], |_| r.gen::<f32>())).collect()).unwrap()
}

/// Central differences on four coordinates of every parameter tensor of a
/// 64-bit desk model against backprop of the mean of both losses. Returns
/// the worst relative error, where it occurred, and the coordinate count.
pub fn end_to_end_grad_error(seed: u64) -> (f64, String, usize) {
    let mut net = Refine3dNet::<f64>::new(ModelConfig::desk(), seed).unwrap();
    randomize(&mut net, "attention.output", seed + 1, 0.1);
    let views = 2;
    let mut r = rng(seed + 2);
    let images = Tensor::<f64>::from_fn([views, 3, 32, 32], |_| r.gen());
    let target = Tensor::<f64>::from_fn([1, 1, 16, 16, 16], |_| f64::from(u8::from(r.gen_bool(0.3))));

    let loss = |net: &Refine3dNet<f64>| -> (f64, Vec<Option<Tensor<f64>>>) {
        let g = Graph::new();
        let p = net.bind(&g, |_| true);
        let out = net.forward(&p, g.constant(images.clone()), views, Mode::Train).unwrap();
        let lp = out.decoded.bce(&target, 1e-7).unwrap();
        let lr = out.refined.bce(&target, 1e-7).unwrap();
        let lm = lp.add(lr).unwrap().scale(0.5);
        let value = lm.value().item();
        let mut grads = g.backward(lm).unwrap();
        (value, p.iter().map(|v| grads.take(*v)).collect())
    };
    let (_, grads) = loss(&net);

    let mut picks = Vec::new();
    let mut r = rng(seed + 3);
    for i in 0..net.params().len() {
        let n = net.params().at(i).1.tensor.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut r);
        picks.extend(idx.into_iter().take(4).map(|j| (i, j)));
    }

    // eps 1e-6 drowns the smallest refiner gradients in roundoff
    let eps = 1e-5;
    let mut worst = (0.0, String::new());
    for &(i, j) in &picks {
        let orig = net.params().at(i).1.tensor.data()[j];
        net.params_mut().at_mut(i).1.tensor.data_mut()[j] = orig + eps;
        let up = loss(&net).0;
        net.params_mut().at_mut(i).1.tensor.data_mut()[j] = orig - eps;
        let down = loss(&net).0;
        net.params_mut().at_mut(i).1.tensor.data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads[i].as_ref().map_or(0.0, |t| t.data()[j]);
        let e = relative_error(analytic, numeric);
        if e > worst.0 {
            worst = (e, format!("{}[{j}]: analytic {analytic:e} numeric {numeric:e}", net.params().at(i).0));
        }
    }
    (worst.0, worst.1, picks.len())
}
