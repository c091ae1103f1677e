use super::{Init, ModelConfig, Mode, ParamSpec, Partition, RunningStats, LEAKY_SLOPE};
use crate::autodiff::{BatchStats, BnMode, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

type Trace = Vec<(String, Vec<usize>)>;

#[derive(Clone, Copy, Debug)]
pub(super) struct Conv {
    w: usize,
    b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    layer: usize,
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    conv1: Conv,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Head {
    q: usize,
    k: usize,
    v: usize,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    upsample: bool,
    conv1: Conv,
    conv2: Conv,
    skip: Conv,
}

#[derive(Clone, Debug)]
struct RefinerStage {
    conv: Conv,
    bn: Bn,
}

/// Parameter indices of every layer, in registry order.
#[derive(Clone, Debug, Default)]
pub(super) struct Layout {
    encoder: Vec<EncoderBlock>,
    fc: Option<Conv>,
    heads: Vec<Head>,
    w_o: usize,
    decoder: Vec<DecoderBlock>,
    decoder_head: Option<Conv>,
    refiner_down: Vec<RefinerStage>,
    refiner_up: Vec<RefinerStage>,
    refiner_head: Option<Conv>,
    bn: Vec<(String, usize)>,
}

impl Layout {
    pub(super) fn bn_layers(&self) -> impl Iterator<Item = (String, usize)> + '_ {
        self.bn.iter().cloned()
    }
}

struct Planner {
    specs: Vec<ParamSpec>,
    partition: Partition,
}

impl Planner {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, partition: self.partition, shape, init });
        self.specs.len() - 1
    }

    /// Weight `[out, in, k…]` (or `[in, out, k…]` when `transposed`) with
    /// He initialization and an optional zero bias.
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: &[usize], transposed: bool, bias: bool) -> Conv {
        let taps: usize = kernel.iter().product();
        let mut shape = if transposed { vec![c_in, c_out] } else { vec![c_out, c_in] };
        shape.extend_from_slice(kernel);
        let w = self.param(format!("{name}.weight"), shape, Init::He { fan_in: c_in * taps });
        let b = bias.then(|| self.param(format!("{name}.bias"), vec![c_out], Init::Zeros));
        Conv { w, b }
    }

    fn bn(&mut self, name: &str, channels: usize, layers: &mut Vec<(String, usize)>) -> Bn {
        let gamma = self.param(format!("{name}.gamma"), vec![channels], Init::Ones);
        let beta = self.param(format!("{name}.beta"), vec![channels], Init::Zeros);
        layers.push((name.to_string(), channels));
        Bn { gamma, beta, layer: layers.len() - 1 }
    }
}

/// The encoder block without an identity connection.
const PLAIN_ENCODER_BLOCK: usize = 3;

pub(super) fn plan(cfg: &ModelConfig) -> (Vec<ParamSpec>, Layout) {
    let mut p = Planner { specs: Vec::new(), partition: Partition::ThetaBase };
    let mut l = Layout::default();
    let (k2, k3, k1) = ([3, 3], [3, 3, 3], [1, 1, 1]);

    let mut c_in = 3;
    for (i, &c) in cfg.encoder_channels.iter().enumerate() {
        let name = format!("encoder.{i}");
        l.encoder.push(EncoderBlock {
            conv1: p.conv(&format!("{name}.conv1"), c_in, c, &k2, false, true),
            conv2: p.conv(&format!("{name}.conv2"), c, c, &k2, false, true),
            skip: (i != PLAIN_ENCODER_BLOCK).then(|| p.conv(&format!("{name}.skip"), c_in, c, &[1, 1], false, true)),
        });
        c_in = c;
    }
    let features = cfg.encoder_features();
    if features > 0 && cfg.latent_dim > 0 {
        let w = p.param("encoder.fc.weight".into(), vec![features, cfg.latent_dim], Init::He { fan_in: features });
        let b = p.param("encoder.fc.bias".into(), vec![cfg.latent_dim], Init::Zeros);
        l.fc = Some(Conv { w, b: Some(b) });
    }

    let latent = cfg.latent_dim;
    let dk = cfg.head_dim();

    // Decoder parameters belong to the base partition too but are created
    // after the attention block so that registry order follows data flow.
    p.partition = Partition::PhiAtt;
    if latent > 0 {
        for h in 0..cfg.heads {
            let glorot = Init::Glorot { fan_in: latent, fan_out: dk };
            l.heads.push(Head {
                q: p.param(format!("attention.head{h}.query"), vec![latent, dk], glorot),
                k: p.param(format!("attention.head{h}.key"), vec![latent, dk], glorot),
                v: p.param(format!("attention.head{h}.value"), vec![latent, dk], glorot),
            });
        }
        l.w_o = p.param("attention.output".into(), vec![latent, latent], Init::Zeros);
    }

    p.partition = Partition::ThetaBase;
    let ups = cfg.upsampling_stages();
    let mut c_in = cfg.seed_channels();
    for (i, &c) in cfg.decoder_channels.iter().enumerate() {
        let name = format!("decoder.{i}");
        let upsample = i < ups;
        l.decoder.push(DecoderBlock {
            upsample,
            conv1: p.conv(&format!("{name}.conv1"), c_in, c, &k3, upsample, true),
            conv2: p.conv(&format!("{name}.conv2"), c, c, &k3, false, true),
            skip: p.conv(&format!("{name}.skip"), c_in, c, &k1, false, true),
        });
        c_in = c;
    }
    if !cfg.decoder_channels.is_empty() {
        l.decoder_head = Some(p.conv("decoder.head", c_in, 1, &k1, false, true));
    }

    // Convolutions feeding a batch norm carry no bias: it would be cancelled
    // by the mean subtraction.
    p.partition = Partition::PhiRef;
    let r = &cfg.refiner_channels;
    let mut c_in = 1;
    for (i, &c) in r.iter().enumerate() {
        let name = format!("refiner.down{i}");
        let conv = p.conv(&format!("{name}.conv"), c_in, c, &[4, 4, 4], false, false);
        let bn = p.bn(&format!("{name}.bn"), c, &mut l.bn);
        l.refiner_down.push(RefinerStage { conv, bn });
        c_in = c;
    }
    let n = r.len();
    for j in 0..n {
        let c_out = if j + 1 < n { r[n - 2 - j] } else { r[0] };
        let name = format!("refiner.up{j}");
        let conv = p.conv(&format!("{name}.conv"), c_in, c_out, &[4, 4, 4], true, false);
        let bn = p.bn(&format!("{name}.bn"), c_out, &mut l.bn);
        l.refiner_up.push(RefinerStage { conv, bn });
        c_in = if j + 1 < n { 2 * c_out } else { c_out + 1 };
    }
    if n > 0 {
        l.refiner_head = Some(p.conv("refiner.head", c_in, 1, &k3, false, true));
    }
    (p.specs, l)
}

fn conv2d<'g, T: Scalar>(p: &[Var<'g, T>], c: Conv, x: Var<'g, T>, pad: usize) -> Result<Var<'g, T>> {
    x.conv2d(p[c.w], c.b.map(|b| p[b]), 1, pad)
}

fn conv3d<'g, T: Scalar>(p: &[Var<'g, T>], c: Conv, x: Var<'g, T>, pad: usize) -> Result<Var<'g, T>> {
    x.conv3d(p[c.w], c.b.map(|b| p[b]), 1, pad)
}

fn lrelu<T: Scalar>(x: Var<'_, T>) -> Var<'_, T> {
    x.leaky_relu(T::of(LEAKY_SLOPE))
}

fn graph_of<'g, T: Scalar>(p: &[Var<'g, T>]) -> Result<&'g Graph<T>> {
    p.first().map(|v| v.graph()).ok_or_else(|| Error::State("no parameters bound".into()))
}

pub(super) fn encode<'g, T: Scalar>(
    l: &Layout,
    cfg: &ModelConfig,
    p: &[Var<'g, T>],
    images: Var<'g, T>,
    trace: &mut Trace,
) -> Result<Var<'g, T>> {
    let s = images.shape();
    let want = cfg.input_size;
    if s.len() != 4 || s[1] != 3 || s[2] != want || s[3] != want {
        return Err(Error::dim("encode", format!("images {s:?}, expected [N, 3, {want}, {want}]")));
    }
    let mut x = images;
    for (i, b) in l.encoder.iter().enumerate() {
        let main = conv2d(p, b.conv2, lrelu(conv2d(p, b.conv1, x, 1)?), 1)?;
        let sum = match b.skip {
            Some(skip) => main.add(conv2d(p, skip, x, 0)?)?,
            None => main,
        };
        x = lrelu(sum).maxpool2d()?;
        trace.push((format!("encoder.{i}"), x.shape()));
    }
    let fc = l.fc.ok_or_else(|| Error::Config("encoder has no projection layer".into()))?;
    let n = x.shape()[0];
    let flat = x.reshape([n, cfg.encoder_features()])?;
    let z = lrelu(flat.matmul(p[fc.w])?.add_row(p[fc.b.unwrap()])?);
    trace.push(("encoder.latent".into(), z.shape()));
    Ok(z)
}

pub(super) fn attend<'g, T: Scalar>(
    l: &Layout,
    cfg: &ModelConfig,
    p: &[Var<'g, T>],
    tokens: Var<'g, T>,
    views: usize,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let s = tokens.shape();
    if views == 0 || s.first() == Some(&0) {
        return Err(Error::Empty("attention needs at least one view".into()));
    }
    if s.len() != 2 || s[1] != cfg.latent_dim || s[0] % views != 0 {
        return Err(Error::dim(
            "attend",
            format!("tokens {s:?} are not a whole number of {views}-view sets of length {}", cfg.latent_dim),
        ));
    }
    let g = graph_of(p)?;
    let batch = s[0] / views;
    let scale = T::of(1.0 / (cfg.head_dim() as f64).sqrt());
    let proj: Vec<_> = l
        .heads
        .iter()
        .map(|h| Ok((tokens.matmul(p[h.q])?, tokens.matmul(p[h.k])?, tokens.matmul(p[h.v])?)))
        .collect::<Result<_>>()?;
    let mut outs = Vec::with_capacity(batch);
    let mut fused = Vec::with_capacity(batch);
    for b in 0..batch {
        let rows = |v: Var<'g, T>| v.slice(0, b * views, views);
        let heads = proj
            .iter()
            .map(|&(q, k, v)| {
                let scores = rows(q)?.matmul(rows(k)?.transpose()?)?.scale(scale);
                scores.softmax().matmul(rows(v)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let x = rows(tokens)?;
        let out = x.add(g.concat(&heads, 1)?.matmul(p[l.w_o])?)?;
        fused.push(out.mean(0)?.reshape([1, cfg.latent_dim])?);
        outs.push(out);
    }
    Ok((g.concat(&outs, 0)?, g.concat(&fused, 0)?))
}

pub(super) fn decode<'g, T: Scalar>(
    l: &Layout,
    cfg: &ModelConfig,
    p: &[Var<'g, T>],
    latent: Var<'g, T>,
    trace: &mut Trace,
) -> Result<Var<'g, T>> {
    let s = latent.shape();
    if s.len() != 2 || s[1] != cfg.latent_dim {
        return Err(Error::dim("decode", format!("latent {s:?}, expected [B, {}]", cfg.latent_dim)));
    }
    if cfg.latent_dim % 8 != 0 {
        return Err(Error::Config(format!("latent_dim {} not divisible by 8", cfg.latent_dim)));
    }
    let mut x = latent.reshape([s[0], cfg.seed_channels(), 2, 2, 2])?;
    trace.push(("decoder.seed".into(), x.shape()));
    for (i, b) in l.decoder.iter().enumerate() {
        let (main, skip) = if b.upsample {
            let up = x.conv_transpose3d(p[b.conv1.w], b.conv1.b.map(|v| p[v]), 2, 1, 1)?;
            (conv3d(p, b.conv2, lrelu(up), 1)?, conv3d(p, b.skip, x.upsample3d()?, 0)?)
        } else {
            (conv3d(p, b.conv2, lrelu(conv3d(p, b.conv1, x, 1)?), 1)?, conv3d(p, b.skip, x, 0)?)
        };
        x = lrelu(main.add(skip)?);
        trace.push((format!("decoder.{i}"), x.shape()));
    }
    let head = l.decoder_head.ok_or_else(|| Error::Config("decoder has no stages".into()))?;
    let out = conv3d(p, head, x, 0)?.sigmoid();
    trace.push(("decoder.output".into(), out.shape()));
    Ok(out)
}

pub(super) fn refine<'g, T: Scalar>(
    l: &Layout,
    p: &[Var<'g, T>],
    running: &[RunningStats<T>],
    v: Var<'g, T>,
    mode: Mode,
    stats: &mut Vec<BatchStats<T>>,
    trace: &mut Trace,
) -> Result<Var<'g, T>> {
    let s = v.shape();
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::dim("refine", format!("volume {s:?}, expected [B, 1, D, D, D]")));
    }
    let g = graph_of(p)?;
    let mut norm = |x: Var<'g, T>, bn: Bn| -> Result<Var<'g, T>> {
        let r = &running[bn.layer];
        let m = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval { mean: &r.mean, var: &r.var },
        };
        let (y, st) = x.batch_norm(p[bn.gamma], p[bn.beta], m)?;
        stats.extend(st);
        Ok(y)
    };
    let mut skips = Vec::new();
    let mut x = v;
    for (i, st) in l.refiner_down.iter().enumerate() {
        let c = x.conv3d(p[st.conv.w], None, 1, 2)?;
        trace.push((format!("refiner.down{i}.conv"), c.shape()));
        x = lrelu(norm(c, st.bn)?).maxpool3d()?;
        trace.push((format!("refiner.down{i}.pool"), x.shape()));
        skips.push(x);
    }
    skips.pop();
    let n = l.refiner_up.len();
    for (j, st) in l.refiner_up.iter().enumerate() {
        let c = x.conv_transpose3d(p[st.conv.w], None, 2, 1, 0)?;
        trace.push((format!("refiner.up{j}"), c.shape()));
        x = norm(c, st.bn)?.relu();
        let skip = if j + 1 < n { skips.pop().unwrap() } else { v };
        if skip.shape()[2..] != x.shape()[2..] {
            return Err(Error::dim(
                "refine",
                format!("skip {:?} does not match upsampled {:?}", skip.shape(), x.shape()),
            ));
        }
        x = g.concat(&[x, skip], 1)?;
    }
    let head = l.refiner_head.ok_or_else(|| Error::Config("refiner has no stages".into()))?;
    let out = conv3d(p, head, x, 1)?.sigmoid();
    trace.push(("refiner.output".into(), out.shape()));
    Ok(out)
}
