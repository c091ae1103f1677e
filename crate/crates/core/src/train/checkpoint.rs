//! Binary checkpoint: magic `R3DN`, u32 version, preset name, u32 tensor
//! count, then per tensor a name, a tag byte (0–2 = parameter partition,
//! 3 = optimizer and trainer state), rank, u32 dims and f32 data, all
//! little-endian. Integers are stored as four 16-bit chunks, each exact in
//! an f32.

use std::path::Path;

use super::adam::{Adam, AdamSlot};
use super::{ConvergenceMonitor, TrainState};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterRegistry, Partition, Refine3dNet, RunningStats};
use crate::tensor::Tensor;
use crate::util::write_atomic;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"R3DN";
const OPTIMIZER_TAG: u8 = 3;
const STATE_TENSOR: &str = "trainer.state";

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Refine3dNet<f32>,
    pub adam: Adam<f32>,
    pub state: TrainState,
}

fn chunks(v: u64) -> [f32; 4] {
    [48, 32, 16, 0].map(|s| ((v >> s) & 0xffff) as f32)
}

fn unchunk(c: &[f32]) -> Option<u64> {
    c.iter().try_fold(0u64, |acc, &x| {
        (x >= 0.0 && x <= 65535.0 && x.fract() == 0.0).then(|| (acc << 16) | x as u64)
    })
}

struct Writer {
    buf: Vec<u8>,
    count: u32,
}

impl Writer {
    fn tensor(&mut self, name: &str, tag: u8, shape: &[usize], data: &[f32]) {
        self.buf.extend((name.len() as u32).to_le_bytes());
        self.buf.extend(name.as_bytes());
        self.buf.push(tag);
        self.buf.push(shape.len() as u8);
        for &d in shape {
            self.buf.extend((d as u32).to_le_bytes());
        }
        for v in data {
            self.buf.extend(v.to_le_bytes());
        }
        self.count += 1;
    }

    fn ints(&mut self, name: &str, values: &[u64]) {
        let data: Vec<f32> = values.iter().flat_map(|&v| chunks(v)).collect();
        self.tensor(name, OPTIMIZER_TAG, &[data.len()], &data);
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new(), count: 0 };
    let params = ck.model.params();
    for (name, p) in params.iter() {
        w.tensor(name, p.partition.tag(), p.tensor.shape(), p.tensor.data());
    }
    for r in ck.model.running_stats() {
        let tag = Partition::PhiRef.tag();
        w.tensor(&format!("{}.running_mean", r.name), tag, &[r.mean.len()], &r.mean);
        w.tensor(&format!("{}.running_var", r.name), tag, &[r.var.len()], &r.var);
    }
    for ((name, p), slot) in params.iter().zip(ck.adam.slots()) {
        w.tensor(&format!("adam.{name}.m"), OPTIMIZER_TAG, p.tensor.shape(), &slot.m);
        w.tensor(&format!("adam.{name}.v"), OPTIMIZER_TAG, p.tensor.shape(), &slot.v);
        w.ints(&format!("adam.{name}.t"), &[slot.t]);
    }
    let s = &ck.state;
    w.ints(
        STATE_TENSOR,
        &[
            u64::from(s.completed),
            u64::from(s.phase),
            s.phase_step,
            s.phase_samples,
            s.global_step,
            s.samples_seen,
            s.epoch,
            s.seed,
            s.monitor.best.to_bits(),
            u64::from(s.monitor.stale),
            u64::from(s.monitor.patience),
            s.monitor.min_delta.to_bits(),
        ],
    );
    let preset = &ck.model.config().name;
    let mut out = Vec::with_capacity(w.buf.len() + 16 + preset.len());
    out.extend(MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend((preset.len() as u32).to_le_bytes());
    out.extend(preset.as_bytes());
    out.extend(w.count.to_le_bytes());
    out.extend(w.buf);
    out
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }
}

struct Entry {
    name: String,
    tag: u8,
    tensor: Tensor<f32>,
    offset: usize,
}

/// Parses a checkpoint and checks it against its preset. Nothing outside
/// the returned value is touched.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { b: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let preset = r.string("preset name")?;
    let count = r.u32("tensor count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let offset = r.pos;
        let name = r.string("tensor name")?;
        let tag = r.u8("tag")?;
        if tag > OPTIMIZER_TAG {
            return Err(Error::format(r.pos - 1, format!("bad tag {tag} for `{name}`")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n.checked_mul(4).is_some());
        let n = n.ok_or_else(|| Error::format(offset, format!("tensor `{name}` is too large")))?;
        let raw = r.take(n * 4, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::format(offset, e.to_string()))?;
        entries.push(Entry { name, tag, tensor, offset });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes"));
    }
    assemble(&preset, entries)
}

fn assemble(preset: &str, entries: Vec<Entry>) -> Result<Checkpoint> {
    let config = ModelConfig::preset(preset)?;
    let mut params = ParameterRegistry::default();
    let mut running: Vec<RunningStats<f32>> = Vec::new();
    let mut moments: Vec<(String, Vec<f32>, Vec<f32>)> = Vec::new();
    let mut steps: Vec<u64> = Vec::new();
    let mut state_ints = None;
    for e in entries {
        let bad = |m: String| Error::format(e.offset, m);
        if e.tag < OPTIMIZER_TAG {
            if let Some(base) = e.name.strip_suffix(".running_mean") {
                running.push(RunningStats { name: base.to_string(), mean: e.tensor.into_data(), var: Vec::new() });
            } else if let Some(base) = e.name.strip_suffix(".running_var") {
                match running.last_mut() {
                    Some(r) if r.name == base && r.var.is_empty() => r.var = e.tensor.into_data(),
                    _ => return Err(bad(format!("`{}` without its running mean", e.name))),
                }
            } else {
                let part = Partition::from_tag(e.tag).unwrap();
                params.insert(&e.name, part, e.tensor).map_err(|x| bad(x.to_string()))?;
            }
            continue;
        }
        let ints = |t: &Tensor<f32>| -> Result<Vec<u64>> {
            t.data().chunks(4).map(|c| unchunk(c).filter(|_| c.len() == 4).ok_or_else(|| bad(format!("`{}` is not an integer encoding", e.name)))).collect()
        };
        if e.name == STATE_TENSOR {
            state_ints = Some(ints(&e.tensor)?);
        } else if let Some(rest) = e.name.strip_prefix("adam.") {
            if let Some(p) = rest.strip_suffix(".m") {
                moments.push((p.to_string(), e.tensor.into_data(), Vec::new()));
            } else if let Some(p) = rest.strip_suffix(".v") {
                match moments.last_mut() {
                    Some(m) if m.0 == p && m.2.is_empty() => m.2 = e.tensor.into_data(),
                    _ => return Err(bad(format!("`{}` out of order", e.name))),
                }
            } else if let Some(p) = rest.strip_suffix(".t") {
                let v = ints(&e.tensor)?;
                if v.len() != 1 || moments.last().map(|m| m.0.as_str()) != Some(p) {
                    return Err(bad(format!("`{}` out of order", e.name)));
                }
                steps.push(v[0]);
            } else {
                return Err(bad(format!("unknown optimizer tensor `{}`", e.name)));
            }
        } else {
            return Err(bad(format!("unknown tensor `{}`", e.name)));
        }
    }
    let model = Refine3dNet::from_parts(config, params, running)?;
    if moments.len() != model.params().len() || steps.len() != moments.len() {
        return Err(Error::Config("optimizer state does not cover every parameter".into()));
    }
    for ((name, _), m) in model.params().iter().zip(&moments) {
        if name != m.0 {
            return Err(Error::Config(format!("optimizer state for `{}` where `{name}` was expected", m.0)));
        }
    }
    let slots = moments.into_iter().zip(steps).map(|((_, m, v), t)| AdamSlot { m, v, t }).collect();
    let adam = Adam::from_slots(model.params(), slots)?;
    let s = state_ints.ok_or_else(|| Error::Config("checkpoint has no trainer state".into()))?;
    if s.len() != 12 || s[0] > 3 || s[1] > 3 || s[9] > u64::from(u32::MAX) || s[10] > u64::from(u32::MAX) {
        return Err(Error::Config("malformed trainer state".into()));
    }
    let state = TrainState {
        completed: s[0] as u8,
        phase: s[1] as u8,
        phase_step: s[2],
        phase_samples: s[3],
        global_step: s[4],
        samples_seen: s[5],
        epoch: s[6],
        seed: s[7],
        monitor: ConvergenceMonitor {
            best: f64::from_bits(s[8]),
            stale: s[9] as u32,
            patience: s[10] as u32,
            min_delta: f64::from_bits(s[11]),
        },
    };
    Ok(Checkpoint { model, adam, state })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
