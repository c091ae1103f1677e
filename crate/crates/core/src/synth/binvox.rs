//! binvox v1: a text header followed by run-length `(value, count)` byte
//! pairs. Voxels are ordered with x outermost, then z, then y fastest.

use std::path::Path;

use crate::error::{Error, Result};
use crate::util::write_atomic;
use crate::voxel::VoxelGrid;

pub fn encode_binvox(grid: &VoxelGrid) -> Vec<u8> {
    let d = grid.dim();
    let mut out = format!("#binvox 1\ndim {d} {d} {d}\ntranslate 0 0 0\nscale 1\ndata\n").into_bytes();
    let mut run: Option<(u8, u8)> = None;
    for x in 0..d {
        for z in 0..d {
            for y in 0..d {
                let v = u8::from(grid.get(x, y, z) > 0.5);
                run = match run {
                    Some((rv, n)) if rv == v && n < 255 => Some((rv, n + 1)),
                    Some((rv, n)) => {
                        out.extend([rv, n]);
                        Some((v, 1))
                    }
                    None => Some((v, 1)),
                };
            }
        }
    }
    if let Some((rv, n)) = run {
        out.extend([rv, n]);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<(usize, &'a str)> {
        let start = self.pos;
        let rest = &self.bytes[start..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::format(start, "unterminated header line"))?;
        self.pos += end + 1;
        let text = std::str::from_utf8(&rest[..end]).map_err(|_| Error::format(start, "header is not UTF-8"))?;
        Ok((start, text.trim_end_matches('\r')))
    }
}

pub fn decode_binvox(bytes: &[u8]) -> Result<VoxelGrid> {
    let mut c = Cursor { bytes, pos: 0 };
    let (off, magic) = c.line()?;
    if magic != "#binvox 1" {
        return Err(Error::format(off, format!("bad magic `{magic}`")));
    }
    let mut dim = None;
    loop {
        let (off, line) = c.line()?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("dim") => {
                let v: Vec<usize> = it
                    .map(|t| t.parse().map_err(|_| Error::format(off, format!("bad dim value `{t}`"))))
                    .collect::<Result<_>>()?;
                if v.len() != 3 || v[0] != v[1] || v[1] != v[2] || v[0] == 0 {
                    return Err(Error::format(off, format!("dim mismatch: `{line}` (need a non-empty cube)")));
                }
                dim = Some(v[0]);
            }
            Some("translate") | Some("scale") => {}
            Some("data") => break,
            _ => return Err(Error::format(off, format!("unexpected header line `{line}`"))),
        }
    }
    let d = dim.ok_or_else(|| Error::format(c.pos, "missing dim line"))?;
    let total = d * d * d;
    let mut values = vec![0.0f32; total];
    let mut filled = 0usize;
    let mut pos = c.pos;
    while filled < total {
        if pos + 2 > bytes.len() {
            return Err(Error::format(pos, format!("payload truncated after {filled} of {total} voxels")));
        }
        let (v, n) = (bytes[pos], bytes[pos + 1] as usize);
        if v > 1 {
            return Err(Error::format(pos, format!("run value {v} is not 0 or 1")));
        }
        if n == 0 {
            return Err(Error::format(pos + 1, "zero-length run"));
        }
        if filled + n > total {
            return Err(Error::format(pos, format!("run of {n} overruns {total} voxels")));
        }
        for i in filled..filled + n {
            // File order i = (x·d + z)·d + y.
            let (x, z, y) = (i / (d * d), (i / d) % d, i % d);
            values[(x * d + y) * d + z] = f32::from(v);
        }
        filled += n;
        pos += 2;
    }
    if pos != bytes.len() {
        return Err(Error::format(pos, "trailing bytes after voxel data"));
    }
    VoxelGrid::new(d, values)
}

pub fn write_binvox(grid: &VoxelGrid, path: &Path) -> Result<()> {
    write_atomic(path, &encode_binvox(grid))
}

pub fn read_binvox(path: &Path) -> Result<VoxelGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_binvox(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format { offset, msg: format!("{}: {msg}", path.display()) },
        other => other,
    })
}
