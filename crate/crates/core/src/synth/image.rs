//! 8-bit RGB PNG codec for `[3, H, W]` images with values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::write_atomic;

pub fn encode_png(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("png", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            rgb.push((img.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Data(format!("png encode: {e}")))?;
        writer.write_image_data(&rgb).map_err(|e| Error::Data(format!("png encode: {e}")))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |e: png::DecodingError| Error::format(0, format!("malformed png: {e}"));
    let mut reader = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::format(0, "png too large"))?];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.bit_depth != png::BitDepth::Eight || info.color_type != png::ColorType::Rgb {
        return Err(Error::format(
            0,
            format!("expected 8-bit RGB, found {:?} {:?}", info.bit_depth, info.color_type),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = f32::from(buf[i * 3 + c]) / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

pub fn write_png(img: &Tensor<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format { offset, msg: format!("{}: {msg}", path.display()) },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_square_round_trips() {
        let img = Tensor::full([3, 32, 32], 1.0f32);
        let bytes = encode_png(&img).unwrap();
        assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
        assert_eq!(decode_png(&bytes).unwrap(), img);
    }

    #[test]
    fn garbage_is_a_format_error() {
        assert!(matches!(decode_png(b"not a png"), Err(Error::Format { .. })));
    }
}
