//! Portable float map reader/writer.
//!
//! Header is `PF` (3 channels) or `Pf` (1 channel), then `<width> <height>`,
//! then a scale whose sign gives the byte order (negative = little-endian).
//! Rows are stored bottom-to-top; in memory they are top-to-bottom and the
//! channels of a pixel stay interleaved.

use std::fs;
use std::path::Path;

use super::DataError;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Interleaved samples, row-major, top row first.
    pub data: Vec<f32>,
}

impl PfmImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if channels != 1 && channels != 3 {
            return Err(DataError::Pfm(format!("{channels} channels; PFM holds 1 or 3")));
        }
        if data.len() != width * height * channels {
            return Err(DataError::Pfm(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(PfmImage {
            width,
            height,
            channels,
            data,
        })
    }

    /// Planar `1×c×h×w` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(Shape::new(1, c, h, w), |i| {
            let ch = i / (h * w);
            let p = i % (h * w);
            self.data[p * c + ch]
        })
    }

    /// From a planar `1×c×h×w` tensor with `c ∈ {1, 3}`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self, DataError> {
        let s = t.shape();
        if s.n != 1 {
            return Err(DataError::Pfm(format!("cannot store batch of {} as one image", s.n)));
        }
        let mut data = vec![0.0; t.len()];
        for ch in 0..s.c {
            for (p, &v) in t.plane(0, ch).iter().enumerate() {
                data[p * s.c + ch] = v;
            }
        }
        PfmImage::new(s.w, s.h, s.c, data)
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str, DataError> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(DataError::Pfm("unexpected end of header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| DataError::Pfm("header is not ASCII".into()))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<PfmImage, DataError> {
    let mut pos = 0;
    let channels = match next_token(bytes, &mut pos)? {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(DataError::Pfm(format!("bad magic '{other}', expected PF or Pf"))),
    };
    let parse_dim = |tok: &str, what: &str| -> Result<usize, DataError> {
        tok.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| DataError::Pfm(format!("bad {what} '{tok}'")))
    };
    let width = parse_dim(next_token(bytes, &mut pos)?, "width")?;
    let height = parse_dim(next_token(bytes, &mut pos)?, "height")?;
    let scale_tok = next_token(bytes, &mut pos)?;
    let scale: f32 = scale_tok
        .parse()
        .ok()
        .filter(|s: &f32| s.is_finite() && *s != 0.0)
        .ok_or_else(|| DataError::Pfm(format!("bad scale '{scale_tok}'")))?;
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(DataError::Pfm("missing newline after scale".into()));
    }
    pos += 1;
    let little = scale < 0.0;
    let count = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < count * 4 {
        return Err(DataError::Truncated {
            expected: count * 4,
            actual: payload.len(),
        });
    }
    let row = width * channels;
    let mut data = vec![0.0f32; count];
    for (i, chunk) in payload[..count * 4].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        if v.is_nan() {
            let (fy, x) = (i / row, i % row);
            return Err(DataError::Pfm(format!(
                "NaN sample at row {} column {} channel {}",
                height - 1 - fy,
                x / channels,
                x % channels
            )));
        }
        let y = height - 1 - i / row;
        data[y * row + i % row] = v;
    }
    PfmImage::new(width, height, channels, data)
}

/// Little-endian encoding with scale `-1.0`.
pub fn encode_pfm(img: &PfmImage) -> Vec<u8> {
    let magic = if img.channels == 3 { "PF" } else { "Pf" };
    let header = format!("{magic}\n{} {}\n-1.0\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len() * 4);
    out.extend_from_slice(header.as_bytes());
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<PfmImage, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_pfm(&bytes).map_err(|e| e.at(path))
}

pub fn write_pfm(path: impl AsRef<Path>, img: &PfmImage) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, encode_pfm(img)).map_err(|e| DataError::io(path, e))
}
