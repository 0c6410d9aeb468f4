//! Binary PPM (P6), PGM (P5) and raw `WTEN` tensor files.

use std::fs;
use std::path::Path;

use crate::{Error, Real, Result, Tensor};

pub const WTEN_MAGIC: &[u8; 4] = b"WTEN";

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let inv = T::one() / T::of(255.0);
        Tensor::new(
            &[self.height, self.width, 3],
            self.pixels.iter().map(|&p| T::of(p as f64) * inv).collect(),
        )
        .expect("pixel buffer matches dimensions")
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

fn skip_ws_and_comments(buf: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_number(buf: &[u8], pos: &mut usize, path: &Path, what: &str) -> Result<usize> {
    *pos = skip_ws_and_comments(buf, *pos);
    let start = *pos;
    while *pos < buf.len() && buf[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&buf[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, format!("bad {what} in header")))
}

/// Parses a P6 file with maxval 255.
pub fn decode_ppm(buf: &[u8], path: &Path) -> Result<RgbImage> {
    if buf.len() < 2 || &buf[..2] != b"P6" {
        return Err(Error::format(path, "not a binary PPM (P6)"));
    }
    let mut pos = 2;
    let width = header_number(buf, &mut pos, path, "width")?;
    let height = header_number(buf, &mut pos, path, "height")?;
    let maxval = header_number(buf, &mut pos, path, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval {maxval}, only 255 is supported")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero image dimension"));
    }
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "missing separator after header"));
    }
    pos += 1;
    let need = width * height * 3;
    if buf.len() - pos != need {
        return Err(Error::format(
            path,
            format!("expected {need} pixel bytes, found {}", buf.len() - pos),
        ));
    }
    Ok(RgbImage {
        width,
        height,
        pixels: buf[pos..].to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&buf, path)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, img.encode_ppm()).map_err(|e| Error::io(path, e))
}

/// 8-bit grayscale P5.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_wten<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = WTEN_MAGIC.to_vec();
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_wten<T: Real>(buf: &[u8], path: &Path) -> Result<Tensor<T>> {
    let bad = |m: &str| Error::format(path, m.to_string());
    if buf.len() < 8 || &buf[..4] != WTEN_MAGIC {
        return Err(bad("missing WTEN magic"));
    }
    let word = |i: usize| -> Result<usize> {
        buf.get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| bad("truncated header"))
    };
    let rank = word(4)?;
    if rank == 0 || rank > 8 {
        return Err(bad("implausible rank"));
    }
    let shape = (0..rank).map(|i| word(8 + 4 * i)).collect::<Result<Vec<_>>>()?;
    let start = 8 + 4 * rank;
    let count: usize = shape.iter().product();
    if buf.len() != start + 4 * count {
        return Err(bad("payload length does not match dimensions"));
    }
    let data = buf[start..]
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Tensor::new(&shape, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Nearest-neighbour resize of `[H, W, C]`.
pub fn resize_nearest<T: Real>(img: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if (h, w) == (height, width) {
        return img.clone();
    }
    let mut out = Vec::with_capacity(height * width * c);
    for y in 0..height {
        let sy = y * h / height;
        for x in 0..width {
            let sx = x * w / width;
            let o = (sy * w + sx) * c;
            out.extend_from_slice(&img.data()[o..o + c]);
        }
    }
    Tensor::new(&[height, width, c], out).expect("resize shape")
}
