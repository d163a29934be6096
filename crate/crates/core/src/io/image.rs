//! Binary PPM (P6) and PGM (P5) images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded image, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Always 3; grey images are replicated.
    pub data: Vec<f32>,
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| parse_err(start, format!("{what} is out of range")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(parse_err(0, "expected P6 or P5 magic")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(maxval_at, "image has zero extent"));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(parse_err(maxval_at, format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(parse_err(h.pos, "expected whitespace after maxval")),
    }
    let sample_bytes = if maxval > 255 { 2 } else { 1 };
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| parse_err(maxval_at, "image dimensions overflow"))?;
    let raster = &bytes[h.pos..];
    if raster.len() < count * sample_bytes {
        return Err(parse_err(
            bytes.len(),
            format!("raster truncated: need {} bytes, found {}", count * sample_bytes, raster.len()),
        ));
    }
    let sample = |i: usize| -> f32 {
        let v = if sample_bytes == 2 {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as usize
        } else {
            raster[i] as usize
        };
        v.min(maxval) as f32 / maxval as f32
    };
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = sample(p * channels + c.min(channels - 1));
        }
    }
    Ok(Image { width, height, data })
}

/// Writes a P6 image with maxval 255 from channel-major `[0, 1]` data.
pub fn encode_ppm(width: usize, height: usize, data: &[f32]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    let plane = width * height;
    for p in 0..plane {
        for c in 0..3 {
            out.push((data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

impl Image {
    /// Bilinear resize with half-pixel centres, edge-clamped.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let (sw, sh) = (self.width, self.height);
        let src_plane = sw * sh;
        let mut data = vec![0.0; 3 * width * height];
        let coord = |o: usize, out: usize, src: usize| -> (usize, usize, f32) {
            let x = ((o as f32 + 0.5) * src as f32 / out as f32 - 0.5).max(0.0);
            let x0 = (x.floor() as usize).min(src - 1);
            let x1 = (x0 + 1).min(src - 1);
            (x0, x1, x - x0 as f32)
        };
        for y in 0..height {
            let (y0, y1, fy) = coord(y, height, sh);
            for x in 0..width {
                let (x0, x1, fx) = coord(x, width, sw);
                for c in 0..3 {
                    let p = &self.data[c * src_plane..(c + 1) * src_plane];
                    let top = p[y0 * sw + x0] * (1.0 - fx) + p[y0 * sw + x1] * fx;
                    let bottom = p[y1 * sw + x0] * (1.0 - fx) + p[y1 * sw + x1] * fx;
                    data[c * width * height + y * width + x] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        Image { width, height, data }
    }

    /// `[1, 3, H, W]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.clone()).expect("image shape")
    }
}

/// Reads a PPM or PGM file and resizes it to `size × size`.
pub fn load_image(path: impl AsRef<Path>, size: usize) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_pnm(&bytes)?.resize(size, size).to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grey_replicates_and_scales() {
        let img = decode_pnm(b"P5\n# c\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(img.data, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_samples() {
        let img = decode_pnm(b"P5 1 1 1000\n\x01\xf4").unwrap();
        assert!((img.data[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn round_trip_ppm() {
        let data: Vec<f32> = (0..12).map(|i| i as f32 / 255.0).collect();
        let img = decode_pnm(&encode_ppm(2, 2, &data)).unwrap();
        assert_eq!(img.data, data);
    }

    #[test]
    fn errors_carry_offsets() {
        match decode_pnm(b"P6\n2 x\n255\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_pnm(b"P3\n"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode_pnm(b"P6 2 2 255\n\x00"), Err(Error::Parse { .. })));
    }

    #[test]
    fn resize_constant_and_identity() {
        let img = Image { width: 3, height: 2, data: vec![0.25; 18] };
        let r = img.resize(7, 5);
        assert!(r.data.iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert_eq!(img.resize(3, 2), img);
    }
}
