//! Binary PGM/PPM codecs and 8-bit image preprocessing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losslog::write_atomic;
use crate::tensor::Tensor;

/// 8-bit image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::Channels {
                expected: 1,
                found: channels,
            });
        }
        if width == 0 || height == 0 || pixels.len() != width * height * channels {
            return Err(Error::BadHeader(format!(
                "{width}x{height}x{channels} does not match {} pixel bytes",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.pixels[i..i + self.channels]
    }
}

/// Parses a binary P5 (gray) or P6 (RGB) image with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageU8> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(m) => {
            return Err(Error::UnsupportedFormat(
                String::from_utf8_lossy(m).into_owned(),
            ))
        }
        None => {
            return Err(Error::UnsupportedFormat(
                String::from_utf8_lossy(bytes).into_owned(),
            ))
        }
    };
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // Whitespace and comments may separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::BadHeader(format!(
                "expected a number at byte {start}"
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::BadHeader(format!("number out of range at byte {start}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::BadHeader("missing whitespace after maxval".into())),
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    if w == 0 || h == 0 {
        return Err(Error::BadHeader(format!("zero dimension {w}x{h}")));
    }
    let expected = w as usize * h as usize * channels;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::TruncatedImage {
            expected,
            found: payload.len(),
        });
    }
    ImageU8::new(
        w as usize,
        h as usize,
        channels,
        payload[..expected].to_vec(),
    )
}

/// P5 for one channel, P6 for three.
pub fn encode_pnm(img: &ImageU8) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn load_pgm_ppm(path: &Path) -> Result<ImageU8> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

pub fn save_pgm(img: &ImageU8, path: &Path) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::Channels {
            expected: 1,
            found: img.channels,
        });
    }
    write_atomic(path, &encode_pnm(img))
}

pub fn save_ppm(img: &ImageU8, path: &Path) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::Channels {
            expected: 3,
            found: img.channels,
        });
    }
    write_atomic(path, &encode_pnm(img))
}

/// Rec. 601 luma, rounded half away from zero. Integer weights in
/// thousandths keep ties exact.
pub fn to_grayscale(img: &ImageU8) -> Result<ImageU8> {
    if img.channels != 3 {
        return Err(Error::Channels {
            expected: 3,
            found: img.channels,
        });
    }
    let pixels = img
        .pixels
        .chunks_exact(3)
        .map(|p| luma(p[0], p[1], p[2]))
        .collect();
    ImageU8::new(img.width, img.height, 1, pixels)
}

#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 299 * r as u32 + 587 * g as u32 + 114 * b as u32;
    ((y + 500) / 1000).min(255) as u8
}

/// Nearest-neighbor resampling with `src = floor(dst * src_len / dst_len)`.
pub fn resize_nearest(img: &ImageU8, out_w: usize, out_h: usize) -> Result<ImageU8> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Precondition(format!(
            "resize target {out_w}x{out_h} is empty"
        )));
    }
    let c = img.channels;
    let mut pixels = Vec::with_capacity(out_w * out_h * c);
    for y in 0..out_h {
        let sy = y * img.height / out_h;
        for x in 0..out_w {
            let sx = x * img.width / out_w;
            pixels.extend_from_slice(img.pixel(sx, sy));
        }
    }
    ImageU8::new(out_w, out_h, c, pixels)
}

/// Gray image to a `(1, H, W)` tensor with values `v / 255`.
pub fn normalize(img: &ImageU8) -> Result<Tensor<f32>> {
    if img.channels != 1 {
        return Err(Error::Channels {
            expected: 1,
            found: img.channels,
        });
    }
    Tensor::new(
        vec![1, img.height, img.width],
        img.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )
}

/// Inverse of [`normalize`]: scales by 255, rounds half away from zero and
/// clamps to the byte range. NaN maps to 0.
pub fn denormalize(t: &Tensor<f32>) -> Result<ImageU8> {
    let (h, w) = match *t.shape() {
        [1, h, w] | [h, w] => (h, w),
        _ => {
            return Err(Error::Shape {
                op: "denormalize",
                lhs: t.shape().to_vec(),
                rhs: vec![1, 0, 0],
            })
        }
    };
    let pixels = t
        .data()
        .iter()
        .map(|&v| {
            let v = v as f64 * 255.0;
            if v.is_nan() {
                0
            } else {
                v.round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    ImageU8::new(w, h, 1, pixels)
}
