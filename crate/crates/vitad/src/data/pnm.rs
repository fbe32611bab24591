//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Raw 8-bit image, channel-interleaved as stored in the file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    /// Planar `[C, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, hw) = (self.channels, self.height * self.width);
        let mut data = vec![0.0f32; c * hw];
        for (p, px) in self.pixels.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[ch * hw + p] = f32::from(v) / 255.0;
            }
        }
        Tensor::new([c, self.height, self.width], data).expect("decoded extents are nonzero")
    }

    /// Quantizes a `[C, H, W]` or `[H, W]` tensor on `[0, 1]`; values are
    /// clamped and rounded to the nearest level.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [h, w] => (1, h, w),
            [c, h, w] if c == 1 || c == 3 => (c, h, w),
            ref s => return Err(Error::Format(format!("cannot store a tensor of shape {s:?} as PNM"))),
        };
        let hw = h * w;
        let mut pixels = vec![0u8; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                pixels[p * c + ch] = (t.data()[ch * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            pixels,
        })
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("PNM header: bad {what} at byte {start}")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<RawImage> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("not a binary PNM: magic must be P5 or P6".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("PNM has empty extent {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("PNM maxval {maxval} unsupported; only 255 is accepted")));
    }
    // Exactly one whitespace byte separates the header from the samples.
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format(format!("PNM header not terminated at byte {}", h.pos)));
    }
    let start = h.pos + 1;
    let len = channels * width * height;
    let payload = bytes.get(start..start + len).ok_or_else(|| {
        Error::Format(format!(
            "PNM payload truncated: need {len} bytes from offset {start}, file has {}",
            bytes.len()
        ))
    })?;
    Ok(RawImage {
        channels,
        height,
        width,
        pixels: payload.to_vec(),
    })
}

pub fn encode_pnm(img: &RawImage) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Format(format!("PNM cannot hold {c} channels"))),
    };
    if img.pixels.len() != img.channels * img.height * img.width {
        return Err(Error::Format("pixel buffer does not match image extents".into()));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    Ok(out)
}
