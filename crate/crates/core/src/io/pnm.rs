//! Binary 8-bit PGM (`P5`, one channel) and PPM (`P6`, three channels).
//!
//! Byte `v` maps to `v / 255`; writing maps `x` to `floor(255·x + 0.5)`
//! clamped to `[0, 255]`, so 8-bit images round-trip exactly.

use std::fs;
use std::path::Path;

use eadnet_tensor::Tensor;

use crate::error::{Error, Result};

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Header tokenizer that skips whitespace and `#` comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn token(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        let tok = self
            .token()
            .ok_or_else(|| format!("header ends before {what}"))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("invalid {what} {:?}", String::from_utf8_lossy(tok)))
    }
}

/// Decodes an in-memory P5/P6 image to `[C,H,W]` in `[0,1]`. `path` is only
/// used in error messages.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let mut h = Header { bytes, pos: 0 };
    let channels = match h.token() {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(m) => {
            return Err(bad(
                path,
                format!(
                    "unsupported magic {:?} (expected P5 or P6)",
                    String::from_utf8_lossy(m)
                ),
            ))
        }
        None => return Err(bad(path, "empty file")),
    };
    let width = h.number("width").map_err(|e| bad(path, e))?;
    let height = h.number("height").map_err(|e| bad(path, e))?;
    let maxval = h.number("maxval").map_err(|e| bad(path, e))?;
    if width == 0 || height == 0 {
        return Err(bad(path, format!("invalid size {width}x{height}")));
    }
    if maxval != 255 {
        return Err(bad(
            path,
            format!("only 8-bit images with maxval 255 are supported, got {maxval}"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(bad(path, "missing raster data"));
    }
    let raster = &bytes[h.pos + 1..];
    let n = width * height;
    if raster.len() < n * channels {
        return Err(bad(
            path,
            format!(
                "truncated raster: expected {} bytes, found {}",
                n * channels,
                raster.len()
            ),
        ));
    }
    let mut data = vec![0.0f32; n * channels];
    for (i, px) in raster[..n * channels].chunks(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * n + i] = v as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![channels, height, width], data)?)
}

fn to_byte(v: f32) -> u8 {
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Encodes `[1,H,W]` as P5 or `[3,H,W]` as P6.
pub fn encode_pnm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = match *img.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        ref s => {
            return Err(Error::config(format!(
                "can only write [1,H,W] or [3,H,W] images, got {s:?}"
            )))
        }
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let n = h * w;
    let d = img.data();
    out.reserve(n * c);
    for i in 0..n {
        for k in 0..c {
            out.push(to_byte(d[k * n + i]));
        }
    }
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

pub fn write_image(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pnm(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_and_p6_channel_counts() {
        let g = decode_pnm(b"P5\n2 1\n255\n\x00\xff", Path::new("g")).unwrap();
        assert_eq!(g.shape(), &[1, 1, 2]);
        assert_eq!(g.data(), &[0.0, 1.0]);
        let c = decode_pnm(b"P6 1 1 255\n\x01\x02\x03", Path::new("c")).unwrap();
        assert_eq!(c.shape(), &[3, 1, 1]);
    }

    #[test]
    fn comments_in_header() {
        let g = decode_pnm(
            b"P5\n# made by hand\n1 1\n# depth\n255\n\x80",
            Path::new("g"),
        )
        .unwrap();
        assert_eq!(g.data(), &[128.0 / 255.0]);
    }

    #[test]
    fn malformed_headers() {
        for bytes in [
            &b""[..],
            b"P3\n1 1\n255\n0",
            b"P5\n1\n",
            b"P5\nx 1\n255\n\x00",
            b"P5\n1 1\n65535\n\x00\x00",
            b"P5\n2 2\n255\n\x00",
            b"P5\n0 2\n255\n",
        ] {
            assert!(
                matches!(decode_pnm(bytes, Path::new("t")), Err(Error::Image { .. })),
                "{bytes:?}"
            );
        }
    }

    #[test]
    fn round_half_up() {
        assert_eq!(to_byte(0.5 / 255.0), 1);
        assert_eq!(to_byte(-0.2), 0);
        assert_eq!(to_byte(1.7), 255);
    }

    #[test]
    fn encode_rejects_two_channels() {
        assert!(encode_pnm(&Tensor::zeros(vec![2, 2, 2])).is_err());
    }
}
