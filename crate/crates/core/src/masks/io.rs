use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

use super::synthetic::{ImageSample, Provenance};
use super::Mask;

/// 8-bit interleaved raster with 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Encoder/decoder pair for one file format. Decoding errors are plain
/// messages; the caller attaches the path.
pub trait ImageCodec {
    fn decode(&self, bytes: &[u8]) -> std::result::Result<Raster, String>;
    fn encode(&self, raster: &Raster) -> std::result::Result<Vec<u8>, String>;
}

/// Binary portable anymap: P6 for RGB, P5 for grayscale, maxval 255.
#[derive(Clone, Copy, Debug, Default)]
pub struct PnmCodec;

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
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

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("missing or invalid {what}"))
    }
}

impl ImageCodec for PnmCodec {
    fn decode(&self, bytes: &[u8]) -> std::result::Result<Raster, String> {
        let channels = match bytes.get(..2) {
            Some(b"P6") => 3,
            Some(b"P5") => 1,
            _ => return Err("not a binary P5/P6 anymap".into()),
        };
        let mut r = HeaderReader { bytes, pos: 2 };
        let width = r.number("width")?;
        let height = r.number("height")?;
        let maxval = r.number("maxval")?;
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}, expected 255"));
        }
        if width == 0 || height == 0 {
            return Err(format!("empty image {width}x{height}"));
        }
        match bytes.get(r.pos) {
            Some(c) if c.is_ascii_whitespace() => r.pos += 1,
            _ => return Err("header must end with a single whitespace byte".into()),
        }
        let len = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or("image dimensions overflow")?;
        let data = bytes
            .get(r.pos..r.pos + len)
            .ok_or_else(|| format!("expected {len} pixel bytes, found {}", bytes.len() - r.pos))?;
        Ok(Raster {
            width,
            height,
            channels,
            data: data.to_vec(),
        })
    }

    fn encode(&self, raster: &Raster) -> std::result::Result<Vec<u8>, String> {
        let magic = match raster.channels {
            3 => "P6",
            1 => "P5",
            c => return Err(format!("cannot encode {c}-channel raster")),
        };
        if raster.data.len() != raster.width * raster.height * raster.channels {
            return Err("raster data length does not match its dimensions".into());
        }
        let mut out = format!("{magic}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
        out.extend_from_slice(&raster.data);
        Ok(out)
    }
}

fn read_raster(path: &Path, codec: &impl ImageCodec) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    codec.decode(&bytes).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })
}

fn write_raster(path: &Path, raster: &Raster, codec: &impl ImageCodec) -> Result<()> {
    let bytes = codec.encode(raster).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads an RGB image; pixel values become `byte / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageSample> {
    let path = path.as_ref();
    let r = read_raster(path, &PnmCodec)?;
    if r.channels != 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "expected an RGB (P6) image".into(),
        });
    }
    let pixels = Tensor4::from_fn(Shape4::new(1, 3, r.height, r.width), |_, c, y, x| {
        r.data[(y * r.width + x) * 3 + c] as f64 / 255.0
    });
    Ok(ImageSample {
        pixels,
        provenance: Provenance::File(path.to_path_buf()),
    })
}

/// Saves item `n` of an `(n, 3, h, w)` tensor, clamped to `[0, 1]`.
pub fn save_image(pixels: &Tensor4<f64>, n: usize, path: impl AsRef<Path>) -> Result<()> {
    let s = pixels.shape();
    if s.c != 3 && s.c != 1 {
        return Err(Error::config(format!("cannot save {s} as an image")));
    }
    let mut data = Vec::with_capacity(s.c * s.plane());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                data.push(quantize(pixels.at(n, c, y, x)));
            }
        }
    }
    let raster = Raster {
        width: s.w,
        height: s.h,
        channels: s.c,
        data,
    };
    write_raster(path.as_ref(), &raster, &PnmCodec)
}

/// Loads a grayscale mask; bytes of 128 and above are valid pixels.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let r = read_raster(path, &PnmCodec)?;
    if r.channels != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "expected a grayscale (P5) mask".into(),
        });
    }
    Mask::from_values(r.height, r.width, r.data.iter().map(|&v| u8::from(v >= 128)).collect())
}

/// Saves a mask as P5 with 255 = valid and 0 = hole.
pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let raster = Raster {
        width: mask.width(),
        height: mask.height(),
        channels: 1,
        data: mask.values().iter().map(|&v| v * 255).collect(),
    };
    write_raster(path.as_ref(), &raster, &PnmCodec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment_decodes() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let r = PnmCodec.decode(bytes).unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 1, 1));
        assert_eq!(r.data, vec![0, 255]);
    }

    #[test]
    fn malformed_headers_are_rejected() {
        for bad in [&b"P3\n1 1\n255\n"[..], b"P6\n1\n", b"P6\n1 1\n65535\n\x00", b"P6\n2 2\n255\n\x00"] {
            assert!(PnmCodec.decode(bad).is_err());
        }
    }

    #[test]
    fn missing_file_is_io_error_with_path() {
        let err = load_mask("/nonexistent/dir/mask.pgm").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/dir/mask.pgm"));
    }
}
