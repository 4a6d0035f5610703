//! Binary netpbm: P6 (RGB) and P5 (gray), 8-bit, maxval 255.

use std::fs;
use std::path::Path;

use rrnet_core::data::mask_from_bytes;
use rrnet_core::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PnmError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("{path}: byte {offset}: {msg}")]
    File { path: String, offset: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

impl PnmError {
    fn in_file(self, path: &Path) -> Self {
        match self {
            PnmError::Parse { offset, msg } => PnmError::File {
                path: path.display().to_string(),
                offset,
                msg,
            },
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> PnmError {
        PnmError::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PnmError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(match self.bytes.get(self.pos) {
                None => self.err(format!("header ends before {what}")),
                Some(&b) => self.err(format!("expected {what}, found {:?}", b as char)),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PnmError::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pnm, PnmError> {
    let mut c = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.err("bad magic: expected P5 or P6")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    c.skip_space();
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(PnmError::Parse {
            offset: maxval_at,
            msg: format!("unsupported maxval {maxval} (only 255)"),
        });
    }
    if width == 0 || height == 0 {
        return Err(c.err(format!("empty image {width}x{height}")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.err("expected a single whitespace byte after maxval")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| c.err("image dimensions overflow"))?;
    let payload = &bytes[c.pos..];
    if payload.len() < need {
        return Err(PnmError::Parse {
            offset: bytes.len(),
            msg: format!("truncated payload: expected {need} bytes, found {}", payload.len()),
        });
    }
    Ok(Pnm {
        width,
        height,
        channels,
        pixels: payload[..need].to_vec(),
    })
}

pub fn encode(p: &Pnm) -> Vec<u8> {
    let magic = if p.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", p.width, p.height).into_bytes();
    out.extend_from_slice(&p.pixels);
    out
}

fn read_file(path: &Path) -> Result<Pnm, PnmError> {
    let bytes = fs::read(path).map_err(|source| PnmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes).map_err(|e| e.in_file(path))
}

fn write_file(path: &Path, p: &Pnm) -> Result<(), PnmError> {
    fs::write(path, encode(p)).map_err(|source| PnmError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn expect_channels(path: &Path, p: &Pnm, channels: usize) -> Result<(), PnmError> {
    if p.channels != channels {
        let want = if channels == 3 { "P6 (RGB)" } else { "P5 (gray)" };
        return Err(PnmError::File {
            path: path.display().to_string(),
            offset: 0,
            msg: format!("expected a {want} file"),
        });
    }
    Ok(())
}

/// Quantize `[0, 1]` to a byte as `round(v * 255)`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// H x W x 3 image with values `byte / 255`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>, PnmError> {
    let p = read_file(path)?;
    expect_channels(path, &p, 3)?;
    Tensor::new(
        vec![p.height, p.width, 3],
        p.pixels.iter().map(|&b| b as f32 / 255.0).collect(),
    )
    .map_err(|e| PnmError::Invalid(e.to_string()))
}

/// H x W gray map with values `byte / 255`.
pub fn read_map(path: &Path) -> Result<Tensor<f32>, PnmError> {
    let p = read_file(path)?;
    expect_channels(path, &p, 1)?;
    Tensor::new(
        vec![p.height, p.width],
        p.pixels.iter().map(|&b| b as f32 / 255.0).collect(),
    )
    .map_err(|e| PnmError::Invalid(e.to_string()))
}

/// Binary mask: gray levels `>= 128` are foreground.
pub fn read_mask(path: &Path) -> Result<Tensor<f32>, PnmError> {
    let p = read_file(path)?;
    expect_channels(path, &p, 1)?;
    mask_from_bytes(p.height, p.width, &p.pixels).map_err(|e| PnmError::Invalid(e.to_string()))
}

fn dims(t: &Tensor<f32>, channels: usize) -> Result<(usize, usize), PnmError> {
    match (t.shape(), channels) {
        ([h, w], 1) | ([h, w, 1], 1) | ([h, w, 3], 3) => Ok((*h, *w)),
        (s, _) => Err(PnmError::Invalid(format!(
            "cannot write shape {s:?} as a {channels}-channel image"
        ))),
    }
}

pub fn write_map(path: &Path, map: &Tensor<f32>) -> Result<(), PnmError> {
    let (height, width) = dims(map, 1)?;
    write_file(
        path,
        &Pnm {
            width,
            height,
            channels: 1,
            pixels: map.data().iter().map(|&v| quantize(v)).collect(),
        },
    )
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<(), PnmError> {
    let (height, width) = dims(image, 3)?;
    write_file(
        path,
        &Pnm {
            width,
            height,
            channels: 3,
            pixels: image.data().iter().map(|&v| quantize(v)).collect(),
        },
    )
}
