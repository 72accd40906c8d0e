//! In-memory float images plus their two on-disk forms:
//!
//! * 8-bit PNG. Color values are stored gamma-encoded (`v^(1/2.2)`) and
//!   linearized on load; single-channel masks are stored as-is in `{0, 255}`.
//! * Raw float grid: ASCII magic `RFIM`, then little-endian `u32` version (1),
//!   width, height, channel count, followed by `width * height * channels`
//!   little-endian `f32` values in row-major, channel-interleaved order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const GAMMA: f64 = 2.2;
const RAW_MAGIC: &[u8; 4] = b"RFIM";
const RAW_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; (width * height * channels) as usize],
        }
    }

    pub fn from_data(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != (width * height * channels) as usize {
            return Err(Error::ShapeMismatch {
                expected: format!("{width}x{height}x{channels}"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[f32] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [f32] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &mut self.data[i..i + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
    }

    /// Writes an 8-bit PNG; 3-channel images are gamma encoded, 1-channel
    /// images are written linearly.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let res = match self.channels {
            1 => image::GrayImage::from_raw(
                self.width,
                self.height,
                self.data.iter().map(|&v| quant(v)).collect(),
            )
            .unwrap()
            .save(path),
            3 => image::RgbImage::from_raw(
                self.width,
                self.height,
                self.data
                    .iter()
                    .map(|&v| quant((v.max(0.0) as f64).powf(1.0 / GAMMA) as f32))
                    .collect(),
            )
            .unwrap()
            .save(path),
            c => return Err(Error::invalid(format!("cannot write {c}-channel PNG"))),
        };
        res.map_err(|e| Error::Format {
            path: path.to_owned(),
            reason: e.to_string(),
        })
    }

    /// Loads an RGB PNG and linearizes it.
    pub fn load_rgb_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Format {
                path: path.to_owned(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .into_raw()
            .into_iter()
            .map(|v| (v as f64 / 255.0).powf(GAMMA) as f32)
            .collect();
        Self::from_data(w, h, 3, data)
    }

    /// Loads a single-channel PNG as values in `[0, 1]`.
    pub fn load_gray_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Format {
                path: path.to_owned(),
                reason: e.to_string(),
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::from_data(w, h, 1, data)
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let mut buf = Vec::with_capacity(20 + 4 * self.data.len());
        buf.extend_from_slice(RAW_MAGIC);
        for v in [RAW_VERSION, self.width, self.height, self.channels] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let bad = |reason: &str| Error::Format {
            path: path.to_owned(),
            reason: reason.to_owned(),
        };
        if bytes.len() < 20 || &bytes[..4] != RAW_MAGIC {
            return Err(bad("missing RFIM header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != RAW_VERSION {
            return Err(bad("unsupported raw image version"));
        }
        let (w, h, c) = (word(1), word(2), word(3));
        let n = (w as usize) * (h as usize) * (c as usize);
        if bytes.len() != 20 + 4 * n {
            return Err(bad("payload length does not match header"));
        }
        let data = bytes[20..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::from_data(w, h, c, data)
    }
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
    }
    Ok(())
}
