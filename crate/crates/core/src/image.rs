//! Floating-point images and their file formats.
//!
//! Pixels are stored interleaved, row-major, as `f32` in `[0, 1]`. Two on-disk
//! formats are supported:
//!
//! * 8-bit PNG (grayscale or RGB). Conversion to 8 bits rounds half up.
//! * `FIMG`, a raw planar float format: the 4-byte magic `FIMG`, then
//!   little-endian `u32` width, height and channel count, then
//!   `width * height * channels` little-endian `f32` values laid out
//!   channel-major (`c`, `y`, `x`). The same container carries feature maps,
//!   where "channels" is the feature depth.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FIMG_MAGIC: &[u8; 4] = b"FIMG";

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        check_channels(channels)?;
        Ok(Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        })
    }

    /// Wraps interleaved row-major pixel data.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_channels(channels)?;
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite pixel value {bad}")));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y, c)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut img = Self::new(width, height, channels)?;
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        Ok(img)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    /// Bilinear sample at continuous pixel coordinates, where integer
    /// coordinates are pixel centres. Returns `None` outside the image.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> Option<f32> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if x > max_x || y > max_y {
            return None;
        }
        Some(self.bilinear_unchecked(x, y, c))
    }

    /// Bilinear sample with coordinates clamped to the image border.
    pub fn sample_clamped(&self, x: f64, y: f64, c: usize) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        self.bilinear_unchecked(x, y, c)
    }

    fn bilinear_unchecked(&self, x: f64, y: f64, c: usize) -> f32 {
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        if fx == 0.0 && fy == 0.0 {
            return self.get(x0, y0, c);
        }
        let p00 = self.get(x0, y0, c) as f64;
        let p10 = self.get(x1, y0, c) as f64;
        let p01 = self.get(x0, y1, c) as f64;
        let p11 = self.get(x1, y1, c) as f64;
        let top = p00 + (p10 - p00) * fx;
        let bottom = p01 + (p11 - p01) * fx;
        (top + (bottom - top) * fy) as f32
    }

    /// Rec. 601 luma for 3-channel images; a copy of the single channel otherwise.
    pub fn luma(&self) -> Vec<f32> {
        match self.channels {
            1 => self.data.clone(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }

    /// Channel-major copy of the pixel data.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + i] = *v;
            }
        }
        out
    }

    pub fn from_planar(
        width: usize,
        height: usize,
        channels: usize,
        planar: &[f32],
    ) -> Result<Self> {
        let plane = width * height;
        if planar.len() != plane * channels {
            return Err(Error::Shape(format!(
                "planar buffer of {} values for {}x{}x{}",
                planar.len(),
                width,
                height,
                channels
            )));
        }
        let mut data = vec![0.0; planar.len()];
        for c in 0..channels {
            for i in 0..plane {
                data[i * channels + c] = planar[c * plane + i];
            }
        }
        Self::from_vec(width, height, channels, data)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let dynimg = image::open(path)?;
        let img = match dynimg.color().channel_count() {
            1 | 2 => {
                let g = dynimg.to_luma8();
                let (w, h) = g.dimensions();
                let data = g.into_raw().into_iter().map(from_u8).collect();
                Image::from_vec(w as usize, h as usize, 1, data)?
            }
            _ => {
                let rgb = dynimg.to_rgb8();
                let (w, h) = rgb.dimensions();
                let data = rgb.into_raw().into_iter().map(from_u8).collect();
                Image::from_vec(w as usize, h as usize, 3, data)?
            }
        };
        Ok(img)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            _ => image::ExtendedColorType::Rgb8,
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)?;
        Ok(())
    }

    pub fn load_fimg(path: impl AsRef<Path>) -> Result<Self> {
        let raw = RawPlanar::read(path)?;
        check_channels(raw.channels)?;
        Image::from_planar(raw.width, raw.height, raw.channels, &raw.data)
    }

    pub fn save_fimg(&self, path: impl AsRef<Path>) -> Result<()> {
        RawPlanar {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.to_planar(),
        }
        .write(path)
    }

    /// Loads by extension: `.fimg` as raw planar floats, anything else as PNG.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if is_fimg(path) {
            Self::load_fimg(path)
        } else {
            Self::load_png(path)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if is_fimg(path) {
            self.save_fimg(path)
        } else {
            self.save_png(path)
        }
    }
}

fn is_fimg(path: &Path) -> bool {
    path.extension()
        .map(|e| e.eq_ignore_ascii_case("fimg"))
        .unwrap_or(false)
}

fn check_channels(channels: usize) -> Result<()> {
    if channels == 1 || channels == 3 {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "images carry 1 or 3 channels, got {channels}"
        )))
    }
}

fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

/// 8-bit quantisation, round half up.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

/// Contents of a `FIMG` file with an arbitrary channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPlanar {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Channel-major samples.
    pub data: Vec<f32>,
}

impl RawPlanar {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != FIMG_MAGIC {
            return Err(Error::format(path, "missing FIMG magic"));
        }
        let mut header = [0u8; 12];
        r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        let field =
            |i: usize| u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let (width, height, channels) = (field(0), field(1), field(2));
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)
            .map_err(|e| Error::io(path, e))?;
        if payload.len() != n * 4 {
            return Err(Error::format(
                path,
                format!("expected {} payload bytes, found {}", n * 4, payload.len()),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(RawPlanar {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.data.len() != self.width * self.height * self.channels {
            return Err(Error::Shape("FIMG payload does not match header".into()));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::with_capacity(16 + self.data.len() * 4);
        buf.extend_from_slice(FIMG_MAGIC);
        for d in [self.width, self.height, self.channels] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_half_up_quantisation() {
        assert_eq!(to_u8(0.0), 0);
        assert_eq!(to_u8(1.0), 255);
        // 0.5 * 255 = 127.5 rounds up
        assert_eq!(to_u8(0.5), 128);
        assert_eq!(to_u8(-3.0), 0);
    }

    #[test]
    fn rejects_wrong_length_and_nan() {
        assert!(Image::from_vec(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(Image::from_vec(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(Image::new(2, 2, 2).is_err());
    }

    #[test]
    fn bilinear_midpoint() {
        let img = Image::from_vec(2, 1, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(img.sample_bilinear(0.5, 0.0, 0), Some(0.5));
        assert_eq!(img.sample_bilinear(1.5, 0.0, 0), None);
        assert_eq!(img.sample_bilinear(1.0, 0.0, 0), Some(1.0));
    }

    #[test]
    fn fimg_and_png_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 4, 3, |x, y, c| (x * 7 + y * 3 + c) as f32 / 40.0).unwrap();
        let p = dir.path().join("a.fimg");
        img.save(&p).unwrap();
        assert_eq!(Image::load(&p).unwrap(), img);

        let q = dir.path().join("a.png");
        img.save(&q).unwrap();
        let back = Image::load(&q).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }

        std::fs::write(dir.path().join("bad.fimg"), b"NOPE").unwrap();
        assert!(Image::load(dir.path().join("bad.fimg")).is_err());
    }
}
