//! Float images and 8-bit PNG conversion.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Height × width × channels image, row-major with interleaved channels,
/// values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Channel-mean grayscale as an `H·W` buffer.
    pub fn grayscale(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for px in self.data.chunks(self.channels) {
            out.push(px.iter().sum::<f64>() / self.channels as f64);
        }
        out
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer positions); `fill` outside the frame.
    pub fn sample_bilinear(&self, y: f64, x: f64, c: usize, fill: f64) -> f64 {
        if y < -0.5 || x < -0.5 || y > self.height as f64 - 0.5 || x > self.width as f64 - 0.5 {
            return fill;
        }
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let y0 = yc.floor() as usize;
        let x0 = xc.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = yc - y0 as f64;
        let fx = xc - x0 as f64;
        let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
        let bot = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Linear byte mapping `round(v * 255)` after clamping to `[0, 1]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Image::from_vec(
            height,
            width,
            channels,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            c => return Err(Error::Shape(format!("cannot encode {c}-channel image as PNG"))),
        };
        write_png(path, self.width as u32, self.height as u32, color, &self.to_bytes())
    }

    /// Loads an 8-bit PNG. Gray stays single-channel, alpha is dropped.
    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| parse(path, e))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| parse(path, e))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("unsupported bit depth {:?}", info.bit_depth),
            });
        }
        let (h, w) = (info.height as usize, info.width as usize);
        let bytes = &buf[..info.buffer_size()];
        match info.color_type {
            png::ColorType::Grayscale => Image::from_bytes(h, w, 1, bytes),
            png::ColorType::Rgb => Image::from_bytes(h, w, 3, bytes),
            png::ColorType::Rgba => {
                let rgb: Vec<u8> = bytes
                    .chunks(4)
                    .flat_map(|p| p[..3].iter().copied())
                    .collect();
                Image::from_bytes(h, w, 3, &rgb)
            }
            png::ColorType::GrayscaleAlpha => {
                let g: Vec<u8> = bytes.chunks(2).map(|p| p[0]).collect();
                Image::from_bytes(h, w, 1, &g)
            }
            other => Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("unsupported color type {other:?}"),
            }),
        }
    }
}

fn parse(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub(crate) fn write_png(
    path: &Path,
    width: u32,
    height: u32,
    color: png::ColorType,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width, height);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| parse(path, e))?;
    writer.write_image_data(bytes).map_err(|e| parse(path, e))?;
    writer.finish().map_err(|e| parse(path, e))?;
    Ok(())
}
