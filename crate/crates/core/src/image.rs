//! Planar RGB images in `[-1, 1]`, PNG ingestion/emission and grids.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{LfsError, Result};

pub const CHANNELS: usize = 3;

/// `3 x height x width` planar image with values nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * width * height {
            return Err(LfsError::shape("Image::new", CHANNELS * width * height, data.len()));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let plane = width * height;
        let mut data = Vec::with_capacity(CHANNELS * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Image { width, height, data }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.resolution() != other.resolution() {
            return Err(LfsError::shape("mean_abs_diff", self.resolution(), other.resolution()));
        }
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if (width, height) == self.resolution() {
            return self.clone();
        }
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        let mut data = Vec::with_capacity(CHANNELS * width * height);
        for c in 0..CHANNELS {
            for y in 0..height {
                let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let ty = fy - y0 as f32;
                for x in 0..width {
                    let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let tx = fx - x0 as f32;
                    let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
                    let bot = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
                    data.push(top * (1.0 - ty) + bot * ty);
                }
            }
        }
        Image { width, height, data }
    }

    /// Interleaved 8-bit RGB, clamping to `[-1, 1]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = Vec::with_capacity(CHANNELS * plane);
        for i in 0..plane {
            for c in 0..CHANNELS {
                let v = self.data[c * plane + i].clamp(-1.0, 1.0);
                out.push(((v + 1.0) * 127.5).round() as u8);
            }
        }
        out
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
        let plane = width * height;
        if bytes.len() != CHANNELS * plane {
            return Err(LfsError::shape("Image::from_rgb8", CHANNELS * plane, bytes.len()));
        }
        let mut data = vec![0.0; CHANNELS * plane];
        for i in 0..plane {
            for c in 0..CHANNELS {
                data[c * plane + i] = bytes[i * CHANNELS + c] as f32 / 127.5 - 1.0;
            }
        }
        Ok(Image { width, height, data })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| LfsError::Image(e.to_string()))?;
        writer
            .write_image_data(&self.to_rgb8())
            .map_err(|e| LfsError::Image(e.to_string()))?;
        writer.finish().map_err(|e| LfsError::Image(e.to_string()))?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| LfsError::Image(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| LfsError::Image("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| LfsError::Image(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let px = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => px.to_vec(),
            png::ColorType::Rgba => px.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            png::ColorType::Indexed => return Err(LfsError::Image("unexpanded palette image".into())),
        };
        Image::from_rgb8(w, h, &rgb)
    }
}

/// Tiles equally sized images into a grid with `cols` columns.
pub fn grid(images: &[Image], cols: usize) -> Result<Image> {
    let first = images.first().ok_or(LfsError::Empty("grid of zero images"))?;
    let (w, h) = first.resolution();
    if let Some(bad) = images.iter().find(|i| i.resolution() != (w, h)) {
        return Err(LfsError::shape("grid", (w, h), bad.resolution()));
    }
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let mut out = Image::filled(gw, gh, [-1.0; 3]);
    for (idx, img) in images.iter().enumerate() {
        let (ox, oy) = ((idx % cols) * w, (idx / cols) * h);
        for c in 0..CHANNELS {
            for y in 0..h {
                let dst = (c * gh + oy + y) * gw + ox;
                let src = (c * h + y) * w;
                out.data[dst..dst + w].copy_from_slice(&img.data[src..src + w]);
            }
        }
    }
    Ok(out)
}
