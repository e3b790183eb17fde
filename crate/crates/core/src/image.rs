//! Single-channel images with intensities in `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!("{} values for a {width}x{height} image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    /// Bilinear sample at continuous index coordinates (pixel centres sit
    /// on integers); points outside the image read `fill`.
    pub fn bilinear(&self, x: f64, y: f64, fill: f32) -> f32 {
        if !(x > -1.0 && y > -1.0 && x < self.width as f64 && y < self.height as f64) {
            return fill;
        }
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let at = |xi: isize, yi: isize| {
            if xi < 0 || yi < 0 || xi >= self.width as isize || yi >= self.height as isize {
                fill
            } else {
                self.data[yi as usize * self.width + xi as usize]
            }
        };
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Area-average resize to an arbitrary size.
    pub fn resize(&self, width: usize, height: usize) -> GrayImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = GrayImage::new(width, height, 0.0);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for oy in 0..height {
            let (y0, y1) = (oy as f64 * sy, (oy + 1) as f64 * sy);
            for ox in 0..width {
                let (x0, x1) = (ox as f64 * sx, (ox + 1) as f64 * sx);
                let mut acc = 0.0f64;
                let mut wsum = 0.0f64;
                for iy in y0.floor() as usize..(y1.ceil() as usize).min(self.height) {
                    let wy = (y1.min(iy as f64 + 1.0) - y0.max(iy as f64)).max(0.0);
                    for ix in x0.floor() as usize..(x1.ceil() as usize).min(self.width) {
                        let wx = (x1.min(ix as f64 + 1.0) - x0.max(ix as f64)).max(0.0);
                        acc += (wx * wy) * self.get(ix, iy) as f64;
                        wsum += wx * wy;
                    }
                }
                out.set(ox, oy, if wsum > 0.0 { (acc / wsum) as f32 } else { 0.0 });
            }
        }
        out
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        w.write_image_data(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    /// Reads 8- or 16-bit grayscale PNGs; colour images are averaged to gray.
    pub fn load_png(path: &Path) -> Result<GrayImage> {
        let err = |e: &dyn std::fmt::Display| Error::Image(format!("{}: {e}", path.display()));
        let file = File::open(path)?;
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND);
        let mut reader = dec.read_info().map_err(|e| err(&e))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| err(&"image too large"))?];
        let info = reader.next_frame(&mut buf).map_err(|e| err(&e))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let bytes = &buf[..info.buffer_size()];
        let (scale, step) = match info.bit_depth {
            png::BitDepth::Sixteen => (65535.0f32, 2),
            png::BitDepth::Eight => (255.0, 1),
            d => return Err(err(&format!("unsupported bit depth {d:?}"))),
        };
        let sample = |i: usize| -> f32 {
            if step == 2 {
                u16::from_be_bytes([bytes[2 * i], bytes[2 * i + 1]]) as f32 / scale
            } else {
                bytes[i] as f32 / scale
            }
        };
        let colour = match channels {
            1 | 2 => 1,
            _ => 3,
        };
        let mut data = Vec::with_capacity(w * h);
        for p in 0..w * h {
            let base = p * channels;
            let v: f32 = (0..colour).map(|c| sample(base + c)).sum::<f32>() / colour as f32;
            data.push(v);
        }
        GrayImage::from_vec(w, h, data)
    }
}
