//! RGB raster images with values in `[0, 1]`.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// A height × width × 3 raster stored row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    /// Builds an image, rejecting empty dimensions and out-of-range values.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("image must be non-empty, got {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape {
                expected: vec![height, width, 3],
                got: vec![data.len()],
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Dimension(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image, clipping every value into `[0, 1]` (NaN maps to 0).
    pub fn from_clipped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Overwrites one pixel. Values are clipped into range.
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Alpha-blends `rgb` over one pixel; `alpha == 0` leaves the pixel untouched.
    pub fn blend_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3], alpha: f64) {
        if alpha <= 0.0 {
            return;
        }
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            let v = (1.0 - alpha) * self.data[i + c] + alpha * rgb[c];
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Snaps every value onto the 8-bit grid so that a PNG round trip is exact.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize(v)).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::new(height, width, data)
    }

    pub fn luma(&self, y: usize, x: usize) -> f64 {
        let [r, g, b] = self.pixel(y, x);
        0.299 * r + 0.587 * g + 0.114 * b
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bilinear resize with half-pixel centres. Resizing to the same size is exact.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        if height == 0 || width == 0 {
            return Err(Error::Dimension("resize target must be non-empty".into()));
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = vec![0.0; height * width * 3];
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let (p00, p01) = (self.pixel(y0, x0), self.pixel(y0, x1));
                let (p10, p11) = (self.pixel(y1, x0), self.pixel(y1, x1));
                for c in 0..3 {
                    let top = p00[c] * (1.0 - wx) + p01[c] * wx;
                    let bottom = p10[c] * (1.0 - wx) + p11[c] * wx;
                    out[(y * width + x) * 3 + c] = top * (1.0 - wy) + bottom * wy;
                }
            }
        }
        Self::from_clipped(height, width, out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.to_bytes())
            .expect("buffer length matches dimensions");
        img.save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_bytes(h as usize, w as usize, img.as_raw())
    }
}

pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Tiles images into a single contact sheet, row-major with `cols` columns.
pub fn contact_sheet(images: &[ImageTensor], cols: usize) -> Result<ImageTensor> {
    let first = images.first().ok_or(Error::Empty("contact sheet images"))?;
    let (h, w) = (first.height, first.width);
    let cols = cols.max(1).min(images.len());
    let rows = images.len().div_ceil(cols);
    let mut sheet = ImageTensor::filled(rows * h, cols * w, [1.0; 3])?;
    for (i, img) in images.iter().enumerate() {
        let img = img.resize_bilinear(h, w)?;
        let (oy, ox) = ((i / cols) * h, (i % cols) * w);
        for y in 0..h {
            for x in 0..w {
                sheet.set_pixel(oy + y, ox + x, img.pixel(y, x));
            }
        }
    }
    Ok(sheet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_empty() {
        assert!(ImageTensor::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(ImageTensor::new(0, 4, vec![]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, 0.5]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..4 * 5 * 3).map(|i| (i as f64 * 0.037) % 1.0).collect();
        let img = ImageTensor::new(4, 5, data).unwrap().quantized();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        assert_eq!(ImageTensor::load_png(&path).unwrap(), img);
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = ImageTensor::new(2, 2, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        assert_eq!(img.resize_bilinear(2, 2).unwrap(), img);
        let up = img.resize_bilinear(4, 4).unwrap();
        assert_eq!((up.height(), up.width()), (4, 4));
    }
}
