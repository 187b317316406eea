//! Fixed-size RGB frames and the raster operations the pipeline needs:
//! decode/encode, bilinear resize, luma conversion, flips and affine warps.
//!
//! All resampling uses the half-pixel-center convention (source coordinate
//! `(dst + 0.5) * scale - 0.5`), the same at train and test time.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("decode error for {path}: {message}")]
    Decode { path: String, message: String },
    #[error("encode error for {path}: {message}")]
    Encode { path: String, message: String },
}

/// An 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` bytes, `[r, g, b]` per pixel.
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path).map_err(|e| ImageError::Decode {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        Ok(Self {
            width: rgb.width() as usize,
            height: rgb.height() as usize,
            data: rgb.into_raw(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| ImageError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("frame buffer size");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| ImageError::Encode {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }

    /// Rec. 601 luma, as `f32` in `[0, 255]`.
    pub fn to_luma(&self) -> GrayImage {
        let mut data = Vec::with_capacity(self.width * self.height);
        for px in self.data.chunks_exact(3) {
            data.push(0.299 * f32::from(px[0]) + 0.587 * f32::from(px[1]) + 0.114 * f32::from(px[2]));
        }
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Bilinear resize to `w x h` (stretches, no aspect preservation).
    pub fn resize_bilinear(&self, w: usize, h: usize) -> Frame {
        if w == self.width && h == self.height {
            return self.clone();
        }
        let mut out = Frame::new(w, h);
        let sx = self.width as f32 / w as f32;
        let sy = self.height as f32 / h as f32;
        for oy in 0..h {
            let fy = (oy as f32 + 0.5) * sy - 0.5;
            for ox in 0..w {
                let fx = (ox as f32 + 0.5) * sx - 0.5;
                let rgb = self.sample_bilinear(fx, fy);
                out.set_pixel(ox, oy, rgb);
            }
        }
        out
    }

    /// Bilinear sample with replicate-edge handling, rounded to u8.
    fn sample_bilinear(&self, fx: f32, fy: f32) -> [u8; 3] {
        let (w, h) = (self.width as isize, self.height as isize);
        let x0 = fx.floor() as isize;
        let y0 = fy.floor() as isize;
        let tx = fx - x0 as f32;
        let ty = fy - y0 as f32;
        let clamp = |x: isize, hi: isize| x.clamp(0, hi - 1) as usize;
        let p00 = self.pixel(clamp(x0, w), clamp(y0, h));
        let p10 = self.pixel(clamp(x0 + 1, w), clamp(y0, h));
        let p01 = self.pixel(clamp(x0, w), clamp(y0 + 1, h));
        let p11 = self.pixel(clamp(x0 + 1, w), clamp(y0 + 1, h));
        let mut out = [0u8; 3];
        for c in 0..3 {
            let top = f32::from(p00[c]) * (1.0 - tx) + f32::from(p10[c]) * tx;
            let bot = f32::from(p01[c]) * (1.0 - tx) + f32::from(p11[c]) * tx;
            out[c] = (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8;
        }
        out
    }

    pub fn flip_horizontal(&self) -> Frame {
        let mut out = Frame::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(x, y, self.pixel(self.width - 1 - x, y));
            }
        }
        out
    }

    /// Rotation (degrees, about the image center) followed by translation
    /// (pixels), bilinear resample, replicate-edge borders.
    pub fn warp_affine(&self, rotation_deg: f32, tx: f32, ty: f32) -> Frame {
        let mut out = Frame::new(self.width, self.height);
        let theta = rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let cx = (self.width as f32 - 1.0) / 2.0;
        let cy = (self.height as f32 - 1.0) / 2.0;
        for oy in 0..self.height {
            for ox in 0..self.width {
                // inverse map: undo translation, then rotate backwards
                let dx = ox as f32 - tx - cx;
                let dy = oy as f32 - ty - cy;
                let sxf = cos * dx + sin * dy + cx;
                let syf = -sin * dx + cos * dy + cy;
                out.set_pixel(ox, oy, self.sample_bilinear(sxf, syf));
            }
        }
        out
    }
}

/// A single-channel f32 image in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear resize with the same convention as [`Frame::resize_bilinear`].
    pub fn resize_bilinear(&self, w: usize, h: usize) -> GrayImage {
        let mut out = GrayImage::new(w, h);
        let sx = self.width as f32 / w as f32;
        let sy = self.height as f32 / h as f32;
        for oy in 0..h {
            let fy = (oy as f32 + 0.5) * sy - 0.5;
            for ox in 0..w {
                let fx = (ox as f32 + 0.5) * sx - 0.5;
                out.set(ox, oy, self.sample_bilinear(fx, fy));
            }
        }
        out
    }

    pub fn sample_bilinear(&self, fx: f32, fy: f32) -> f32 {
        let (w, h) = (self.width as isize, self.height as isize);
        let x0 = fx.floor() as isize;
        let y0 = fy.floor() as isize;
        let tx = fx - x0 as f32;
        let ty = fy - y0 as f32;
        let clamp = |x: isize, hi: isize| x.clamp(0, hi - 1) as usize;
        let p00 = self.at(clamp(x0, w), clamp(y0, h));
        let p10 = self.at(clamp(x0 + 1, w), clamp(y0, h));
        let p01 = self.at(clamp(x0, w), clamp(y0 + 1, h));
        let p11 = self.at(clamp(x0 + 1, w), clamp(y0 + 1, h));
        let top = p00 * (1.0 - tx) + p10 * tx;
        let bot = p01 * (1.0 - tx) + p11 * tx;
        top * (1.0 - ty) + bot * ty
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_frame(w: usize, h: usize) -> Frame {
        let mut f = Frame::new(w, h);
        for y in 0..h {
            for x in 0..w {
                f.set_pixel(x, y, [(x * 7 % 256) as u8, (y * 11 % 256) as u8, 128]);
            }
        }
        f
    }

    #[test]
    fn resize_identity() {
        let f = gradient_frame(8, 6);
        assert_eq!(f.resize_bilinear(8, 6), f);
    }

    #[test]
    fn resize_preserves_channels_and_range() {
        let f = gradient_frame(31, 17);
        let r = f.resize_bilinear(224, 224);
        assert_eq!(r.data.len(), 224 * 224 * 3);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let mut f = Frame::new(9, 9);
        f.data.fill(77);
        let r = f.resize_bilinear(4, 13);
        assert!(r.data.iter().all(|&v| v == 77));
    }

    #[test]
    fn luma_formula() {
        let mut f = Frame::new(1, 1);
        f.set_pixel(0, 0, [100, 50, 200]);
        let g = f.to_luma();
        let expected = 0.299 * 100.0 + 0.587 * 50.0 + 0.114 * 200.0;
        assert!((g.at(0, 0) - expected).abs() < 1e-4);
    }

    #[test]
    fn hflip_reverses_columns() {
        let f = gradient_frame(5, 3);
        let flipped = f.flip_horizontal();
        for y in 0..3 {
            for x in 0..5 {
                assert_eq!(flipped.pixel(x, y), f.pixel(4 - x, y));
            }
        }
    }

    #[test]
    fn identity_affine_is_identity() {
        let f = gradient_frame(16, 16);
        let warped = f.warp_affine(0.0, 0.0, 0.0);
        assert_eq!(warped, f);
    }

    #[test]
    fn pure_translation_shifts_pixels() {
        let f = gradient_frame(16, 16);
        let warped = f.warp_affine(0.0, 3.0, 0.0);
        // output pixel (x, y) should equal input pixel (x-3, y) in the interior
        for y in 2..14 {
            for x in 4..14 {
                assert_eq!(warped.pixel(x, y), f.pixel(x - 3, y));
            }
        }
    }

    #[test]
    fn gray_bilinear_interpolates_midpoint() {
        let mut g = GrayImage::new(2, 1);
        g.set(0, 0, 0.0);
        g.set(1, 0, 100.0);
        assert!((g.sample_bilinear(0.5, 0.0) - 50.0).abs() < 1e-5);
    }
}
