//! Planar RGB rasters and 8-bit PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Real;

/// `H × W × 3` image stored channel-planar (`[c][y][x]`). Values are nominally
/// in `[0, 1]` but decoder output is not clamped until serialisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T = f32> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::ZERO; 3 * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut img = Self::new(height, width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    img.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        img
    }

    pub fn from_planar(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Sample with coordinates clamped into the image.
    #[inline]
    pub fn get_clamped(&self, c: usize, y: isize, x: isize) -> T {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(c, y, x)
    }

    /// RGB triple at a flat row-major pixel index.
    #[inline]
    pub fn rgb(&self, idx: usize) -> [T; 3] {
        let n = self.pixels();
        [self.data[idx], self.data[n + idx], self.data[2 * n + idx]]
    }

    #[inline]
    pub fn set_rgb(&mut self, idx: usize, rgb: [T; 3]) {
        let n = self.pixels();
        self.data[idx] = rgb[0];
        self.data[n + idx] = rgb[1];
        self.data[2 * n + idx] = rgb[2];
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Argument(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(h, w, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |c, y, x| self.get(c, y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |c, y, x| self.get(c, self.height - 1 - y, x))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.width, self.height, |c, y, x| self.get(c, x, y))
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// 8-bit interleaved RGB after clamping to `[0, 1]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.pixels();
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push(quantize(self.data[c * n + i].to_f64()));
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * height * width {
            return Err(Error::Shape("RGB8 buffer length does not match dimensions".into()));
        }
        let n = height * width;
        let mut img = Self::new(height, width);
        for i in 0..n {
            for c in 0..3 {
                img.data[c * n + i] = T::from_f64(bytes[3 * i + c] as f64 / 255.0);
            }
        }
        Ok(img)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_error(path, e))
    }

    /// Loads any PNG, dropping alpha and expanding grey to RGB.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?;
        let decoded = reader.decode().map_err(|e| image_error(path, e))?;
        let rgb = decoded.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::from_rgb8(h as usize, w as usize, rgb.as_raw())
    }
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}
