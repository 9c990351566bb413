//! Planar real-valued images and raster file IO.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `[C, H, W]` image with values in `[0, 1]`; `C` is 3 for colour and 1
/// for saliency maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    data: Tensor<f32>,
}

impl ImagePlane {
    pub fn from_tensor(data: Tensor<f32>) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::ShapeMismatch(format!("image tensor must be [C,H,W], got {:?}", data.shape())));
        }
        Ok(Self { data })
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { data: Tensor::new(vec![channels, height, width], data) }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { data: Tensor::full(vec![channels, height, width], value) }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// `(height, width)`.
    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.max_abs_diff(&other.data)
    }

    pub fn has_nan(&self) -> bool {
        !self.data.all_finite()
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        Self::from_fn(3, h, w, |c, y, x| rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
    }

    pub fn gray_from_dynamic(img: &DynamicImage) -> Self {
        let g = img.to_luma8();
        let (w, h) = (g.width() as usize, g.height() as usize);
        Self::from_fn(1, h, w, |_, y, x| g.get_pixel(x as u32, y as u32)[0] as f32 / 255.0)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_dynamic(&image::open(path)?))
    }

    /// Loads a single-channel map (saliency masks).
    pub fn load_gray(path: &Path) -> Result<Self> {
        Ok(Self::gray_from_dynamic(&image::open(path)?))
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let (h, w) = self.size();
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        if self.channels() == 1 {
            let buf: GrayImage =
                ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([q(self.get(0, y as usize, x as usize))]));
            DynamicImage::ImageLuma8(buf)
        } else {
            let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([q(self.get(0, y, x)), q(self.get(1, y, x)), q(self.get(2, y, x))])
            });
            DynamicImage::ImageRgb8(buf)
        }
    }

    /// Writes the image; the format follows the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_dynamic().save(path)?;
        Ok(())
    }
}

/// True when the extension names a lossless raster format.
pub fn is_lossless_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "bmp")
    )
}

/// True when the extension names a raster format this build can write.
pub fn is_writable_path(path: &Path) -> bool {
    matches!(
        image::ImageFormat::from_path(path),
        Ok(image::ImageFormat::Png | image::ImageFormat::Jpeg | image::ImageFormat::Bmp)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_on_quantized_values() {
        let img = ImagePlane::from_fn(3, 5, 7, |c, y, x| ((c * 31 + y * 7 + x * 13) % 256) as f32 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        img.save(&p).unwrap();
        let back = ImagePlane::load(&p).unwrap();
        assert_eq!(back.size(), (5, 7));
        assert!(img.max_abs_diff(&back) < 1e-6);
    }

    #[test]
    fn format_checks() {
        assert!(is_lossless_path(Path::new("a/b.PNG")) && !is_lossless_path(Path::new("x.jpg")));
        assert!(is_writable_path(Path::new("x.jpeg")) && !is_writable_path(Path::new("x.tiff")));
        assert!(!is_writable_path(Path::new("noext")));
    }

    #[test]
    fn gray_roundtrip() {
        let img = ImagePlane::from_fn(1, 4, 3, |_, y, x| (y * 3 + x) as f32 / 11.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        img.save(&p).unwrap();
        let back = ImagePlane::load_gray(&p).unwrap();
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-6);
    }
}
