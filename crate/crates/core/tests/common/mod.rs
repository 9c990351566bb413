#![allow(dead_code)]

use std::sync::OnceLock;

use cycle_ir_core::image::ImagePlane;
use cycle_ir_core::model::{ModelConfig, ModelParams, Vgg16};

pub fn vgg() -> &'static Vgg16 {
    static V: OnceLock<Vgg16> = OnceLock::new();
    V.get_or_init(|| Vgg16::seeded(16))
}

pub fn zero_model(grid: (usize, usize)) -> ModelParams {
    ModelParams::zero_init(ModelConfig { grid, ..ModelConfig::default() }, vgg()).unwrap()
}

pub fn random_model(grid: (usize, usize)) -> ModelParams {
    ModelParams::with_backbone(ModelConfig { grid, init_std: 0.05, ..ModelConfig::default() }, vgg()).unwrap()
}

/// Smooth, photo-like test pattern.
pub fn photo(h: usize, w: usize, seed: usize) -> ImagePlane {
    let k = seed as f32;
    ImagePlane::from_fn(3, h, w, |c, y, x| {
        let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
        let v = 0.5 + 0.35 * ((9.0 + k) * fx + c as f32 + k).sin() * ((4.0 + 0.5 * k) * fy + 2.0 * fx * fy).cos();
        v.clamp(0.0, 1.0)
    })
}

/// Independent bilinear resize: half-pixel centres, clamped at the border.
pub fn bilinear(img: &ImagePlane, dh: usize, dw: usize) -> ImagePlane {
    let (h, w) = img.size();
    let src = |o: usize, n: usize, d: usize| ((o as f64 + 0.5) * n as f64 / d as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    ImagePlane::from_fn(img.channels(), dh, dw, |c, y, x| {
        let (sy, sx) = (src(y, h, dh), src(x, w, dw));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let p = |yy, xx| img.get(c, yy, xx) as f64;
        let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
        v as f32
    })
}

/// Plain mean of squared differences.
pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / a.len() as f64
}
