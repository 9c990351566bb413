//! Toy object-on-background composites for smoke training and for checking
//! where the attention lands.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::ImagePlane;

/// A composite and its binary object mask (`[1, H, W]`, 1 inside).
#[derive(Clone, Debug)]
pub struct Composite {
    pub image: ImagePlane,
    pub mask: ImagePlane,
}

/// One textured ellipse on a flat, slightly shaded background.
pub fn composite(seed: u64, height: usize, width: usize) -> Composite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let shade = rng.random_range(-0.08f32..0.08);

    let (h, w) = (height as f32, width as f32);
    let ry = h * rng.random_range(0.14..0.24);
    let rx = w * rng.random_range(0.14..0.24);
    let cy = rng.random_range(ry + 1.0..h - ry - 1.0);
    let cx = rng.random_range(rx + 1.0..w - rx - 1.0);

    let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let freq = rng.random_range(0.6f32..1.4);
    let (ca, sa) = (angle.cos(), angle.sin());
    let palette: [[f32; 3]; 2] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0)));
    let noise: Vec<f32> = (0..height * width).map(|_| rng.random_range(-0.12..0.12)).collect();

    let inside = |y: usize, x: usize| {
        let dy = (y as f32 + 0.5 - cy) / ry;
        let dx = (x as f32 + 0.5 - cx) / rx;
        dy * dy + dx * dx <= 1.0
    };
    let image = ImagePlane::from_fn(3, height, width, |c, y, x| {
        if inside(y, x) {
            let u = (x as f32 * ca + y as f32 * sa) * freq;
            let v = (y as f32 * ca - x as f32 * sa) * freq * 0.7;
            let t = 0.5 + 0.5 * (u.sin() * v.cos());
            let base = palette[0][c] * t + palette[1][c] * (1.0 - t);
            (base + noise[y * width + x]).clamp(0.0, 1.0)
        } else {
            (bg[c] + shade * (y as f32 / h - 0.5)).clamp(0.0, 1.0)
        }
    });
    let mask = ImagePlane::from_fn(1, height, width, |_, y, x| if inside(y, x) { 1.0 } else { 0.0 });
    Composite { image, mask }
}

/// Writes `count` composites as `toy_NNN.png` into `dir` and their masks
/// under `dir/saliency` with the same file names.
pub fn write_toy_set(dir: &Path, count: usize, size: (usize, usize), seed: u64) -> Result<()> {
    let masks = dir.join("saliency");
    std::fs::create_dir_all(&masks)?;
    for i in 0..count {
        let c = composite(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), size.0, size.1);
        let name = format!("toy_{i:03}.png");
        c.image.save(&dir.join(&name))?;
        c.mask.save(&masks.join(&name))?;
    }
    Ok(())
}
