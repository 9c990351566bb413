//! Reference retargeters, the restoration score and side-by-side sheets.

use std::fs::OpenOptions;
use std::path::Path;
use std::time::Instant;

use font8x8::{UnicodeFonts, BASIC_FONTS};
use serde::{Deserialize, Serialize};

use crate::cycle::{ratio_size, retarget_image, run_cycle};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::loss::{pair_cycle_loss, perceptual_distance, PerceptualLoss};
use crate::model::ModelParams;
use crate::warp::{retarget_sizes, RetargetSpec};

/// Bilinear resize with half-pixel centres and edge clamping, computed
/// pixel by pixel.
pub fn baseline_uniform_scale(image: &ImagePlane, dst: (usize, usize)) -> Result<ImagePlane> {
    if dst.0 == 0 || dst.1 == 0 {
        return Err(Error::InvalidSize(format!("target size {dst:?} is empty")));
    }
    let (h, w) = image.size();
    let coord = |o: usize, src: usize, out: usize| {
        let s = ((o as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(src - 1), (s - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..dst.0).map(|y| coord(y, h, dst.0)).collect();
    let xs: Vec<_> = (0..dst.1).map(|x| coord(x, w, dst.1)).collect();
    Ok(ImagePlane::from_fn(image.channels(), dst.0, dst.1, |c, y, x| {
        let (y0, y1, ty) = ys[y];
        let (x0, x1, tx) = xs[x];
        let top = image.get(c, y0, x0) * (1.0 - tx) + image.get(c, y0, x1) * tx;
        let bottom = image.get(c, y1, x0) * (1.0 - tx) + image.get(c, y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    }))
}

/// Central window of size `dst`; odd margins leave the extra pixel at the
/// bottom/right.
pub fn baseline_center_crop(image: &ImagePlane, dst: (usize, usize)) -> Result<ImagePlane> {
    let (h, w) = image.size();
    if dst.0 > h || dst.1 > w || dst.0 == 0 || dst.1 == 0 {
        return Err(Error::InvalidSize(format!("cannot crop {h}x{w} to {}x{}", dst.0, dst.1)));
    }
    let (oy, ox) = ((h - dst.0) / 2, (w - dst.1) / 2);
    Ok(ImagePlane::from_fn(image.channels(), dst.0, dst.1, |c, y, x| image.get(c, y + oy, x + ox)))
}

/// Pair restoration loss of the model's own cycle on `image`.
pub fn cycle_consistency_score(
    params: &ModelParams,
    loss: &PerceptualLoss,
    image: &ImagePlane,
    spec: &RetargetSpec,
) -> Result<f64> {
    Ok(pair_cycle_loss(loss, image, &run_cycle(params, image, spec)?)?.total)
}

/// The same score for plain bilinear scaling: shrink-and-restore plus
/// enlarge-and-restore.
pub fn uniform_scale_score(loss: &PerceptualLoss, image: &ImagePlane, spec: &RetargetSpec) -> Result<f64> {
    let (lr, hr) = retarget_sizes(image.size(), spec)?;
    let top = baseline_uniform_scale(&baseline_uniform_scale(image, lr)?, image.size())?;
    let bottom = baseline_uniform_scale(&baseline_uniform_scale(image, hr)?, image.size())?;
    Ok(perceptual_distance(loss, image, &top)?.value + perceptual_distance(loss, image, &bottom)?.value)
}

/// A retargeter shown in sheets and scored in records.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    UniformScale,
    CenterCrop,
    Model { name: &'a str, params: &'a ModelParams },
}

impl Method<'_> {
    pub fn name(&self) -> String {
        match self {
            Method::UniformScale => "uniform".into(),
            Method::CenterCrop => "crop".into(),
            Method::Model { name, .. } => name.to_string(),
        }
    }

    pub fn apply(&self, image: &ImagePlane, dst: (usize, usize)) -> Result<ImagePlane> {
        match self {
            Method::UniformScale => baseline_uniform_scale(image, dst),
            Method::CenterCrop => baseline_center_crop(image, dst),
            Method::Model { params, .. } => Ok(retarget_image(params, image, dst)?.image),
        }
    }

    /// Restoration score, where the method has one.
    pub fn score(&self, loss: &PerceptualLoss, image: &ImagePlane, spec: &RetargetSpec) -> Result<Option<f64>> {
        match self {
            Method::UniformScale => uniform_scale_score(loss, image, spec).map(Some),
            Method::CenterCrop => Ok(None),
            Method::Model { params, .. } => cycle_consistency_score(params, loss, image, spec).map(Some),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub method: String,
    pub phi_h: f64,
    pub phi_w: f64,
    pub cycle_score: f64,
    /// seconds spent producing the retargeted image
    pub wall_time: f64,
}

/// Retargets `image` with `method` at the spec's ratios and scores it.
pub fn evaluate(
    image_id: &str,
    method: &Method<'_>,
    loss: &PerceptualLoss,
    image: &ImagePlane,
    spec: &RetargetSpec,
) -> Result<Option<(EvalRecord, ImagePlane)>> {
    let dst = ratio_size(image.size(), spec.phi_h, spec.phi_w)?;
    let start = Instant::now();
    let out = method.apply(image, dst)?;
    let wall_time = start.elapsed().as_secs_f64().max(1e-9);
    let Some(cycle_score) = method.score(loss, image, spec)? else { return Ok(None) };
    let rec = EvalRecord {
        image_id: image_id.to_string(),
        method: method.name(),
        phi_h: spec.phi_h,
        phi_w: spec.phi_w,
        cycle_score,
        wall_time,
    };
    Ok(Some((rec, out)))
}

pub const RECORD_HEADER: [&str; 6] = ["image_id", "method", "phi_h", "phi_w", "cycle_score", "wall_time"];

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(RECORD_HEADER)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(RECORD_HEADER) {
        return Err(Error::Dataset(format!("{} does not have the record header", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

const GLYPH: usize = 8;
const LABEL_HEIGHT: usize = GLYPH + 6;
const GAP: usize = 4;
const BACKGROUND: f32 = 0.0;
const LABEL_BG: f32 = 1.0;

fn label_width(text: &str) -> usize {
    text.chars().count() * GLYPH + 6
}

fn draw_label(sheet: &mut [f32], (h, w): (usize, usize), x0: usize, width: usize, text: &str) {
    for y in 0..LABEL_HEIGHT {
        for x in x0..x0 + width {
            for c in 0..3 {
                sheet[(c * h + y) * w + x] = LABEL_BG;
            }
        }
    }
    for (i, ch) in text.chars().enumerate() {
        let glyph = BASIC_FONTS.get(ch).or_else(|| BASIC_FONTS.get('?')).unwrap_or([0; 8]);
        for (gy, row) in glyph.iter().enumerate() {
            for gx in 0..GLYPH {
                if row >> gx & 1 == 1 {
                    let (y, x) = (3 + gy, x0 + 3 + i * GLYPH + gx);
                    for c in 0..3 {
                        sheet[(c * h + y) * w + x] = 0.0;
                    }
                }
            }
        }
    }
}

/// Lays labelled panels side by side. Shorter panels are centred
/// vertically on a black band; no panel is rescaled.
pub fn compose_sheet(panels: &[(String, ImagePlane)]) -> ImagePlane {
    let body = panels.iter().map(|(_, p)| p.height()).max().unwrap_or(0);
    let widths: Vec<usize> = panels.iter().map(|(l, p)| p.width().max(label_width(l))).collect();
    let w = widths.iter().sum::<usize>() + GAP * panels.len().saturating_sub(1);
    let h = LABEL_HEIGHT + body;
    let mut data = vec![BACKGROUND; 3 * h * w];
    let mut x0 = 0;
    for ((label, p), &pw) in panels.iter().zip(&widths) {
        draw_label(&mut data, (h, w), x0, pw, label);
        let oy = LABEL_HEIGHT + (body - p.height()) / 2;
        let ox = x0 + (pw - p.width()) / 2;
        for c in 0..3 {
            let src_c = c.min(p.channels() - 1);
            for y in 0..p.height() {
                for x in 0..p.width() {
                    data[(c * h + oy + y) * w + ox + x] = p.get(src_c, y, x);
                }
            }
        }
        x0 += pw + GAP;
    }
    ImagePlane::from_tensor(crate::tensor::Tensor::new(vec![3, h, w], data)).expect("three axes")
}

/// Source plus one panel per method at the spec's ratios, written to `out`.
/// Returns the number of panels.
pub fn comparison_sheet(image: &ImagePlane, methods: &[Method<'_>], spec: &RetargetSpec, out: &Path) -> Result<usize> {
    let dst = ratio_size(image.size(), spec.phi_h, spec.phi_w)?;
    let mut panels = vec![("source".to_string(), image.clone())];
    for m in methods {
        panels.push((m.name(), m.apply(image, dst)?));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    compose_sheet(&panels).save(out)?;
    Ok(panels.len())
}
