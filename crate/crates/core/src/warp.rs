//! Attention-driven axis-aligned grid warping.
//!
//! An [`AttentionMap`] of `M x N` logits is turned into per-row and
//! per-column scale factors. Output-space cell sizes are proportional to
//! those factors; every output pixel is mapped back through the resulting
//! piecewise-linear function and bilinearly sampled from the source.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::ImagePlane;
use crate::model::AttentionMap;
use crate::tensor::{separable_apply, sigmoid, Scalar, Tensor};

/// Below this every scale factor counts as zero.
pub const PROFILE_EPS: f64 = 1e-8;

/// Target ratios and expansion controls of one retargeting request.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetargetSpec {
    pub phi_h: f64,
    pub phi_w: f64,
    pub mu_h: f64,
    pub mu_w: f64,
    pub psi_h: f64,
    pub psi_w: f64,
}

impl RetargetSpec {
    pub fn new(phi_h: f64, phi_w: f64) -> Self {
        Self { phi_h, phi_w, mu_h: 1.0, mu_w: 1.0, psi_h: 1.0, psi_w: 1.0 }
    }

    pub fn with_psi(mut self, psi_h: f64, psi_w: f64) -> Self {
        self.psi_h = psi_h;
        self.psi_w = psi_w;
        self
    }

    pub fn with_mu(mut self, mu_h: f64, mu_w: f64) -> Self {
        self.mu_h = mu_h;
        self.mu_w = mu_w;
        self
    }

    /// Checks the shrink-only contract of the two-output cycle.
    pub fn validate_cycle(&self) -> Result<()> {
        for (name, phi) in [("phi_h", self.phi_h), ("phi_w", self.phi_w)] {
            if !(phi > 0.0 && phi <= 1.0) {
                return Err(Error::InvalidRatio(format!("{name} = {phi} must lie in (0, 1]")));
            }
        }
        for (name, mu) in [("mu_h", self.mu_h), ("mu_w", self.mu_w)] {
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(Error::InvalidRatio(format!("{name} = {mu} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileKind {
    Lr,
    Hr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingProfile {
    pub row_scales: Vec<f64>,
    pub col_scales: Vec<f64>,
    pub kind: ProfileKind,
}

/// Output-space cell boundaries of a separable warp.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpGrid {
    pub row_edges: Vec<f64>,
    pub col_edges: Vec<f64>,
    pub src_size: (usize, usize),
    pub dst_size: (usize, usize),
}

impl WarpGrid {
    pub fn uniform(rows: usize, cols: usize, src_size: (usize, usize), dst_size: (usize, usize)) -> Self {
        Self {
            row_edges: uniform_edges(rows),
            col_edges: uniform_edges(cols),
            src_size,
            dst_size,
        }
    }

    /// Plain-text dump: one line of row edges, one line of column edges.
    pub fn to_text(&self) -> String {
        let line = |v: &[f64]| v.iter().map(|e| format!("{e:.9}")).collect::<Vec<_>>().join(" ");
        format!("{}\n{}\n", line(&self.row_edges), line(&self.col_edges))
    }
}

fn uniform_edges(cells: usize) -> Vec<f64> {
    (0..=cells).map(|k| k as f64 / cells as f64).collect()
}

/// Per-row and per-column means of the sigmoid of the attention logits.
pub fn scaling_profile_lr(attn: &AttentionMap) -> ScalingProfile {
    let (m, n) = attn.dims();
    let s: Vec<f64> = attn.values().data().iter().map(|&v| sigmoid(v as f64)).collect();
    let row_scales = (0..m).map(|i| s[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let col_scales = (0..n).map(|j| (0..m).map(|i| s[i * n + j]).sum::<f64>() / m as f64).collect();
    ScalingProfile { row_scales, col_scales, kind: ProfileKind::Lr }
}

/// Expansion profile `1 - S_lr + psi`.
pub fn scaling_profile_hr(lr: &ScalingProfile, spec: &RetargetSpec) -> Result<ScalingProfile> {
    if lr.kind != ProfileKind::Lr {
        return Err(Error::InvalidProfile("expansion profile must be derived from a shrink profile".into()));
    }
    Ok(ScalingProfile {
        row_scales: lr.row_scales.iter().map(|s| 1.0 - s + spec.psi_h).collect(),
        col_scales: lr.col_scales.iter().map(|s| 1.0 - s + spec.psi_w).collect(),
        kind: ProfileKind::Hr,
    })
}

/// Cumulative output-space edges `[0, .., 1]` of cells proportional to
/// `scales`.
pub fn profile_edges(scales: &[f64]) -> Result<Vec<f64>> {
    if scales.is_empty() {
        return Err(Error::InvalidProfile("empty profile".into()));
    }
    if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidProfile(format!("scale factors must be finite and non-negative: {scales:?}")));
    }
    if scales.iter().all(|&s| s <= PROFILE_EPS) {
        return Err(Error::CollapsedProfile);
    }
    let total: f64 = scales.iter().sum();
    let mut edges = Vec::with_capacity(scales.len() + 1);
    let mut acc = 0.0;
    edges.push(0.0);
    for s in &scales[..scales.len() - 1] {
        acc += s;
        edges.push(acc / total);
    }
    edges.push(1.0);
    Ok(edges)
}

pub fn normalize_profile(
    profile: &ScalingProfile,
    src_size: (usize, usize),
    dst_size: (usize, usize),
) -> Result<WarpGrid> {
    check_size("source", src_size)?;
    check_size("target", dst_size)?;
    Ok(WarpGrid {
        row_edges: profile_edges(&profile.row_scales)?,
        col_edges: profile_edges(&profile.col_scales)?,
        src_size,
        dst_size,
    })
}

fn check_size(what: &str, (h, w): (usize, usize)) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidSize(format!("{what} size {h}x{w} must be positive")));
    }
    Ok(())
}

/// Source pixel coordinate sampled by each output pixel along one axis.
///
/// Output pixel `y` has centre `u = (y + 0.5) / dst`. It lies in output
/// cell `k` (`edges[k] <= u < edges[k+1]`) at fraction `t`, which maps to
/// the source position `(k + t) / K`, i.e. pixel coordinate
/// `src * (k + t) / K - 0.5`, clamped to the image.
#[derive(Clone, Copy, Debug)]
struct AxisSample {
    cell: usize,
    /// d t / d edges[cell] and d t / d edges[cell + 1]
    dt_lo: f64,
    dt_hi: f64,
    lower: usize,
    frac: f64,
    /// false when the coordinate was clamped (zero derivative)
    interior: bool,
}

fn axis_samples(edges: &[f64], src: usize, dst: usize) -> Vec<AxisSample> {
    let cells = edges.len() - 1;
    let mut k = 0;
    (0..dst)
        .map(|y| {
            let u = (y as f64 + 0.5) / dst as f64;
            while k + 1 < cells && u >= edges[k + 1] {
                k += 1;
            }
            let (lo, hi) = (edges[k], edges[k + 1]);
            let width = hi - lo;
            let t = ((u - lo) / width).clamp(0.0, 1.0);
            let s = src as f64 * (k as f64 + t) / cells as f64 - 0.5;
            let max = (src - 1) as f64;
            let (s, interior) = if s <= 0.0 {
                (0.0, false)
            } else if s >= max {
                (max, false)
            } else {
                (s, true)
            };
            let lower = (s.floor() as usize).min(src - 1);
            AxisSample {
                cell: k,
                dt_lo: (u - hi) / (width * width),
                dt_hi: -(u - lo) / (width * width),
                lower,
                frac: s - lower as f64,
                interior,
            }
        })
        .collect()
}

fn matrix_from_samples(samples: &[AxisSample], src: usize) -> Vec<f64> {
    let mut m = vec![0.0; samples.len() * src];
    for (y, s) in samples.iter().enumerate() {
        let row = &mut m[y * src..(y + 1) * src];
        row[s.lower] += 1.0 - s.frac;
        if s.frac > 0.0 {
            row[s.lower + 1] += s.frac;
        }
    }
    m
}

/// Row-major `[dst, src]` bilinear sampling matrix for one axis of the warp
/// defined by `edges`.
pub fn sampling_matrix_from_edges(edges: &[f64], src: usize, dst: usize) -> Vec<f64> {
    matrix_from_samples(&axis_samples(edges, src, dst), src)
}

/// Vector-Jacobian product of the sampling matrix with respect to the raw
/// (unnormalized) profile it was built from.
pub struct ProfileJacobian {
    profile_sum: f64,
    edges: Vec<f64>,
    samples: Vec<AxisSample>,
    src: usize,
}

impl ProfileJacobian {
    /// `grad` is `d loss / d matrix` (`[dst, src]`); returns
    /// `d loss / d profile`.
    pub fn vjp(&self, grad: &[f64]) -> Vec<f64> {
        let cells = self.edges.len() - 1;
        let src = self.src;
        let scale = src as f64 / cells as f64;
        // d loss / d edges, then edges -> profile
        let mut d_edges = vec![0.0; cells + 1];
        for (y, s) in self.samples.iter().enumerate() {
            if !s.interior {
                continue;
            }
            let row = &grad[y * src..(y + 1) * src];
            let upper = (s.lower + 1).min(src - 1);
            let d_coord = row[upper] - row[s.lower];
            d_edges[s.cell] += d_coord * scale * s.dt_lo;
            d_edges[s.cell + 1] += d_coord * scale * s.dt_hi;
        }
        // e_j = sum_{i<j} p_i / P  =>  d e_j / d p_i = ([i < j] - e_j) / P
        let weighted: f64 = d_edges.iter().zip(&self.edges).map(|(d, e)| d * e).sum();
        let mut suffix = 0.0;
        let mut out = vec![0.0; cells];
        for i in (0..cells).rev() {
            suffix += d_edges[i + 1];
            out[i] = (suffix - weighted) / self.profile_sum;
        }
        out
    }
}

/// Sampling matrix for cells proportional to `profile`, optionally with its
/// Jacobian.
pub fn sampling_matrix_from_profile(
    profile: &[f64],
    src: usize,
    dst: usize,
    want_jacobian: bool,
) -> Result<(Vec<f64>, Option<ProfileJacobian>)> {
    let edges = profile_edges(profile)?;
    let samples = axis_samples(&edges, src, dst);
    let matrix = matrix_from_samples(&samples, src);
    let jac = want_jacobian.then(|| ProfileJacobian {
        profile_sum: profile.iter().sum(),
        edges,
        samples,
        src,
    });
    Ok((matrix, jac))
}

fn matrix_tensor<T: Scalar>(m: Vec<f64>, rows: usize, cols: usize) -> Tensor<T> {
    Tensor::new(vec![rows, cols], m.into_iter().map(T::lit).collect())
}

/// Plain bilinear resizing matrix (a single uniform cell).
pub fn uniform_matrix<T: Scalar>(src: usize, dst: usize) -> Tensor<T> {
    matrix_tensor(sampling_matrix_from_edges(&[0.0, 1.0], src, dst), dst, src)
}

pub fn resample(image: &ImagePlane, grid: &WarpGrid) -> Result<ImagePlane> {
    if image.size() != grid.src_size {
        return Err(Error::ShapeMismatch(format!(
            "image is {:?} but the grid expects {:?}",
            image.size(),
            grid.src_size
        )));
    }
    check_size("target", grid.dst_size)?;
    let (h, w) = grid.src_size;
    let (dh, dw) = grid.dst_size;
    let rows = matrix_tensor::<f32>(sampling_matrix_from_edges(&grid.row_edges, h, dh), dh, h);
    let cols = matrix_tensor::<f32>(sampling_matrix_from_edges(&grid.col_edges, w, dw), dw, w);
    ImagePlane::from_tensor(separable_apply(image.tensor(), &rows, &cols))
}

/// Plain bilinear resize through the warp machinery.
pub fn resize_uniform(image: &ImagePlane, dst: (usize, usize)) -> Result<ImagePlane> {
    resample(image, &WarpGrid::uniform(1, 1, image.size(), dst))
}

/// `floor(x + 0.5)`, never below 1.
pub fn round_size(x: f64) -> usize {
    ((x + 0.5).floor().max(1.0)) as usize
}

fn rounded_checked(x: f64, what: &str) -> Result<usize> {
    let r = (x + 0.5).floor();
    if !(r >= 1.0) || !r.is_finite() {
        return Err(Error::InvalidSize(format!("{what} evaluates to {x}, below one pixel")));
    }
    Ok(r as usize)
}

/// Shrunk and expanded sizes `(phi * src, mu / phi * src)` per axis.
pub fn retarget_sizes(src: (usize, usize), spec: &RetargetSpec) -> Result<((usize, usize), (usize, usize))> {
    spec.validate_cycle()?;
    check_size("source", src)?;
    let (h, w) = (src.0 as f64, src.1 as f64);
    let lr = (rounded_checked(spec.phi_h * h, "shrunk height")?, rounded_checked(spec.phi_w * w, "shrunk width")?);
    let hr = (
        rounded_checked(spec.mu_h / spec.phi_h * h, "expanded height")?,
        rounded_checked(spec.mu_w / spec.phi_w * w, "expanded width")?,
    );
    Ok((lr, hr))
}

// ---- differentiable path ------------------------------------------------

/// Per-axis scale factors of a `[M, N]` logit node: `(rows [M], cols [N])`.
pub fn profile_vars<T: Scalar>(g: &mut Graph<T>, logits: Var) -> (Var, Var) {
    let s = g.sigmoid(logits);
    (g.mean_axis(s, 1), g.mean_axis(s, 0))
}

/// `1 - s + psi`.
pub fn expansion_var<T: Scalar>(g: &mut Graph<T>, lr: Var, psi: f64) -> Var {
    g.affine(lr, -T::one(), T::lit(1.0 + psi))
}

/// Warps `image: [C,H,W]` to `dst` with cells proportional to the given
/// row and column profiles.
pub fn warp_var<T: Scalar>(g: &mut Graph<T>, image: Var, rows: Var, cols: Var, dst: (usize, usize)) -> Result<Var> {
    let (_, h, w) = g.value(image).chw();
    for p in [rows, cols] {
        let v: Vec<f64> = g.value(p).data().iter().map(|x| x.as_f64()).collect();
        profile_edges(&v)?;
    }
    let rm = g.warp_matrix(rows, h, dst.0);
    let cm = g.warp_matrix(cols, w, dst.1);
    Ok(g.separable_resample(image, rm, cm))
}

/// Differentiable plain bilinear resize of `x: [C,H,W]`.
pub fn resize_var<T: Scalar>(g: &mut Graph<T>, x: Var, dst: (usize, usize)) -> Var {
    let (_, h, w) = g.value(x).chw();
    let rm = g.constant(uniform_matrix(h, dst.0));
    let cm = g.constant(uniform_matrix(w, dst.1));
    g.separable_resample(x, rm, cm)
}

/// Retargets with a caller-supplied attention map: shrinks with the LR
/// profile and expands with the HR profile to the sizes implied by `spec`.
pub fn forward_with_attention(
    image: &ImagePlane,
    attn: &AttentionMap,
    spec: &RetargetSpec,
) -> Result<(ImagePlane, ImagePlane)> {
    let (lr_size, hr_size) = retarget_sizes(image.size(), spec)?;
    let lr = scaling_profile_lr(attn);
    let hr = scaling_profile_hr(&lr, spec)?;
    let shrunk = resample(image, &normalize_profile(&lr, image.size(), lr_size)?)?;
    let expanded = resample(image, &normalize_profile(&hr, image.size(), hr_size)?)?;
    Ok((shrunk, expanded))
}
