//! Two-stage retargeting: shrink and expand the source, then feed both
//! results back through the same network to restore the source size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::ImagePlane;
use crate::model::{attention_for_image, attention_vars, features_var, AttentionMap, BoundModel, ModelParams};
use crate::tensor::Scalar;
use crate::warp::{
    expansion_var, profile_edges, profile_vars, resample, retarget_sizes, round_size, scaling_profile_lr, warp_var,
    RetargetSpec, WarpGrid,
};

/// The six images of one cycle plus the first-stage attention.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleOutputs {
    pub i_lr: ImagePlane,
    pub i_hr: ImagePlane,
    pub top_lr: ImagePlane,
    pub top_hr: ImagePlane,
    pub bottom_lr: ImagePlane,
    pub bottom_hr: ImagePlane,
    pub attn_fwd: AttentionMap,
}

impl CycleOutputs {
    /// `(suffix, image)` in canonical dump order.
    pub fn named(&self) -> [(&'static str, &ImagePlane); 6] {
        [
            ("lr", &self.i_lr),
            ("hr", &self.i_hr),
            ("top_lr", &self.top_lr),
            ("top_hr", &self.top_hr),
            ("bottom_lr", &self.bottom_lr),
            ("bottom_hr", &self.bottom_hr),
        ]
    }
}

/// Which retargeted image is being fed back.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CycleBranch {
    /// the shrunk image; restoring it is the upper path
    Top,
    /// the expanded image; restoring it is the lower path
    Bottom,
}

/// Outputs of one pass of the network on one image.
pub struct StageVars {
    /// `[1, M, N]`
    pub logits: Var,
    pub shrunk: Option<Var>,
    pub expanded: Option<Var>,
}

/// One attention pass on `image`, followed by a shrinking warp to
/// `shrunk_dst` and an expanding warp to `expanded_dst` (each optional).
pub fn stage_vars<T: Scalar>(
    g: &mut Graph<T>,
    bm: &BoundModel,
    image: Var,
    spec: &RetargetSpec,
    shrunk_dst: Option<(usize, usize)>,
    expanded_dst: Option<(usize, usize)>,
) -> Result<StageVars> {
    let fmap = features_var(g, bm, image)?;
    let logits = attention_vars(g, bm, fmap).logits;
    let (rows, cols) = profile_vars(g, logits);
    let shrunk = match shrunk_dst {
        Some(dst) => Some(warp_var(g, image, rows, cols, dst)?),
        None => None,
    };
    let expanded = match expanded_dst {
        Some(dst) => {
            let r = expansion_var(g, rows, spec.psi_h);
            let c = expansion_var(g, cols, spec.psi_w);
            Some(warp_var(g, image, r, c, dst)?)
        }
        None => None,
    };
    Ok(StageVars { logits, shrunk, expanded })
}

/// Which parts of the cycle to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CycleRequest {
    pub top: bool,
    pub bottom: bool,
    /// also build the re-shrunk and re-expanded images no loss consumes
    pub discarded: bool,
}

impl CycleRequest {
    pub const ALL: Self = Self { top: true, bottom: true, discarded: true };
    pub const LOSS: Self = Self { top: true, bottom: true, discarded: false };

    pub fn only(branch: CycleBranch) -> Self {
        Self { top: branch == CycleBranch::Top, bottom: branch == CycleBranch::Bottom, discarded: false }
    }
}

pub struct CycleVars {
    pub i_lr: Var,
    pub i_hr: Var,
    pub attn_fwd: Var,
    pub top_lr: Option<Var>,
    pub top_hr: Option<Var>,
    pub bottom_lr: Option<Var>,
    pub bottom_hr: Option<Var>,
}

/// Builds the cycle for `image: [3, H, W]` on `g`. Both stages read the
/// same bound weights.
pub fn cycle_vars<T: Scalar>(
    g: &mut Graph<T>,
    bm: &BoundModel,
    image: Var,
    spec: &RetargetSpec,
    request: CycleRequest,
) -> Result<CycleVars> {
    let (_, h, w) = g.value(image).chw();
    let original = (h, w);
    let (lr_size, hr_size) = retarget_sizes(original, spec)?;
    let fwd = stage_vars(g, bm, image, spec, Some(lr_size), Some(hr_size))?;
    let (i_lr, i_hr) = (fwd.shrunk.unwrap(), fwd.expanded.unwrap());
    let mut out =
        CycleVars { i_lr, i_hr, attn_fwd: fwd.logits, top_lr: None, top_hr: None, bottom_lr: None, bottom_hr: None };
    if request.top {
        let re_shrunk = request.discarded.then(|| retarget_sizes(lr_size, spec)).transpose()?.map(|s| s.0);
        let st = stage_vars(g, bm, i_lr, spec, re_shrunk, Some(original))?;
        out.top_lr = st.shrunk;
        out.top_hr = st.expanded;
    }
    if request.bottom {
        let re_expanded = request.discarded.then(|| retarget_sizes(hr_size, spec)).transpose()?.map(|s| s.1);
        let st = stage_vars(g, bm, i_hr, spec, Some(original), re_expanded)?;
        out.bottom_lr = st.shrunk;
        out.bottom_hr = st.expanded;
    }
    Ok(out)
}

fn plane<T: Scalar>(g: &Graph<T>, v: Var) -> ImagePlane {
    ImagePlane::from_tensor(g.value(v).cast()).expect("warp outputs are [C,H,W]")
}

fn logits_map<T: Scalar>(g: &Graph<T>, v: Var) -> Result<AttentionMap> {
    AttentionMap::new(g.value(v).cast())
}

fn input_var(g: &mut Graph<f32>, image: &ImagePlane) -> Var {
    g.constant(image.tensor().clone())
}

/// Shrinks and expands `image` to the sizes implied by `spec`, returning
/// `(I_LR, I_HR, attention)`.
pub fn forward_retarget(
    params: &ModelParams,
    image: &ImagePlane,
    spec: &RetargetSpec,
) -> Result<(ImagePlane, ImagePlane, AttentionMap)> {
    let (lr_size, hr_size) = retarget_sizes(image.size(), spec)?;
    let mut g = Graph::new();
    let bm = params.bind(&mut g, false);
    let x = input_var(&mut g, image);
    let st = stage_vars(&mut g, &bm, x, spec, Some(lr_size), Some(hr_size))?;
    Ok((plane(&g, st.shrunk.unwrap()), plane(&g, st.expanded.unwrap()), logits_map(&g, st.logits)?))
}

/// Feeds a first-stage output back through the network. For
/// [`CycleBranch::Top`] the input is `I_LR` and the result is
/// `(top_lr, top_hr)`; for [`CycleBranch::Bottom`] it is `I_HR` and
/// `(bottom_lr, bottom_hr)`. The restored image is always `original_size`.
pub fn reverse_retarget(
    params: &ModelParams,
    retargeted: &ImagePlane,
    original_size: (usize, usize),
    spec: &RetargetSpec,
    branch: CycleBranch,
) -> Result<(ImagePlane, ImagePlane)> {
    let (lr_size, hr_size) = retarget_sizes(retargeted.size(), spec)?;
    let (shrunk_dst, expanded_dst) = match branch {
        CycleBranch::Top => (lr_size, original_size),
        CycleBranch::Bottom => (original_size, hr_size),
    };
    let mut g = Graph::new();
    let bm = params.bind(&mut g, false);
    let x = input_var(&mut g, retargeted);
    let st = stage_vars(&mut g, &bm, x, spec, Some(shrunk_dst), Some(expanded_dst))?;
    Ok((plane(&g, st.shrunk.unwrap()), plane(&g, st.expanded.unwrap())))
}

pub fn run_cycle(params: &ModelParams, image: &ImagePlane, spec: &RetargetSpec) -> Result<CycleOutputs> {
    let mut g = Graph::new();
    let bm = params.bind(&mut g, false);
    let x = input_var(&mut g, image);
    let cv = cycle_vars(&mut g, &bm, x, spec, CycleRequest::ALL)?;
    Ok(CycleOutputs {
        i_lr: plane(&g, cv.i_lr),
        i_hr: plane(&g, cv.i_hr),
        top_lr: plane(&g, cv.top_lr.unwrap()),
        top_hr: plane(&g, cv.top_hr.unwrap()),
        bottom_lr: plane(&g, cv.bottom_lr.unwrap()),
        bottom_hr: plane(&g, cv.bottom_hr.unwrap()),
        attn_fwd: logits_map(&g, cv.attn_fwd)?,
    })
}

/// Result of single-shot retargeting.
#[derive(Clone, Debug)]
pub struct Retargeted {
    pub image: ImagePlane,
    pub attention: AttentionMap,
    pub grid: WarpGrid,
}

/// Target size for per-axis ratios.
pub fn ratio_size(src: (usize, usize), phi_h: f64, phi_w: f64) -> Result<(usize, usize)> {
    if !(phi_h > 0.0 && phi_w > 0.0 && phi_h.is_finite() && phi_w.is_finite()) {
        return Err(Error::InvalidRatio(format!("ratios must be positive, got {phi_h} x {phi_w}")));
    }
    Ok((round_size(phi_h * src.0 as f64), round_size(phi_w * src.1 as f64)))
}

/// Per-axis grid for single-shot retargeting: shrinking axes follow the
/// shrink profile, enlarging axes the expansion profile with adjustment
/// `psi`, and an axis whose size is unchanged is left untouched.
pub fn inference_grid(attn: &AttentionMap, src: (usize, usize), dst: (usize, usize), psi: (f64, f64)) -> Result<WarpGrid> {
    if dst.0 == 0 || dst.1 == 0 {
        return Err(Error::InvalidSize(format!("target size {dst:?} is empty")));
    }
    let lr = scaling_profile_lr(attn);
    let axis = |scales: &[f64], s: usize, d: usize, psi: f64| -> Result<Vec<f64>> {
        if d == s {
            profile_edges(&vec![1.0; scales.len()])
        } else if d < s {
            profile_edges(scales)
        } else {
            profile_edges(&scales.iter().map(|v| 1.0 - v + psi).collect::<Vec<_>>())
        }
    };
    Ok(WarpGrid {
        row_edges: axis(&lr.row_scales, src.0, dst.0, psi.0)?,
        col_edges: axis(&lr.col_scales, src.1, dst.1, psi.1)?,
        src_size: src,
        dst_size: dst,
    })
}

/// Retargets `image` to exactly `dst` in one pass.
pub fn retarget_image(params: &ModelParams, image: &ImagePlane, dst: (usize, usize)) -> Result<Retargeted> {
    let attention = attention_for_image(image, params)?;
    let grid = inference_grid(&attention, image.size(), dst, (1.0, 1.0))?;
    let out = resample(image, &grid)?;
    Ok(Retargeted { image: out, attention, grid })
}
