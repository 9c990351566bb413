//! Cycle reconstruction losses.
//!
//! The main objective compares the source with its two reconstructions in
//! the feature space of a frozen VGG-16 (block 4 and block 5 activations,
//! weighted by `beta`). Pixel and saliency-guided variants exist for
//! ablations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cycle::{CycleBranch, CycleOutputs};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::ImagePlane;
use crate::model::{AttentionMap, Vgg16, IMAGENET_MEAN, VGG16_POOL_AFTER};
use crate::tensor::{conv2d_forward, max_pool2_forward, sigmoid, Scalar, Tensor};
use crate::warp::uniform_matrix;

/// Which VGG-16 blocks contribute and how they are weighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    /// `(block, beta)` pairs; the block's final rectified activation is used.
    pub layers: Vec<(u32, f64)>,
    /// Normalizer `L` of the layer sum.
    pub depth: u32,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self { layers: vec![(4, 1.0), (5, 3.0)], depth: 5 }
    }
}

/// Frozen feature extractor plus layer weighting.
#[derive(Clone, Debug)]
pub struct PerceptualLoss<T = f32> {
    pub vgg: Vgg16<T>,
    pub config: PerceptualConfig,
}

impl<T: Scalar> PerceptualLoss<T> {
    pub fn new(vgg: Vgg16<T>) -> Self {
        Self { vgg, config: PerceptualConfig::default() }
    }

    pub fn with_config(vgg: Vgg16<T>, config: PerceptualConfig) -> Self {
        Self { vgg, config }
    }

    /// Index of the last convolution of `block` (1-based).
    fn conv_index(block: u32) -> usize {
        VGG16_POOL_AFTER[block as usize - 1]
    }

    fn last_conv(&self) -> usize {
        self.config.layers.iter().map(|&(b, _)| Self::conv_index(b)).max().unwrap_or(0)
    }

    /// Weight applied to the mean squared feature difference of one layer.
    fn layer_scale(&self, beta: f64) -> f64 {
        beta * beta / self.config.depth as f64
    }

    /// Features of a constant image, computed outside any tape.
    pub fn features(&self, image: &Tensor<T>) -> Vec<Tensor<T>> {
        let (_, h, w) = image.chw();
        let mut x = image.clone();
        for (ci, plane) in x.data_mut().chunks_mut(h * w).enumerate() {
            let m = T::lit(IMAGENET_MEAN[ci]);
            for v in plane {
                *v = *v - m;
            }
        }
        let mut taps = BTreeMap::new();
        for i in 0..=self.last_conv() {
            let layer = &self.vgg.layers[i];
            x = conv2d_forward(&x, &layer.weight, &layer.bias, true);
            taps.insert(i, x.clone());
            if VGG16_POOL_AFTER.contains(&i) && i < self.last_conv() {
                x = max_pool2_forward(&x).0;
            }
        }
        self.config.layers.iter().map(|&(b, _)| taps[&Self::conv_index(b)].clone()).collect()
    }

    /// Adds the extractor's weights to `g` as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundExtractor {
        BoundExtractor {
            layers: self.vgg.layers[..=self.last_conv()]
                .iter()
                .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
                .collect(),
        }
    }

    fn feature_vars(&self, g: &mut Graph<T>, bound: &BoundExtractor, x: Var) -> Vec<Var> {
        let shifts: Vec<T> = IMAGENET_MEAN.iter().map(|&m| T::lit(m)).collect();
        let mut x = g.shift_channels(x, &shifts);
        let mut taps = BTreeMap::new();
        let last = self.last_conv();
        for (i, &(w, b)) in bound.layers.iter().enumerate() {
            x = g.conv2d(x, w, b, true);
            taps.insert(i, x);
            if VGG16_POOL_AFTER.contains(&i) && i < last {
                x = g.max_pool2(x);
            }
        }
        self.config.layers.iter().map(|&(b, _)| taps[&Self::conv_index(b)]).collect()
    }

    /// Distance between `x` and an image whose features are `target`.
    /// Returns the total and one node per configured layer.
    pub fn distance_var(
        &self,
        g: &mut Graph<T>,
        bound: &BoundExtractor,
        target: &[Tensor<T>],
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let feats = self.feature_vars(g, bound, x);
        let mut per_layer = Vec::with_capacity(feats.len());
        for ((f, t), &(_, beta)) in feats.into_iter().zip(target).zip(&self.config.layers) {
            if g.value(f).shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "feature shapes differ: {:?} vs {:?}",
                    g.value(f).shape(),
                    t.shape()
                )));
            }
            let tv = g.constant(t.clone());
            per_layer.push(g.scaled_mse(f, tv, T::lit(self.layer_scale(beta))));
        }
        let mut total = per_layer[0];
        for &v in &per_layer[1..] {
            total = g.add(total, v);
        }
        Ok((total, per_layer))
    }
}

/// Graph handles of the extractor weights.
pub struct BoundExtractor {
    layers: Vec<(Var, Var)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualDistance {
    pub value: f64,
    pub per_layer: BTreeMap<u32, f64>,
}

fn same_size(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::ShapeMismatch(format!(
            "images differ in shape: {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    Ok(())
}

pub fn perceptual_distance(loss: &PerceptualLoss, a: &ImagePlane, b: &ImagePlane) -> Result<PerceptualDistance> {
    same_size(a, b)?;
    let fa = loss.features(a.tensor());
    let fb = loss.features(b.tensor());
    let mut per_layer = BTreeMap::new();
    let mut value = 0.0;
    for ((x, y), &(block, beta)) in fa.iter().zip(&fb).zip(&loss.config.layers) {
        let mse = x.data().iter().zip(y.data()).map(|(&p, &q)| ((p - q) as f64).powi(2)).sum::<f64>() / x.len() as f64;
        let v = loss.layer_scale(beta) * mse;
        per_layer.insert(block, v);
        value += v;
    }
    Ok(PerceptualDistance { value, per_layer })
}

/// Breakdown of one loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// source vs. the reconstruction of the shrunk image
    pub term_top: f64,
    /// source vs. the reconstruction of the expanded image
    pub term_bottom: f64,
    #[serde(deserialize_with = "block_keys")]
    pub per_layer: BTreeMap<u32, f64>,
    pub layers: Vec<(u32, f64)>,
}

// Flattened records hand map keys over as strings.
fn block_keys<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<u32, f64>, D::Error> {
    BTreeMap::<String, f64>::deserialize(d)?
        .into_iter()
        .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(serde::de::Error::custom))
        .collect()
}

impl LossReport {
    fn from_terms(top: Option<PerceptualDistance>, bottom: Option<PerceptualDistance>, config: &PerceptualConfig) -> Self {
        let mut per_layer: BTreeMap<u32, f64> = config.layers.iter().map(|&(b, _)| (b, 0.0)).collect();
        for d in top.iter().chain(bottom.iter()) {
            for (k, v) in &d.per_layer {
                *per_layer.entry(*k).or_default() += v;
            }
        }
        let term_top = top.map_or(0.0, |d| d.value);
        let term_bottom = bottom.map_or(0.0, |d| d.value);
        Self { total: term_top + term_bottom, term_top, term_bottom, per_layer, layers: config.layers.clone() }
    }
}

pub fn pair_cycle_loss(loss: &PerceptualLoss, source: &ImagePlane, outs: &CycleOutputs) -> Result<LossReport> {
    let top = perceptual_distance(loss, source, &outs.top_hr)?;
    let bottom = perceptual_distance(loss, source, &outs.bottom_lr)?;
    Ok(LossReport::from_terms(Some(top), Some(bottom), &loss.config))
}

pub fn single_cycle_loss(
    loss: &PerceptualLoss,
    source: &ImagePlane,
    outs: &CycleOutputs,
    branch: CycleBranch,
) -> Result<LossReport> {
    Ok(match branch {
        CycleBranch::Top => LossReport::from_terms(Some(perceptual_distance(loss, source, &outs.top_hr)?), None, &loss.config),
        CycleBranch::Bottom => {
            LossReport::from_terms(None, Some(perceptual_distance(loss, source, &outs.bottom_lr)?), &loss.config)
        }
    })
}

/// Mean squared pixel difference.
pub fn pixel_loss(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_size(a, b)?;
    let (x, y) = (a.tensor().data(), b.tensor().data());
    Ok(x.iter().zip(y).map(|(&p, &q)| ((p - q) as f64).powi(2)).sum::<f64>() / x.len() as f64)
}

/// Bilinear upsampling of the logits to `size`, then sigmoid.
pub fn upsampled_activation(attn: &AttentionMap, size: (usize, usize)) -> Tensor<f64> {
    let (m, n) = attn.dims();
    let logits: Tensor<f64> = attn.values().cast::<f64>().reshape(vec![1, m, n]);
    let up = crate::tensor::separable_apply(&logits, &uniform_matrix(m, size.0), &uniform_matrix(n, size.1));
    up.map(sigmoid)
}

/// `base.total + lambda * mean((sigmoid(up(attn)) - saliency)^2)`.
pub fn saliency_guided_loss(base: &LossReport, attn: &AttentionMap, saliency: &ImagePlane, lambda: f64) -> Result<f64> {
    if saliency.channels() != 1 {
        return Err(Error::ShapeMismatch(format!("saliency map must be single-channel, got {}", saliency.channels())));
    }
    let act = upsampled_activation(attn, saliency.size());
    let s = saliency.tensor().data();
    let mse = act.data().iter().zip(s).map(|(&a, &b)| (a - b as f64).powi(2)).sum::<f64>() / s.len() as f64;
    Ok(base.total + lambda * mse)
}

/// Differentiable saliency alignment term for `logits: [1, M, N]`.
pub fn saliency_term_var<T: Scalar>(g: &mut Graph<T>, logits: Var, saliency: &ImagePlane, lambda: f64) -> Var {
    let up = crate::warp::resize_var(g, logits, saliency.size());
    let act = g.sigmoid(up);
    let target = g.constant(saliency.tensor().cast());
    g.scaled_mse(act, target, T::lit(lambda))
}
