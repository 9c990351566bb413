//! The retargeting network: a frozen VGG-16 trunk cut after `conv4_1`, a
//! three-convolution head producing the deep representation, and the
//! spatial-and-channel attention layer producing the attention logits.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::ImagePlane;
use crate::tensor::{conv2d_forward, max_pool2_forward, sigmoid, Scalar, Tensor};
use crate::warp::resize_var;

/// Per-channel means subtracted from `[0, 1]` RGB before the trunk.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];

/// Spatial downsampling of the truncated trunk (three 2x2 pools).
pub const BACKBONE_STRIDE: usize = 8;

/// Smallest accepted input side.
pub const MIN_INPUT_SIDE: usize = 32;

/// `(in, out)` channels of the thirteen VGG-16 convolutions.
pub const VGG16_CONVS: [(usize, usize); 13] = [
    (3, 64),
    (64, 64),
    (64, 128),
    (128, 128),
    (128, 256),
    (256, 256),
    (256, 256),
    (256, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
];

/// Index of the last convolution of each VGG-16 block; a 2x2 pool follows.
pub const VGG16_POOL_AFTER: [usize; 5] = [1, 3, 6, 9, 12];

/// Layer names in torchvision's `features.N` numbering.
pub const VGG16_FEATURE_INDEX: [usize; 13] = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28];

/// Convolutions kept in the trunk: `conv1_1` through `conv4_1`.
pub const BACKBONE_CONVS: usize = 8;
pub const BACKBONE_ID: &str = "vgg16";
pub const BACKBONE_TRUNCATION: &str = "conv4_1";

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    /// `[out, in, k, k]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        Self { weight: Tensor::zeros(vec![c_out, c_in, k, k]), bias: Tensor::zeros(vec![c_out]) }
    }

    fn gaussian(c_in: usize, c_out: usize, k: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = c_out * c_in * k * k;
        let data = if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| T::lit(normal.sample(rng))).collect()
        } else {
            vec![T::zero(); n]
        };
        Self { weight: Tensor::new(vec![c_out, c_in, k, k], data), bias: Tensor::zeros(vec![c_out]) }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Where the pretrained trunk weights come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneSource {
    /// He-normal weights drawn from a fixed seed.
    Seeded(u64),
    /// A safetensors file with torchvision-style `features.N.weight` /
    /// `features.N.bias` entries.
    File(PathBuf),
}

impl BackboneSource {
    pub fn identifier(&self) -> String {
        match self {
            Self::Seeded(seed) => format!("seeded:{seed}"),
            Self::File(path) => format!("file:{}", path.display()),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if let Some(seed) = s.strip_prefix("seeded:") {
            let seed = seed.parse().map_err(|_| Error::Config(format!("bad backbone seed in {s:?}")))?;
            Ok(Self::Seeded(seed))
        } else if let Some(path) = s.strip_prefix("file:") {
            Ok(Self::File(PathBuf::from(path)))
        } else {
            Err(Error::Config(format!("unknown backbone source {s:?}")))
        }
    }
}

impl Default for BackboneSource {
    fn default() -> Self {
        Self::Seeded(16)
    }
}

/// The thirteen VGG-16 convolutions. The first [`BACKBONE_CONVS`] form the
/// network trunk; all of them feed the perceptual loss.
#[derive(Clone, Debug)]
pub struct Vgg16<T = f32> {
    pub layers: Vec<ConvLayer<T>>,
    pub source: BackboneSource,
}

impl Vgg16<f32> {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = VGG16_CONVS
            .iter()
            .map(|&(c_in, c_out)| ConvLayer::gaussian(c_in, c_out, 3, (2.0 / (9 * c_in) as f64).sqrt(), &mut rng))
            .collect();
        Self { layers, source: BackboneSource::Seeded(seed) }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let layers = VGG16_CONVS
            .iter()
            .zip(VGG16_FEATURE_INDEX)
            .map(|(&(c_in, c_out), idx)| {
                let weight = crate::checkpoint::read_f32(&st, &format!("features.{idx}.weight"), &[c_out, c_in, 3, 3])?;
                let bias = crate::checkpoint::read_f32(&st, &format!("features.{idx}.bias"), &[c_out])?;
                Ok(ConvLayer { weight, bias })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, source: BackboneSource::File(path.to_path_buf()) })
    }

    pub fn from_source(source: &BackboneSource) -> Result<Self> {
        match source {
            BackboneSource::Seeded(seed) => Ok(Self::seeded(*seed)),
            BackboneSource::File(path) => Self::load(path),
        }
    }
}

impl<T: Scalar> Vgg16<T> {
    pub fn cast<U: Scalar>(&self) -> Vgg16<U> {
        Vgg16 { layers: self.layers.iter().map(ConvLayer::cast).collect(), source: self.source.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Warp grid `(M rows, N columns)`.
    pub grid: (usize, usize),
    pub head_widths: Vec<usize>,
    pub head_kernels: Vec<usize>,
    /// Widths of the first two spatial-branch convolutions; the third has
    /// one output channel.
    pub spatial_widths: [usize; 2],
    pub backbone: BackboneSource,
    pub init_std: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: (16, 16),
            head_widths: vec![256, 128, 64],
            head_kernels: vec![1, 3, 3],
            spatial_widths: [32, 16],
            backbone: BackboneSource::default(),
            init_std: 0.01,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::Config(format!("grid {:?} must be positive", self.grid)));
        }
        if self.head_widths.len() != self.head_kernels.len() {
            return Err(Error::Config("head widths and kernels differ in length".into()));
        }
        if self.head_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("head kernels must be odd".into()));
        }
        if self.head_widths.iter().chain(&self.spatial_widths).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Channels of the deep representation fed to the attention layer.
    pub fn feature_channels(&self) -> usize {
        self.head_widths.last().copied().unwrap_or(VGG16_CONVS[BACKBONE_CONVS - 1].1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    /// Frozen trunk, never updated.
    pub backbone: Vec<ConvLayer<T>>,
    pub head: Vec<ConvLayer<T>>,
    /// Three 3x3 convolutions ending in one channel.
    pub spatial: Vec<ConvLayer<T>>,
    /// Projection from pooled intermediate spatial features to one gate per
    /// feature channel.
    pub channel: Linear<T>,
}

impl ModelParams<f32> {
    /// Loads the trunk named by the config and initializes the trainable
    /// layers from `N(0, init_std)`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let vgg = Vgg16::from_source(&config.backbone)?;
        Self::with_backbone(config, &vgg)
    }

    pub fn with_backbone(config: ModelConfig, vgg: &Vgg16<f32>) -> Result<Self> {
        Self::build(config, vgg, None)
    }

    /// Trainable layers all zero: the attention field is identically zero
    /// and the warp is uniform.
    pub fn zero_init(config: ModelConfig, vgg: &Vgg16<f32>) -> Result<Self> {
        Self::build(config, vgg, Some(0.0))
    }

    fn build(config: ModelConfig, vgg: &Vgg16<f32>, std: Option<f64>) -> Result<Self> {
        config.validate()?;
        if vgg.source != config.backbone {
            return Err(Error::Config(format!(
                "backbone {} does not match the configured {}",
                vgg.source.identifier(),
                config.backbone.identifier()
            )));
        }
        let std = std.unwrap_or(config.init_std);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let backbone = vgg.layers[..BACKBONE_CONVS].to_vec();
        let mut c_in = VGG16_CONVS[BACKBONE_CONVS - 1].1;
        let mut head = Vec::new();
        for (&w, &k) in config.head_widths.iter().zip(&config.head_kernels) {
            head.push(ConvLayer::gaussian(c_in, w, k, std, &mut rng));
            c_in = w;
        }
        let feat = config.feature_channels();
        let [s1, s2] = config.spatial_widths;
        let spatial = vec![
            ConvLayer::gaussian(feat, s1, 3, std, &mut rng),
            ConvLayer::gaussian(s1, s2, 3, std, &mut rng),
            ConvLayer::gaussian(s2, 1, 3, std, &mut rng),
        ];
        let lin = ConvLayer::<f32>::gaussian(s2, feat, 1, std, &mut rng);
        let channel = Linear { weight: lin.weight.reshape(vec![feat, s2]), bias: lin.bias };
        Ok(Self { config, backbone, head, spatial, channel })
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            backbone: self.backbone.iter().map(ConvLayer::cast).collect(),
            head: self.head.iter().map(ConvLayer::cast).collect(),
            spatial: self.spatial.iter().map(ConvLayer::cast).collect(),
            channel: Linear { weight: self.channel.weight.cast(), bias: self.channel.bias.cast() },
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.config.grid
    }

    /// Trainable tensors in a fixed order with stable names.
    pub fn trainable(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.head.iter().enumerate() {
            out.push((format!("head.{i}.weight"), &l.weight));
            out.push((format!("head.{i}.bias"), &l.bias));
        }
        for (i, l) in self.spatial.iter().enumerate() {
            out.push((format!("spatial.{i}.weight"), &l.weight));
            out.push((format!("spatial.{i}.bias"), &l.bias));
        }
        out.push(("channel.weight".into(), &self.channel.weight));
        out.push(("channel.bias".into(), &self.channel.bias));
        out
    }

    /// Same order as [`Self::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in self.head.iter_mut().chain(self.spatial.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.channel.weight);
        out.push(&mut self.channel.bias);
        out
    }

    pub fn frozen(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &l.weight));
            out.push((format!("backbone.{i}.bias"), &l.bias));
        }
        out
    }

    /// Adds every parameter tensor to `g`: the trunk as constants, the rest
    /// as gradient-receiving leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        let leaf = |g: &mut Graph<T>, t: &Tensor<T>, train: bool| {
            if train {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let conv = |g: &mut Graph<T>, l: &ConvLayer<T>, train: bool| (leaf(g, &l.weight, train), leaf(g, &l.bias, train));
        BoundModel {
            backbone: self.backbone.iter().map(|l| conv(g, l, false)).collect(),
            head: self.head.iter().map(|l| conv(g, l, trainable)).collect(),
            spatial: self.spatial.iter().map(|l| conv(g, l, trainable)).collect(),
            channel: (
                if trainable { g.param(self.channel.weight.clone()) } else { g.constant(self.channel.weight.clone()) },
                if trainable { g.param(self.channel.bias.clone()) } else { g.constant(self.channel.bias.clone()) },
            ),
            grid: self.config.grid,
        }
    }
}

/// Graph handles of a [`ModelParams`] bound into one [`Graph`]. Every use of
/// the same `BoundModel` shares weights.
pub struct BoundModel {
    backbone: Vec<(Var, Var)>,
    head: Vec<(Var, Var)>,
    spatial: Vec<(Var, Var)>,
    channel: (Var, Var),
    grid: (usize, usize),
}

impl BoundModel {
    /// Trainable leaves in [`ModelParams::trainable`] order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in self.head.iter().chain(&self.spatial) {
            out.push(w);
            out.push(b);
        }
        out.push(self.channel.0);
        out.push(self.channel.1);
        out
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }
}

/// Exact number of scalars in all parameter arrays, trunk included.
pub fn count_parameters<T: Scalar>(params: &ModelParams<T>) -> usize {
    params.frozen().iter().chain(params.trainable().iter()).map(|(_, t)| t.len()).sum()
}

/// Deep representation on the stride-[`BACKBONE_STRIDE`] lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `[C, m, n]`
    pub values: Tensor<f32>,
    pub stride: usize,
}

/// `M x N` attention logits aligned with the warp grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    values: Tensor<f32>,
}

impl AttentionMap {
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        match values.shape() {
            [m, n] if *m > 0 && *n > 0 => Ok(Self { values }),
            [1, m, n] if *m > 0 && *n > 0 => {
                let shape = vec![*m, *n];
                Ok(Self { values: values.reshape(shape) })
            }
            s => Err(Error::ShapeMismatch(format!("attention map must be [M, N], got {s:?}"))),
        }
    }

    pub fn constant(rows: usize, cols: usize, logit: f32) -> Self {
        Self { values: Tensor::full(vec![rows, cols], logit) }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values.data()[i * self.dims().1 + j]
    }

    /// `sigmoid` of every logit.
    pub fn activations(&self) -> Vec<f64> {
        self.values.data().iter().map(|&v| sigmoid(v as f64)).collect()
    }

    /// Grayscale rendering of `sigmoid(logit)` at grid resolution.
    pub fn to_image(&self) -> ImagePlane {
        let (m, n) = self.dims();
        let a = self.activations();
        ImagePlane::from_fn(1, m, n, |_, i, j| a[i * n + j] as f32)
    }
}

/// Graph nodes of one attention pass.
pub struct AttentionVars {
    /// `[1, M, N]`
    pub logits: Var,
}

fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
        return Err(Error::ImageTooSmall { height: h, width: w, min: MIN_INPUT_SIDE });
    }
    Ok(())
}

fn backbone_eager<T: Scalar>(g: &Graph<T>, bm: &BoundModel, image: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = image.chw();
    let mut x = image.clone();
    for (ci, plane) in x.data_mut().chunks_mut(h * w).enumerate().take(c) {
        let m = T::lit(IMAGENET_MEAN[ci]);
        for v in plane {
            *v = *v - m;
        }
    }
    for (i, &(wt, b)) in bm.backbone.iter().enumerate() {
        x = conv2d_forward(&x, g.value(wt), g.value(b), true);
        if VGG16_POOL_AFTER.contains(&i) {
            x = max_pool2_forward(&x).0;
        }
    }
    x
}

/// Trunk plus head. The trunk runs outside the tape when its input is a
/// constant, since no gradient can reach it.
pub fn features_var<T: Scalar>(g: &mut Graph<T>, bm: &BoundModel, image: Var) -> Result<Var> {
    let (c, h, w) = g.value(image).chw();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected an RGB image, got {c} channels")));
    }
    check_input_size(h, w)?;
    let mut x = if g.requires_grad(image) {
        let shifts: Vec<T> = IMAGENET_MEAN.iter().map(|&m| T::lit(m)).collect();
        let mut x = g.shift_channels(image, &shifts);
        for (i, &(wt, b)) in bm.backbone.iter().enumerate() {
            x = g.conv2d(x, wt, b, true);
            if VGG16_POOL_AFTER.contains(&i) {
                x = g.max_pool2(x);
            }
        }
        x
    } else {
        let t = backbone_eager(g, bm, g.value(image));
        g.constant(t)
    };
    for &(wt, b) in &bm.head {
        x = g.conv2d(x, wt, b, true);
    }
    Ok(x)
}

/// Spatial branch: `(raw spatial weight [1,m,n], intermediate [C',m,n])`.
fn spatial_vars<T: Scalar>(g: &mut Graph<T>, bm: &BoundModel, fmap: Var) -> (Var, Var) {
    let (w0, b0) = bm.spatial[0];
    let (w1, b1) = bm.spatial[1];
    let (w2, b2) = bm.spatial[2];
    let x = g.conv2d(fmap, w0, b0, true);
    let mid = g.conv2d(x, w1, b1, true);
    let ws = g.conv2d(mid, w2, b2, false);
    (ws, mid)
}

fn channel_var<T: Scalar>(g: &mut Graph<T>, bm: &BoundModel, mid: Var) -> Var {
    let pooled = g.global_avg_pool(mid);
    let z = g.linear(pooled, bm.channel.0, bm.channel.1);
    g.sigmoid(z)
}

/// Gates the features, averages over channels and resamples to the grid.
fn combine_vars<T: Scalar>(g: &mut Graph<T>, fmap: Var, spatial_gate: Var, channel_gate: Var, grid: (usize, usize)) -> Var {
    let x = g.mul_spatial(fmap, spatial_gate);
    let x = g.mul_channel(x, channel_gate);
    let x = g.channel_mean(x);
    resize_var(g, x, grid)
}

pub fn attention_vars<T: Scalar>(g: &mut Graph<T>, bm: &BoundModel, fmap: Var) -> AttentionVars {
    let (ws, mid) = spatial_vars(g, bm, fmap);
    let spatial_gate = g.sigmoid(ws);
    let channel_gate = channel_var(g, bm, mid);
    AttentionVars { logits: combine_vars(g, fmap, spatial_gate, channel_gate, bm.grid) }
}

// ---- eager API ------------------------------------------------------------

pub fn extract_features(image: &ImagePlane, params: &ModelParams) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let bm = params.bind(&mut g, false);
    let x = g.constant(image.tensor().clone());
    let f = features_var(&mut g, &bm, x)?;
    Ok(FeatureMap { values: g.value(f).clone(), stride: BACKBONE_STRIDE })
}

fn check_fmap(fmap: &FeatureMap, params: &ModelParams) -> Result<()> {
    let c = fmap.values.shape().first().copied().unwrap_or(0);
    if fmap.values.shape().len() != 3 || c != params.config.feature_channels() {
        return Err(Error::ShapeMismatch(format!(
            "feature map {:?} does not have {} channels",
            fmap.values.shape(),
            params.config.feature_channels()
        )));
    }
    Ok(())
}

/// Raw (pre-sigmoid) spatial weight `[1, m, n]` and the second convolution's
/// output, which feeds the channel branch.
pub fn spatial_weights(fmap: &FeatureMap, params: &ModelParams) -> Result<(Tensor<f32>, Tensor<f32>)> {
    check_fmap(fmap, params)?;
    let mut g = Graph::new();
    let bm = params.bind(&mut g, false);
    let f = g.constant(fmap.values.clone());
    let (ws, mid) = spatial_vars(&mut g, &bm, f);
    Ok((g.value(ws).clone(), g.value(mid).clone()))
}

/// Channel gate in `(0, 1)`, one per feature channel.
pub fn channel_weights(intermediate: &Tensor<f32>, params: &ModelParams) -> Result<Tensor<f32>> {
    let expected = params.config.spatial_widths[1];
    if intermediate.shape().len() != 3 || intermediate.shape()[0] != expected {
        return Err(Error::ShapeMismatch(format!(
            "intermediate {:?} does not have {expected} channels",
            intermediate.shape()
        )));
    }
    let mut g = Graph::new();
    let bm = params.bind(&mut g, false);
    let mid = g.constant(intermediate.clone());
    let c = channel_var(&mut g, &bm, mid);
    Ok(g.value(c).clone())
}

/// `mean_c(F * spatial_gate * channel_gate)` resampled to `grid`.
pub fn combine_attention(
    fmap: &FeatureMap,
    spatial_gate: &Tensor<f32>,
    channel_gate: &Tensor<f32>,
    grid: (usize, usize),
) -> Result<AttentionMap> {
    let (c, m, n) = fmap.values.chw();
    if spatial_gate.shape() != [1, m, n] || channel_gate.shape() != [c] {
        return Err(Error::ShapeMismatch("gates do not match the feature map".into()));
    }
    let mut g = Graph::new();
    let f = g.constant(fmap.values.clone());
    let s = g.constant(spatial_gate.clone());
    let ch = g.constant(channel_gate.clone());
    let out = combine_vars(&mut g, f, s, ch, grid);
    AttentionMap::new(g.value(out).clone())
}

pub fn attention(fmap: &FeatureMap, params: &ModelParams) -> Result<AttentionMap> {
    check_fmap(fmap, params)?;
    let mut g = Graph::new();
    let bm = params.bind(&mut g, false);
    let f = g.constant(fmap.values.clone());
    let a = attention_vars(&mut g, &bm, f);
    AttentionMap::new(g.value(a.logits).clone())
}

/// Attention logits straight from an image.
pub fn attention_for_image(image: &ImagePlane, params: &ModelParams) -> Result<AttentionMap> {
    attention(&extract_features(image, params)?, params)
}
