//! Label-free training: every batch is shrunk and expanded to a random
//! target, restored, and the restoration error drives Adam on the head and
//! attention weights.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Metadata};
use crate::cycle::{cycle_vars, CycleBranch, CycleRequest};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::ImagePlane;
use crate::loss::{saliency_term_var, LossReport, PerceptualLoss};
use crate::model::{BackboneSource, ModelConfig, ModelParams, Vgg16, MIN_INPUT_SIDE};
use crate::tensor::Tensor;
use crate::warp::{resize_uniform, RetargetSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Pair,
    SingleTop,
    SingleBottom,
    Pixel,
    PixelPlusPerceptual,
    SaliencyGuided,
}

impl LossMode {
    pub const ALL: [LossMode; 6] = [
        LossMode::Pair,
        LossMode::SingleTop,
        LossMode::SingleBottom,
        LossMode::Pixel,
        LossMode::PixelPlusPerceptual,
        LossMode::SaliencyGuided,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Pair => "pair",
            LossMode::SingleTop => "single_top",
            LossMode::SingleBottom => "single_bottom",
            LossMode::Pixel => "pixel",
            LossMode::PixelPlusPerceptual => "pixel_plus_perceptual",
            LossMode::SaliencyGuided => "saliency_guided",
        }
    }

    fn request(self) -> CycleRequest {
        match self {
            LossMode::SingleTop => CycleRequest::only(CycleBranch::Top),
            LossMode::SingleBottom => CycleRequest::only(CycleBranch::Bottom),
            _ => CycleRequest::LOSS,
        }
    }

    fn perceptual(self) -> bool {
        self != LossMode::Pixel
    }

    fn pixel(self) -> bool {
        matches!(self, LossMode::Pixel | LossMode::PixelPlusPerceptual)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_mode: LossMode,
    pub grid: (usize, usize),
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// `(height, width)` every source is resized to
    pub train_resolution: (usize, usize),
    /// only the first `n` images in filename order
    pub max_images: Option<usize>,
    /// masks named like the images; defaults to `data_dir/saliency`
    pub saliency_dir: Option<PathBuf>,
    pub saliency_weight: f64,
    pub backbone: BackboneSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            epochs: 50,
            batch_size: 4,
            learning_rate: 1e-3,
            loss_mode: LossMode::Pair,
            grid: (16, 16),
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            train_resolution: (224, 224),
            max_images: None,
            saliency_dir: None,
            saliency_weight: 1.0,
            backbone: BackboneSource::Seeded(16),
        }
    }
}

fn parse_pair(v: &str) -> Option<(usize, usize)> {
    let (a, b) = v.split_once(['x', ','])?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

impl TrainConfig {
    /// Sets one field from its textual form. Keys match the field names;
    /// dashes are accepted in place of underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let bad = || Error::Config(format!("bad value {value:?} for {key}"));
        fn num<V: FromStr>(v: &str, bad: impl Fn() -> Error) -> Result<V> {
            v.parse().map_err(|_| bad())
        }
        match key.as_str() {
            "data_dir" => self.data_dir = value.into(),
            "epochs" => self.epochs = num(value, bad)?,
            "batch_size" => self.batch_size = num(value, bad)?,
            "learning_rate" | "lr" => self.learning_rate = num(value, bad)?,
            "loss_mode" => self.loss_mode = value.parse()?,
            "grid" => self.grid = parse_pair(value).ok_or_else(bad)?,
            "seed" => self.seed = num(value, bad)?,
            "checkpoint_dir" => self.checkpoint_dir = value.into(),
            "train_resolution" => self.train_resolution = parse_pair(value).ok_or_else(bad)?,
            "max_images" => self.max_images = Some(num(value, bad)?),
            "saliency_dir" => self.saliency_dir = Some(value.into()),
            "saliency_weight" => self.saliency_weight = num(value, bad)?,
            "backbone" => self.backbone = BackboneSource::parse(value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        let (h, w) = self.train_resolution;
        if h.div_ceil(4) < MIN_INPUT_SIDE || w.div_ceil(4) < MIN_INPUT_SIDE {
            return Err(Error::Config(format!(
                "train_resolution {h}x{w} is too small: a quarter of each side must be at least {MIN_INPUT_SIDE}"
            )));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { grid: self.grid, backbone: self.backbone.clone(), init_seed: self.seed, ..ModelConfig::default() }
    }

    fn saliency_path(&self) -> PathBuf {
        self.saliency_dir.clone().unwrap_or_else(|| self.data_dir.join("saliency"))
    }
}

/// Decoded training images in filename order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<(String, ImagePlane)>,
    /// files that could not be decoded
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let hidden = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'));
        if path.is_file() && !hidden {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Decodes every regular file directly inside `dir`. Files that fail to
/// decode are skipped with a warning.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut items = Vec::new();
    let mut skipped = 0;
    for path in sorted_files(dir)? {
        match ImagePlane::load(&path) {
            Ok(img) => {
                let id = path.file_name().unwrap().to_string_lossy().into_owned();
                items.push((id, img));
            }
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    if items.is_empty() {
        return Err(Error::Dataset(format!("no decodable images in {}", dir.display())));
    }
    info!("loaded {} images from {} ({} skipped)", items.len(), dir.display(), skipped);
    Ok(Dataset { items, skipped })
}

/// Uniform integer target in `[ceil(H/4), floor(H/2)] x [ceil(W/4), floor(W/2)]`.
pub fn sample_target_size(src: (usize, usize), rng: &mut impl Rng) -> (usize, usize) {
    let axis = |n: usize, rng: &mut dyn rand::RngCore| {
        let (lo, hi) = (n.div_ceil(4), (n / 2).max(n.div_ceil(4)));
        rng.random_range(lo..=hi)
    };
    let h = axis(src.0, rng);
    let w = axis(src.1, rng);
    (h, w)
}

/// First and second moment estimates for every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<_> = params.trainable().iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor<f32>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let step = (lr / c1) as f32;
        let c2 = c2 as f32;
        for (((p, g), m), v) in params.trainable_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v / c2).sqrt() + ADAM_EPS as f32);
            }
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    /// completed epochs
    pub epoch: usize,
    pub params: ModelParams,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
}

impl PartialEq for TrainState {
    fn eq(&self, o: &Self) -> bool {
        self.step == o.step
            && self.epoch == o.epoch
            && self.params == o.params
            && self.adam == o.adam
            && self.rng.get_seed() == o.rng.get_seed()
            && self.rng.get_word_pos() == o.rng.get_word_pos()
    }
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let params = ModelParams::new(config.model_config())?;
        let adam = AdamState::new(&params);
        Ok(Self { step: 0, epoch: 0, params, adam, rng: ChaCha8Rng::seed_from_u64(config.seed) })
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let names: Vec<String> = state.params.trainable().into_iter().map(|(n, _)| n).collect();
    let mut tensors = checkpoint::model_tensors(&state.params);
    for (n, t) in names.iter().zip(&state.adam.m) {
        tensors.push((format!("adam.m.{n}"), t));
    }
    for (n, t) in names.iter().zip(&state.adam.v) {
        tensors.push((format!("adam.v.{n}"), t));
    }
    let mut meta = checkpoint::model_metadata(&state.params.config, "train_state");
    meta.insert("step".into(), state.step.to_string());
    meta.insert("epoch".into(), state.epoch.to_string());
    meta.insert("adam_t".into(), state.adam.t.to_string());
    let seed: String = state.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    meta.insert("rng_seed".into(), seed);
    meta.insert("rng_word_pos".into(), state.rng.get_word_pos().to_string());
    checkpoint::write_tensors(path, &tensors, &meta)
}

fn rng_from_meta(meta: &Metadata) -> Result<ChaCha8Rng> {
    let hex = checkpoint::field(meta, "rng_seed")?;
    let bad = || Error::Checkpoint(format!("bad rng seed {hex:?}"));
    if hex.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(checkpoint::parse_field(meta, "rng_word_pos")?);
    Ok(rng)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    let meta = checkpoint::read_metadata(&bytes)?;
    if checkpoint::field(&meta, "kind")? != "train_state" {
        return Err(Error::Checkpoint(format!("{} holds a bare model, not a training state", path.display())));
    }
    let st = checkpoint::deserialize(&bytes)?;
    let params = checkpoint::model_from_file(&st, &meta)?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, t) in params.trainable() {
        m.push(checkpoint::read_f32(&st, &format!("adam.m.{name}"), t.shape())?);
        v.push(checkpoint::read_f32(&st, &format!("adam.v.{name}"), t.shape())?);
    }
    Ok(TrainState {
        step: checkpoint::parse_field(&meta, "step")?,
        epoch: checkpoint::parse_field(&meta, "epoch")?,
        adam: AdamState { m, v, t: checkpoint::parse_field(&meta, "adam_t")? },
        rng: rng_from_meta(&meta)?,
        params,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub target_h: usize,
    pub target_w: usize,
    pub loss_mode: LossMode,
    #[serde(flatten)]
    pub report: LossReport,
    /// pixel or saliency terms that are part of `total`
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<StepRecord>,
    /// mean `total` of each epoch run here, keyed by 1-based epoch
    pub epoch_means: BTreeMap<usize, f64>,
    pub checkpoints: Vec<PathBuf>,
}

struct Sample {
    id: String,
    image: ImagePlane,
    saliency: Option<ImagePlane>,
}

fn load_saliency(dir: &Path, id: &str, size: (usize, usize)) -> Result<ImagePlane> {
    let stem = Path::new(id).file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let exact = dir.join(id);
    let path = if exact.is_file() {
        exact
    } else {
        sorted_files(dir)
            .unwrap_or_default()
            .into_iter()
            .find(|p| p.file_stem().is_some_and(|s| s.to_string_lossy() == stem))
            .ok_or_else(|| Error::MissingSaliency(exact.clone()))?
    };
    resize_uniform(&ImagePlane::load_gray(&path)?, size)
}

fn prepare(config: &TrainConfig) -> Result<Vec<Sample>> {
    let mut data = load_dataset(&config.data_dir)?;
    if let Some(n) = config.max_images {
        data.items.truncate(n);
    }
    let sal_dir = config.saliency_path();
    data.items
        .into_iter()
        .map(|(id, img)| {
            let image = resize_uniform(&img, config.train_resolution)?;
            let saliency = if config.loss_mode == LossMode::SaliencyGuided {
                Some(load_saliency(&sal_dir, &id, config.train_resolution)?)
            } else {
                None
            };
            Ok(Sample { id, image, saliency })
        })
        .collect()
}

/// Loss and gradients for one image.
struct ImageLoss {
    report: LossReport,
    extra: BTreeMap<String, f64>,
    grads: Vec<Tensor<f32>>,
}

fn image_loss(
    params: &ModelParams,
    extractor: &PerceptualLoss,
    config: &TrainConfig,
    sample: &Sample,
    spec: &RetargetSpec,
) -> Result<ImageLoss> {
    let mode = config.loss_mode;
    let mut g = Graph::<f32>::new();
    let bm = params.bind(&mut g, true);
    let source = g.constant(sample.image.tensor().clone());
    let cv = cycle_vars(&mut g, &bm, source, spec, mode.request())?;
    let restored: Vec<(bool, Var)> = [(true, cv.top_hr), (false, cv.bottom_lr)]
        .into_iter()
        .filter_map(|(top, v)| v.map(|v| (top, v)))
        .collect();

    let mut terms: Vec<Var> = Vec::new();
    let (mut term_top, mut term_bottom) = (0.0, 0.0);
    let mut per_layer: BTreeMap<u32, f64> = extractor.config.layers.iter().map(|&(b, _)| (b, 0.0)).collect();
    let mut extra = BTreeMap::new();

    if mode.perceptual() {
        let bound = extractor.bind(&mut g);
        let target = extractor.features(sample.image.tensor());
        for &(top, v) in &restored {
            let (d, layers) = extractor.distance_var(&mut g, &bound, &target, v)?;
            let val = g.value(d).item() as f64;
            if top {
                term_top += val;
            } else {
                term_bottom += val;
            }
            for (&(block, _), l) in extractor.config.layers.iter().zip(layers) {
                *per_layer.get_mut(&block).unwrap() += g.value(l).item() as f64;
            }
            terms.push(d);
        }
    }
    if mode.pixel() {
        for &(top, v) in &restored {
            let d = g.scaled_mse(v, source, 1.0);
            let val = g.value(d).item() as f64;
            let key = if top { "pixel_top" } else { "pixel_bottom" };
            extra.insert(key.to_string(), val);
            if mode == LossMode::Pixel {
                if top {
                    term_top += val;
                } else {
                    term_bottom += val;
                }
            }
            terms.push(d);
        }
    }
    if mode == LossMode::SaliencyGuided {
        let sal = sample.saliency.as_ref().expect("saliency loaded for this mode");
        let d = saliency_term_var(&mut g, cv.attn_fwd, sal, config.saliency_weight);
        extra.insert("saliency".to_string(), g.value(d).item() as f64);
        terms.push(d);
    }

    // reported in f64 so that the pair total is exactly top + bottom
    let reported: f64 = terms.iter().map(|&t| g.value(t).item() as f64).sum();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    let report = LossReport {
        total: reported,
        term_top,
        term_bottom,
        per_layer,
        layers: extractor.config.layers.clone(),
    };
    let mut grads = g.backward(total);
    let grads = bm
        .trainable_vars()
        .into_iter()
        .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec())))
        .collect();
    Ok(ImageLoss { report, extra, grads })
}

fn dump_batch(dir: &Path, step: u64, batch: &[Sample], spec: &RetargetSpec) -> PathBuf {
    let out = dir.join(format!("nonfinite_step{step}"));
    let write = || -> Result<()> {
        std::fs::create_dir_all(&out)?;
        for s in batch {
            let stem = Path::new(&s.id).file_stem().unwrap_or_default().to_string_lossy().into_owned();
            s.image.save(&out.join(format!("{stem}.png")))?;
        }
        std::fs::write(out.join("spec.json"), serde_json::to_string_pretty(spec).unwrap_or_default())?;
        Ok(())
    };
    if let Err(e) = write() {
        warn!("could not write the diagnostic dump: {e}");
    }
    out
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.safetensors"))
}

/// Trains from scratch.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    train_from(config, TrainState::new(config)?)
}

/// Continues a run from a saved [`TrainState`].
pub fn resume(config: &TrainConfig, checkpoint: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let state = load_checkpoint(checkpoint)?;
    if state.params.config.grid != config.grid {
        return Err(Error::Config(format!(
            "checkpoint grid {:?} differs from configured grid {:?}",
            state.params.config.grid, config.grid
        )));
    }
    train_from(config, state)
}

fn train_from(config: &TrainConfig, state: TrainState) -> Result<TrainOutcome> {
    let samples = prepare(config)?;
    run(config, state, &samples)
}

fn run(config: &TrainConfig, mut state: TrainState, samples: &[Sample]) -> Result<TrainOutcome> {
    let extractor = PerceptualLoss::new(Vgg16::from_source(&config.backbone)?);
    std::fs::create_dir_all(&config.checkpoint_dir)?;
    let log_path = config.checkpoint_dir.join("train_log.jsonl");
    let mut log = BufWriter::new(File::options().create(true).append(true).open(&log_path)?);

    let mut records = Vec::new();
    let mut epoch_means = BTreeMap::new();
    let mut checkpoints = Vec::new();
    let res = config.train_resolution;

    while state.epoch < config.epochs {
        let epoch = state.epoch + 1;
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in samples.chunks(config.batch_size) {
            let target = sample_target_size(res, &mut state.rng);
            let spec = RetargetSpec::new(target.0 as f64 / res.0 as f64, target.1 as f64 / res.1 as f64);
            let mut grads: Option<Vec<Tensor<f32>>> = None;
            let mut report: Option<(LossReport, BTreeMap<String, f64>)> = None;
            for sample in batch {
                let l = match image_loss(&state.params, &extractor, config, sample, &spec) {
                    Ok(l) => l,
                    // NaN attention surfaces as an invalid profile before any loss exists
                    Err(Error::InvalidProfile(_)) => {
                        let step = state.step + 1;
                        let dump = dump_batch(&config.checkpoint_dir, step, batch, &spec);
                        return Err(Error::NonFiniteLoss { step, dump });
                    }
                    Err(e) => return Err(e),
                };
                match grads.as_mut() {
                    None => grads = Some(l.grads),
                    Some(acc) => acc.iter_mut().zip(&l.grads).for_each(|(a, g)| a.add_assign(g)),
                }
                match report.as_mut() {
                    None => report = Some((l.report, l.extra)),
                    Some((r, e)) => {
                        r.total += l.report.total;
                        r.term_top += l.report.term_top;
                        r.term_bottom += l.report.term_bottom;
                        for (k, v) in l.report.per_layer {
                            *r.per_layer.entry(k).or_default() += v;
                        }
                        for (k, v) in l.extra {
                            *e.entry(k).or_default() += v;
                        }
                    }
                }
            }
            let n = batch.len() as f64;
            let (mut report, mut extra) = report.expect("batches are never empty");
            report.total /= n;
            report.term_top /= n;
            report.term_bottom /= n;
            report.per_layer.values_mut().for_each(|v| *v /= n);
            extra.values_mut().for_each(|v| *v /= n);
            let mut grads = grads.expect("batches are never empty");
            grads.iter_mut().for_each(|g| *g = g.scale(1.0 / n as f32));

            state.step += 1;
            if !report.total.is_finite() || !grads.iter().all(Tensor::all_finite) {
                let dump = dump_batch(&config.checkpoint_dir, state.step, batch, &spec);
                return Err(Error::NonFiniteLoss { step: state.step, dump });
            }
            state.adam.step(&mut state.params, &grads, config.learning_rate);

            let rec = StepRecord {
                step: state.step,
                epoch,
                target_h: target.0,
                target_w: target.1,
                loss_mode: config.loss_mode,
                report,
                extra,
            };
            writeln!(log, "{}", serde_json::to_string(&rec).expect("records serialize"))?;
            sum += rec.report.total;
            batches += 1;
            records.push(rec);
        }
        log.flush()?;
        state.epoch = epoch;
        let mean = sum / batches as f64;
        epoch_means.insert(epoch, mean);
        info!("epoch {epoch}/{}: mean loss {mean:.6}", config.epochs);
        let path = epoch_checkpoint_path(&config.checkpoint_dir, epoch);
        save_checkpoint(&state, &path)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome { state, records, epoch_means, checkpoints })
}
