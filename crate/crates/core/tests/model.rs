use std::sync::OnceLock;

use cycle_ir_core::cycle::{cycle_vars, CycleRequest};
use cycle_ir_core::graph::Graph;
use cycle_ir_core::image::ImagePlane;
use cycle_ir_core::loss::PerceptualLoss;
use cycle_ir_core::model::{
    attention_for_image, count_parameters, extract_features, ModelConfig, ModelParams, Vgg16, VGG16_CONVS,
};
use cycle_ir_core::warp::RetargetSpec;

fn vgg() -> &'static Vgg16 {
    static V: OnceLock<Vgg16> = OnceLock::new();
    V.get_or_init(|| Vgg16::seeded(16))
}

fn photo(h: usize, w: usize) -> ImagePlane {
    ImagePlane::from_fn(3, h, w, |c, y, x| {
        let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
        (0.5 + 0.35 * (11.0 * fx + c as f32).sin() * (5.0 * fy + 2.0 * fx * fy).cos()).clamp(0.0, 1.0)
    })
}

/// Element count from the layer shapes alone.
fn count_oracle(cfg: &ModelConfig) -> usize {
    let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
    let trunk: usize = VGG16_CONVS[..8].iter().map(|&(i, o)| conv(i, o, 3)).sum();
    let mut c = 512;
    let mut head = 0;
    for (&w, &k) in cfg.head_widths.iter().zip(&cfg.head_kernels) {
        head += conv(c, w, k);
        c = w;
    }
    let [s1, s2] = cfg.spatial_widths;
    let spatial = conv(c, s1, 3) + conv(s1, s2, 3) + conv(s2, 1, 3);
    let channel = s2 * c + c;
    trunk + head + spatial + channel
}

#[test]
fn parameter_count_matches_layer_shapes() {
    let configs = [
        ModelConfig::default(),
        ModelConfig { head_widths: vec![256, 128, 64], head_kernels: vec![3, 3, 3], ..ModelConfig::default() },
        ModelConfig { head_widths: vec![96], head_kernels: vec![5], spatial_widths: [8, 4], ..ModelConfig::default() },
    ];
    for cfg in configs {
        let p = ModelParams::with_backbone(cfg.clone(), vgg()).unwrap();
        assert_eq!(count_parameters(&p), count_oracle(&cfg));
    }
}

#[test]
fn default_count_is_near_the_reference_size() {
    let n = count_parameters(&ModelParams::with_backbone(ModelConfig::default(), vgg()).unwrap()) as f64;
    assert!((n / 3.164e6 - 1.0).abs() <= 0.10, "{n}");
}

#[test]
fn empty_head_counts_only_trunk_and_attention() {
    let cfg = ModelConfig { head_widths: vec![], head_kernels: vec![], ..ModelConfig::default() };
    let p = ModelParams::with_backbone(cfg.clone(), vgg()).unwrap();
    let trunk: usize = p.backbone.iter().map(|l| l.weight.len() + l.bias.len()).sum();
    let attention: usize = p.spatial.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>()
        + p.channel.weight.len()
        + p.channel.bias.len();
    assert!(p.head.is_empty());
    assert_eq!(count_parameters(&p), trunk + attention);
    assert_eq!(count_parameters(&p), count_oracle(&cfg));
}

#[test]
fn feature_map_sizes() {
    let p = ModelParams::with_backbone(ModelConfig::default(), vgg()).unwrap();
    let f = extract_features(&photo(320, 480), &p).unwrap();
    assert_eq!(f.values.shape(), &[64, 40, 60]);
    assert_eq!(f.stride, 8);
    assert!(f.values.all_finite());
    let f = extract_features(&photo(33, 47), &p).unwrap();
    assert_eq!(&f.values.shape()[1..], &[5, 6]);
}

#[test]
fn attention_is_bit_deterministic() {
    let p = ModelParams::with_backbone(ModelConfig { init_std: 0.05, ..ModelConfig::default() }, vgg()).unwrap();
    let img = photo(72, 96);
    let a = attention_for_image(&img, &p).unwrap();
    let b = attention_for_image(&img, &p).unwrap();
    assert_eq!(a.dims(), (16, 16));
    let bits = |m: &cycle_ir_core::AttentionMap| m.values().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn loss_gradient_reaches_every_trainable_tensor() {
    let p = ModelParams::with_backbone(ModelConfig { grid: (8, 8), ..ModelConfig::default() }, vgg()).unwrap();
    let loss = PerceptualLoss::new(vgg().clone());
    let img = photo(64, 64);
    let mut g = Graph::<f32>::new();
    let bm = p.bind(&mut g, true);
    let x = g.constant(img.tensor().clone());
    let cv = cycle_vars(&mut g, &bm, x, &RetargetSpec::new(0.5, 0.75), CycleRequest::LOSS).unwrap();
    let bound = loss.bind(&mut g);
    let target = loss.features(img.tensor());
    let (top, _) = loss.distance_var(&mut g, &bound, &target, cv.top_hr.unwrap()).unwrap();
    let (bottom, _) = loss.distance_var(&mut g, &bound, &target, cv.bottom_lr.unwrap()).unwrap();
    let total = g.add(top, bottom);
    let grads = g.backward(total);
    for ((name, _), v) in p.trainable().iter().zip(bm.trainable_vars()) {
        let gr = grads.get(v).unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(gr.all_finite(), "{name}");
        assert!(gr.data().iter().any(|&d| d != 0.0), "zero gradient for {name}");
    }
}

#[test]
fn both_stages_read_the_same_weights() {
    let p = ModelParams::with_backbone(ModelConfig { grid: (8, 8), init_std: 0.05, ..ModelConfig::default() }, vgg())
        .unwrap();
    let mut q = p.clone();
    for v in q.spatial[2].bias.data_mut() {
        *v += 0.5;
    }
    let img = photo(64, 80);
    let spec = RetargetSpec::new(0.75, 0.5);
    let a = cycle_ir_core::run_cycle(&p, &img, &spec).unwrap();
    let b = cycle_ir_core::run_cycle(&q, &img, &spec).unwrap();
    assert_ne!(a.i_lr, b.i_lr);
    assert_ne!(a.top_hr, b.top_hr);
    assert_ne!(a.bottom_lr, b.bottom_lr);
}
