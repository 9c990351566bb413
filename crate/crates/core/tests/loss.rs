mod common;

use common::{mse, photo, random_model, vgg};
use cycle_ir_core::checkpoint::{deserialize, read_f32, write_tensors, Metadata};
use cycle_ir_core::cycle::{run_cycle, CycleBranch};
use cycle_ir_core::graph::Graph;
use cycle_ir_core::image::ImagePlane;
use cycle_ir_core::loss::{
    pair_cycle_loss, perceptual_distance, pixel_loss, saliency_guided_loss, single_cycle_loss, PerceptualConfig,
    PerceptualLoss,
};
use cycle_ir_core::model::AttentionMap;
use cycle_ir_core::tensor::Tensor;
use cycle_ir_core::warp::RetargetSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss() -> PerceptualLoss {
    PerceptualLoss::new(vgg().clone())
}

fn noise(h: usize, w: usize, seed: u64) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * h * w).map(|_| rng.random::<f32>()).collect();
    ImagePlane::from_tensor(Tensor::new(vec![3, h, w], data)).unwrap()
}

#[test]
fn pixel_loss_matches_mean_square_oracle() {
    let (a, b) = (noise(17, 23, 1), noise(17, 23, 2));
    let got = pixel_loss(&a, &b).unwrap();
    assert!((got - mse(a.tensor().data(), b.tensor().data())).abs() < 1e-7);
    assert_eq!(pixel_loss(&a, &a).unwrap(), 0.0);
    let (zeros, ones) = (ImagePlane::filled(3, 5, 5, 0.0), ImagePlane::filled(3, 5, 5, 1.0));
    assert_eq!(pixel_loss(&zeros, &ones).unwrap(), 1.0);
    assert!(pixel_loss(&a, &noise(17, 22, 1)).is_err());
}

#[test]
fn perceptual_distance_axioms() {
    let l = loss();
    let img = photo(64, 64, 0);
    assert_eq!(perceptual_distance(&l, &img, &img).unwrap().value, 0.0);
    let other = photo(64, 64, 3);
    let ab = perceptual_distance(&l, &img, &other).unwrap().value;
    let ba = perceptual_distance(&l, &other, &img).unwrap().value;
    assert!(ab > 0.0 && (ab - ba).abs() <= 1e-12 * ab);
    assert!(perceptual_distance(&l, &img, &photo(64, 48, 0)).is_err());
}

#[test]
fn gray_replacement_is_farther_than_a_one_pixel_shift() {
    let l = loss();
    let img = photo(64, 64, 1);
    let gray = ImagePlane::filled(3, 64, 64, 0.5);
    let shifted = ImagePlane::from_fn(3, 64, 64, |c, y, x| img.get(c, y, x.saturating_sub(1)));
    let d_gray = perceptual_distance(&l, &img, &gray).unwrap().value;
    let d_shift = perceptual_distance(&l, &img, &shifted).unwrap().value;
    assert!(d_gray > d_shift, "{d_gray} vs {d_shift}");
}

#[test]
fn layer_weights_and_depth_normalizer() {
    let l = loss();
    assert_eq!(l.config.layers, vec![(4, 1.0), (5, 3.0)]);
    assert_eq!(l.config.depth, 5);
    let (a, b) = (photo(48, 48, 2), photo(48, 48, 5));
    let (fa, fb) = (l.features(a.tensor()), l.features(b.tensor()));
    // conv4_3 at stride 8, conv5_3 at stride 16
    assert_eq!(fa[0].shape(), &[512, 6, 6]);
    assert_eq!(fa[1].shape(), &[512, 3, 3]);
    let d = perceptual_distance(&l, &a, &b).unwrap();
    let e4 = mse(fa[0].data(), fb[0].data()) / 5.0;
    let e5 = 9.0 * mse(fa[1].data(), fb[1].data()) / 5.0;
    assert!((d.per_layer[&4] - e4).abs() <= 1e-9 * e4);
    assert!((d.per_layer[&5] - e5).abs() <= 1e-9 * e5);
    assert!((d.value - e4 - e5).abs() <= 1e-9 * d.value);

    let heavier = PerceptualLoss::with_config(vgg().clone(), PerceptualConfig { layers: vec![(4, 1.0), (5, 6.0)], depth: 5 });
    assert!(perceptual_distance(&heavier, &a, &b).unwrap().value > d.value);
    assert_eq!(perceptual_distance(&heavier, &a, &a).unwrap().value, 0.0);
}

#[test]
fn pair_is_the_sum_of_both_single_branches() {
    let l = loss();
    let img = photo(64, 72, 4);
    let out = run_cycle(&random_model((8, 8)), &img, &RetargetSpec::new(0.6, 0.7)).unwrap();
    let pair = pair_cycle_loss(&l, &img, &out).unwrap();
    let top = single_cycle_loss(&l, &img, &out, CycleBranch::Top).unwrap();
    let bottom = single_cycle_loss(&l, &img, &out, CycleBranch::Bottom).unwrap();
    assert_eq!(pair.total, pair.term_top + pair.term_bottom);
    assert_eq!(pair.total, top.total + bottom.total);
    assert_eq!((top.total, top.term_bottom), (top.term_top, 0.0));
    assert_eq!((bottom.total, bottom.term_top), (bottom.term_bottom, 0.0));
    assert!(pair.term_top > 0.0 && pair.term_bottom > 0.0);
    assert!(pair.total >= pair.term_top.max(pair.term_bottom));
    assert_eq!(pair.layers, vec![(4, 1.0), (5, 3.0)]);
}

#[test]
fn identity_cycle_has_near_zero_loss() {
    let l = loss();
    let img = photo(48, 48, 6);
    let out = run_cycle(&common::zero_model((8, 8)), &img, &RetargetSpec::new(1.0, 1.0)).unwrap();
    assert!(pair_cycle_loss(&l, &img, &out).unwrap().total < 1e-6);
    assert!(single_cycle_loss(&l, &img, &out, CycleBranch::Bottom).unwrap().total < 1e-6);
}

#[test]
fn loss_recomputes_from_dumped_images() {
    let l = loss();
    let img = photo(64, 64, 7);
    let out = run_cycle(&random_model((8, 8)), &img, &RetargetSpec::new(0.5, 0.75)).unwrap();
    let live = pair_cycle_loss(&l, &img, &out).unwrap().total;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cycle.safetensors");
    let mut meta = Metadata::new();
    meta.insert("format_version".into(), "1".into());
    let tensors: Vec<(String, &Tensor<f32>)> = vec![
        ("source".into(), img.tensor()),
        ("top_hr".into(), out.top_hr.tensor()),
        ("bottom_lr".into(), out.bottom_lr.tensor()),
    ];
    write_tensors(&path, &tensors, &meta).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    let st = deserialize(&bytes).unwrap();
    let load = |n: &str| ImagePlane::from_tensor(read_f32(&st, n, &[3, 64, 64]).unwrap()).unwrap();
    let (src, top, bottom) = (load("source"), load("top_hr"), load("bottom_lr"));
    let offline = perceptual_distance(&l, &src, &top).unwrap().value + perceptual_distance(&l, &src, &bottom).unwrap().value;
    assert!((offline - live).abs() <= 1e-12 * live.max(1.0));
}

#[test]
fn saliency_term() {
    let l = loss();
    let img = photo(32, 32, 8);
    let base = perceptual_distance(&l, &img, &photo(32, 32, 9)).unwrap();
    let report = cycle_ir_core::loss::LossReport {
        total: base.value,
        term_top: base.value,
        term_bottom: 0.0,
        per_layer: base.per_layer,
        layers: l.config.layers.clone(),
    };
    let zero = AttentionMap::constant(4, 4, 0.0);
    let half = ImagePlane::filled(1, 32, 32, 0.5);
    assert_eq!(saliency_guided_loss(&report, &zero, &half, 1.0).unwrap(), report.total);

    let logits = AttentionMap::constant(4, 4, 2.0);
    let matched = ImagePlane::filled(1, 32, 32, (1.0 / (1.0 + (-2.0f64).exp())) as f32);
    assert!((saliency_guided_loss(&report, &logits, &matched, 1.0).unwrap() - report.total).abs() < 1e-7);

    let mask = ImagePlane::from_fn(1, 32, 32, |_, y, _| if y < 16 { 1.0 } else { 0.0 });
    assert_eq!(saliency_guided_loss(&report, &logits, &mask, 0.0).unwrap(), report.total);
    let s = 1.0 / (1.0 + (-2.0f64).exp());
    let addend = 0.5 * (1.0 - s).powi(2) + 0.5 * s * s;
    let got = saliency_guided_loss(&report, &logits, &mask, 2.0).unwrap() - report.total;
    assert!((got - 2.0 * addend).abs() < 1e-6);
    assert!(saliency_guided_loss(&report, &logits, &img, 1.0).is_err());
}

#[test]
fn input_gradient_matches_finite_differences() {
    let l64 = PerceptualLoss::<f64>::new(vgg().cast());
    let target_img: Tensor<f64> = photo(32, 32, 10).tensor().cast();
    let probe: Tensor<f64> = photo(32, 32, 11).tensor().cast();
    let target = l64.features(&target_img);

    let value = |x: &Tensor<f64>| -> f64 {
        l64.features(x)
            .iter()
            .zip(&target)
            .zip([1.0, 3.0])
            .map(|((a, b), beta)| {
                let m = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64;
                beta * beta / 5.0 * m
            })
            .sum()
    };

    let mut g = Graph::<f64>::new();
    let bound = l64.bind(&mut g);
    let x = g.param(probe.clone());
    let (total, _) = l64.distance_var(&mut g, &bound, &target, x).unwrap();
    assert!((g.value(total).item() - value(&probe)).abs() < 1e-12);
    let grad = g.backward(total).take(x).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    for _ in 0..20 {
        let i = rng.random_range(0..probe.len());
        let (mut up, mut down) = (probe.clone(), probe.clone());
        up.data_mut()[i] += h;
        down.data_mut()[i] -= h;
        let numeric = (value(&up) - value(&down)) / (2.0 * h);
        let analytic = grad.data()[i];
        let scale = numeric.abs().max(analytic.abs()).max(1e-9);
        assert!((numeric - analytic).abs() / scale < 1e-3, "pixel {i}: {analytic} vs {numeric}");
    }
}
