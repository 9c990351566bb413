use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cycle_ir_core::checkpoint::save_model;
use cycle_ir_core::eval::{cycle_consistency_score, read_records};
use cycle_ir_core::image::ImagePlane;
use cycle_ir_core::loss::{perceptual_distance, PerceptualLoss};
use cycle_ir_core::model::{ModelConfig, ModelParams, Vgg16};
use cycle_ir_core::synthetic::write_toy_set;
use cycle_ir_core::trainer::StepRecord;
use cycle_ir_core::warp::RetargetSpec;
use tempfile::TempDir;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cycle-ir")).args(args).env_remove("CYCLE_IR_MODEL").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn model(dir: &Path, name: &str, init_std: f64) -> PathBuf {
    let config = ModelConfig { init_std, ..ModelConfig::default() };
    let params = if init_std == 0.0 {
        ModelParams::zero_init(config, &Vgg16::seeded(16)).unwrap()
    } else {
        ModelParams::new(config).unwrap()
    };
    let path = dir.join(name);
    save_model(&params, &path).unwrap();
    path
}

fn picture(dir: &Path, name: &str, h: usize, w: usize) -> PathBuf {
    let img = ImagePlane::from_fn(3, h, w, |c, y, x| {
        let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
        (0.5 + 0.4 * (13.0 * fx + c as f32).sin() * (7.0 * fy).cos()).clamp(0.0, 1.0)
    });
    let path = dir.join(name);
    img.save(&path).unwrap();
    path
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn help_and_unknown_commands() {
    assert_eq!(code(&cli(&["--help"])), 0);
    assert_eq!(code(&cli(&["retarget", "--help"])), 0);
    assert_eq!(code(&cli(&["frobnicate"])), 1);
    assert_eq!(code(&cli(&["retarget", "--input", "x.png"])), 1);
}

#[test]
fn retarget_sizes_and_attention_dump() {
    let dir = TempDir::new().unwrap();
    let m = model(dir.path(), "m.safetensors", 0.05);
    let input = picture(dir.path(), "in.png", 768, 1024);
    let out = dir.path().join("half.png");
    let att = dir.path().join("att.png");
    let o = cli(&["retarget", "--model", s(&m), "--input", s(&input), "--output", s(&out), "--width-ratio", "0.5", "--dump-attention", s(&att)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(ImagePlane::load(&out).unwrap().size(), (768, 512));
    let a = ImagePlane::load_gray(&att).unwrap();
    assert_eq!(a.size(), (16, 16));

    let small = picture(dir.path(), "small.png", 60, 80);
    let wide = dir.path().join("wide.png");
    assert_eq!(code(&cli(&["retarget", "--model", s(&m), "--input", s(&small), "--output", s(&wide), "--width-ratio", "1.75"])), 0);
    assert_eq!(ImagePlane::load(&wide).unwrap().size(), (60, 140));

    let fixed = dir.path().join("fixed.bmp");
    assert_eq!(code(&cli(&["retarget", "--model", s(&m), "--input", s(&small), "--output", s(&fixed), "--width", "33", "--height", "41"])), 0);
    assert_eq!(ImagePlane::load(&fixed).unwrap().size(), (41, 33));
}

#[test]
fn unit_ratios_reproduce_the_input() {
    let dir = TempDir::new().unwrap();
    let m = model(dir.path(), "m.safetensors", 0.05);
    let input = picture(dir.path(), "in.png", 50, 70);
    let out = dir.path().join("same.png");
    let o = cli(&["retarget", "--model", s(&m), "--input", s(&input), "--output", s(&out), "--width-ratio", "1.0", "--height-ratio", "1.0"]);
    assert_eq!(code(&o), 0);
    assert!(ImagePlane::load(&out).unwrap().max_abs_diff(&ImagePlane::load(&input).unwrap()) < 1e-5);
}

#[test]
fn model_path_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let m = model(dir.path(), "m.safetensors", 0.0);
    let input = picture(dir.path(), "in.png", 40, 40);
    let out = dir.path().join("o.png");
    let o = Command::new(env!("CARGO_BIN_EXE_cycle-ir"))
        .args(["retarget", "--input", s(&input), "--output", s(&out), "--height-ratio", "0.75"])
        .env("CYCLE_IR_MODEL", &m)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(ImagePlane::load(&out).unwrap().size(), (30, 40));
}

#[test]
fn usage_errors_write_nothing() {
    let dir = TempDir::new().unwrap();
    let m = model(dir.path(), "m.safetensors", 0.0);
    let input = picture(dir.path(), "in.png", 40, 40);
    let out_dir = dir.path().join("out");
    std::fs::create_dir(&out_dir).unwrap();
    let out = out_dir.join("o.png");
    let base = ["retarget", "--model", s(&m), "--input", s(&input), "--output", s(&out)];
    let cases: [&[&str]; 7] = [
        &["--width-ratio", "0.1"],
        &["--width-ratio", "5"],
        &["--width-ratio", "0.5", "--width", "20"],
        &["--width", "8"],
        &[],
        &["--width-ratio", "0.5", "--dump-attention", "out/att.jpg"],
        &["--width-ratio", "0.5", "--output", "out/o.tiff"],
    ];
    for extra in cases {
        let args: Vec<&str> = base.iter().chain(extra.iter()).copied().collect();
        let o = cli(&args);
        assert_eq!(code(&o), 1, "{extra:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(files_in(&out_dir).is_empty(), "{extra:?}");
    }
    // no model anywhere is a usage error too
    let o = cli(&["retarget", "--input", s(&input), "--output", s(&out), "--width-ratio", "0.5"]);
    assert_eq!(code(&o), 1);
    assert!(files_in(&out_dir).is_empty());
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let input = picture(dir.path(), "in.png", 40, 40);
    let out = dir.path().join("o.png");
    let missing = dir.path().join("nope.safetensors");
    let o = cli(&["retarget", "--model", s(&missing), "--input", s(&input), "--output", s(&out), "--width-ratio", "0.5"]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());

    let o = cli(&["train", "--data-dir", s(&dir.path().join("no_such_dir")), "--checkpoint-dir", s(&dir.path().join("ck"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_dir"));
}

#[test]
fn train_honours_flags_and_writes_one_checkpoint_per_epoch() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("toy");
    write_toy_set(&data, 2, (128, 128), 3).unwrap();
    let ck = dir.path().join("ck");
    let config = dir.path().join("train.cfg");
    std::fs::write(&config, "epochs = 1\nbatch_size = 2\ntrain_resolution = 128x128\ngrid = 8x8\n").unwrap();
    let o = cli(&[
        "train", "--config", s(&config), "--data-dir", s(&data), "--checkpoint-dir", s(&ck), "--epochs", "5", "--loss-mode", "pixel",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let checkpoints: Vec<_> = files_in(&ck).into_iter().filter(|f| f.ends_with(".safetensors")).collect();
    assert_eq!(checkpoints.len(), 5, "{checkpoints:?}");
    let log = std::fs::read_to_string(ck.join("train_log.jsonl")).unwrap();
    let records: Vec<StepRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 5);
    assert!(records.iter().all(|r| r.loss_mode.name() == "pixel"));

    let bad = cli(&["train", "--config", s(&config), "--data-dir", s(&data), "--loss-mode", "lpips"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn inspect_dumps_the_whole_cycle() {
    let dir = TempDir::new().unwrap();
    let m = model(dir.path(), "m.safetensors", 0.05);
    let input = picture(dir.path(), "scene.png", 256, 256);
    let out = dir.path().join("fresh").join("inspect");
    let o = cli(&["inspect", "--model", s(&m), "--input", s(&input), "--ratio", "0.5", "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let expect = [("lr", 128), ("hr", 512), ("top_lr", 64), ("top_hr", 256), ("bottom_lr", 256), ("bottom_hr", 1024)];
    for (suffix, side) in expect {
        let img = ImagePlane::load(&out.join(format!("scene_{suffix}.png"))).unwrap();
        assert_eq!(img.size(), (side, side), "{suffix}");
    }
    for f in ["scene_attention.png", "scene_grid_lr.txt", "scene_grid_hr.txt", "scene_loss.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    // the dumped restoration rescores to the logged term up to 8-bit quantization
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("scene_loss.json")).unwrap()).unwrap();
    let live = report["term_top"].as_f64().unwrap();
    let loss = PerceptualLoss::new(Vgg16::seeded(16));
    let src = ImagePlane::load(&input).unwrap();
    let dumped = ImagePlane::load(&out.join("scene_top_hr.png")).unwrap();
    let offline = perceptual_distance(&loss, &src, &dumped).unwrap().value;
    assert!((offline - live).abs() <= 0.02 * live, "{offline} vs {live}");

    assert_eq!(code(&cli(&["inspect", "--model", s(&m), "--input", s(&input), "--ratio", "1.5", "--out-dir", s(&out)])), 1);
}

#[test]
fn ablate_counts_and_identical_models() {
    let dir = TempDir::new().unwrap();
    let a = model(dir.path(), "a.safetensors", 0.05);
    let b = model(dir.path(), "b.safetensors", 0.05);
    let images = dir.path().join("imgs");
    std::fs::create_dir(&images).unwrap();
    for i in 0..3 {
        picture(&images, &format!("p{i}.png"), 64 + 8 * i, 72);
    }
    let out = dir.path().join("ablate");
    let o = cli(&["ablate", "--model-a", s(&a), "--model-b", s(&b), "--images", s(&images), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files_in(&out.join("sheets")), ["p0.png", "p1.png", "p2.png"]);
    assert_eq!(files_in(&out.join("attention")).len(), 6);

    let records = read_records(&out.join("records.csv")).unwrap();
    assert_eq!(records.len(), 6);
    let params = cycle_ir_core::checkpoint::load_model(&a).unwrap();
    let loss = PerceptualLoss::new(Vgg16::seeded(16));
    for pair in records.chunks(2) {
        assert_eq!((pair[0].method.as_str(), pair[1].method.as_str()), ("model_a", "model_b"));
        assert_eq!(pair[0].cycle_score, pair[1].cycle_score);
        let img = ImagePlane::load(&images.join(&pair[0].image_id)).unwrap();
        let again = cycle_consistency_score(&params, &loss, &img, &RetargetSpec::new(1.0, 0.5)).unwrap();
        assert!((again - pair[0].cycle_score).abs() <= 1e-12 * again.max(1.0));
    }
    for i in 0..3 {
        let read = |t: &str| std::fs::read(out.join("attention").join(format!("p{i}_{t}.png"))).unwrap();
        assert_eq!(read("a"), read("b"));
    }

    let other = dir.path().join("c.safetensors");
    let coarse = ModelParams::new(ModelConfig { grid: (8, 8), ..ModelConfig::default() }).unwrap();
    save_model(&coarse, &other).unwrap();
    let o = cli(&["ablate", "--model-a", s(&a), "--model-b", s(&other), "--images", s(&images), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_appends_records_and_sheets() {
    let dir = TempDir::new().unwrap();
    let m = model(dir.path(), "m.safetensors", 0.0);
    let images = dir.path().join("imgs");
    std::fs::create_dir(&images).unwrap();
    picture(&images, "one.png", 64, 64);
    picture(&images, "two.png", 64, 96);
    let csv = dir.path().join("r.csv");
    let sheets = dir.path().join("sheets");
    let o = cli(&["eval", "--model", s(&m), "--images", s(&images), "--out", s(&csv), "--sheets", s(&sheets)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "image_id,method,phi_h,phi_w,cycle_score,wall_time");
    let records = read_records(&csv).unwrap();
    assert_eq!(records.len(), 4);
    // an untrained model warps uniformly, so it scores like plain scaling
    for pair in records.chunks(2) {
        assert_eq!((pair[0].method.as_str(), pair[1].method.as_str()), ("cycle_ir", "uniform"));
        assert!((pair[0].cycle_score - pair[1].cycle_score).abs() <= 1e-3 * pair[1].cycle_score);
    }
    assert_eq!(files_in(&sheets), ["one.png", "two.png"]);
}
