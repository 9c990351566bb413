use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use cycle_ir_core::checkpoint::load_model;
use cycle_ir_core::cycle::{ratio_size, retarget_image, run_cycle};
use cycle_ir_core::eval::{append_records, comparison_sheet, evaluate, EvalRecord, Method};
use cycle_ir_core::image::{is_lossless_path, is_writable_path, ImagePlane};
use cycle_ir_core::loss::{pair_cycle_loss, PerceptualLoss};
use cycle_ir_core::model::{attention_for_image, ModelParams, Vgg16};
use cycle_ir_core::trainer::{self, load_dataset, TrainConfig};
use cycle_ir_core::warp::{normalize_profile, retarget_sizes, scaling_profile_hr, scaling_profile_lr, RetargetSpec};

const MODEL_ENV: &str = "CYCLE_IR_MODEL";
const RATIO_RANGE: (f64, f64) = (0.25, 4.0);
const MIN_ABSOLUTE: usize = 16;

#[derive(Parser)]
#[command(name = "cycle-ir", version, about = "Content-aware image retargeting trained without labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a folder of images
    Train(TrainArgs),
    /// Resize one image to a new aspect ratio
    Retarget(RetargetArgs),
    /// Compare two models side by side on a folder of images
    Ablate(AblateArgs),
    /// Dump every image of one cycle, the attention map and the warp grids
    Inspect(InspectArgs),
    /// Score a model and plain scaling on a folder of images
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// key = value file; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// pair, single_top, single_bottom, pixel, pixel_plus_perceptual or saliency_guided
    #[arg(long)]
    loss_mode: Option<String>,
    /// grid as MxN
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// HxW
    #[arg(long)]
    train_resolution: Option<String>,
    #[arg(long)]
    max_images: Option<usize>,
    #[arg(long)]
    saliency_dir: Option<PathBuf>,
    /// continue from a training-state checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// any further key=value override
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct ModelArg {
    /// model or training-state checkpoint
    #[arg(long, env = MODEL_ENV)]
    model: Option<PathBuf>,
}

impl ModelArg {
    fn load(&self) -> anyhow::Result<ModelParams> {
        let path = self.path()?;
        load_model(path).with_context(|| format!("loading model {}", path.display()))
    }

    fn path(&self) -> anyhow::Result<&Path> {
        // checked during validation; absence there is a usage error
        self.model.as_deref().ok_or_else(|| anyhow!("no model given"))
    }
}

#[derive(Args)]
struct RetargetArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    width_ratio: Option<f64>,
    #[arg(long)]
    height_ratio: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// write sigmoid(attention) as a grayscale image (png or bmp)
    #[arg(long)]
    dump_attention: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    model_a: PathBuf,
    #[arg(long)]
    model_b: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    width_ratio: f64,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    input: PathBuf,
    /// ratio for both axes, in (0, 1]
    #[arg(long)]
    ratio: f64,
    /// overrides --ratio for the height
    #[arg(long)]
    height_ratio: Option<f64>,
    /// overrides --ratio for the width
    #[arg(long)]
    width_ratio: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    height_ratio: f64,
    #[arg(long, default_value_t = 0.5)]
    width_ratio: f64,
    /// CSV file the records are appended to
    #[arg(long)]
    out: PathBuf,
    /// also write one comparison sheet per image here
    #[arg(long)]
    sheets: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<cycle_ir_core::Error> for Failure {
    fn from(e: cycle_ir_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require_model(m: &ModelArg) -> Result<(), Failure> {
    if m.model.is_none() {
        return Err(usage(format!("no model given: pass --model or set {MODEL_ENV}")));
    }
    Ok(())
}

fn require_writable(path: &Path) -> Result<(), Failure> {
    if !is_writable_path(path) {
        return Err(usage(format!("{}: unsupported output format (use png, jpg or bmp)", path.display())));
    }
    Ok(())
}

fn check_ratio(name: &str, r: f64) -> Result<(), Failure> {
    if !(RATIO_RANGE.0..=RATIO_RANGE.1).contains(&r) {
        return Err(usage(format!("{name} {r} is outside [{}, {}]", RATIO_RANGE.0, RATIO_RANGE.1)));
    }
    Ok(())
}

fn check_cycle_ratio(name: &str, r: f64) -> Result<(), Failure> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(usage(format!("{name} {r} must lie in (0, 1]")));
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn extractor_for(params: &ModelParams) -> anyhow::Result<PerceptualLoss> {
    Ok(PerceptualLoss::new(Vgg16::from_source(&params.config.backbone)?))
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::from_file(p).map_err(|e| usage(e.to_string()))?,
        None => TrainConfig::default(),
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((k.into(), v));
        }
    };
    put("data_dir", a.data_dir.map(|p| p.display().to_string()));
    put("epochs", a.epochs.map(|v| v.to_string()));
    put("batch_size", a.batch_size.map(|v| v.to_string()));
    put("learning_rate", a.learning_rate.map(|v| v.to_string()));
    put("loss_mode", a.loss_mode);
    put("grid", a.grid);
    put("seed", a.seed.map(|v| v.to_string()));
    put("checkpoint_dir", a.checkpoint_dir.map(|p| p.display().to_string()));
    put("train_resolution", a.train_resolution);
    put("max_images", a.max_images.map(|v| v.to_string()));
    put("saliency_dir", a.saliency_dir.map(|p| p.display().to_string()));
    for s in &a.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        overrides.push((k.into(), v.into()));
    }
    for (k, v) in &overrides {
        config.set(k, v).map_err(|e| usage(e.to_string()))?;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    if !config.data_dir.is_dir() {
        return Err(Failure::Runtime(anyhow!("data directory {} does not exist", config.data_dir.display())));
    }
    info!("training with loss mode {} for {} epochs", config.loss_mode, config.epochs);
    let out = match &a.resume {
        Some(ck) => trainer::resume(&config, ck)?,
        None => trainer::train(&config)?,
    };
    for (epoch, mean) in &out.epoch_means {
        println!("epoch {epoch}: mean loss {mean:.6e}");
    }
    if let Some(last) = out.checkpoints.last() {
        println!("final checkpoint: {}", last.display());
    }
    Ok(())
}

enum Target {
    Ratio(f64, f64),
    Absolute(Option<usize>, Option<usize>),
}

fn cmd_retarget(a: RetargetArgs) -> Result<(), Failure> {
    require_model(&a.model)?;
    require_writable(&a.output)?;
    let ratios = a.width_ratio.is_some() || a.height_ratio.is_some();
    let absolute = a.width.is_some() || a.height.is_some();
    let target = match (ratios, absolute) {
        (true, true) => return Err(usage("ratio flags and absolute size flags are mutually exclusive")),
        (false, false) => return Err(usage("give --width-ratio/--height-ratio or --width/--height")),
        (true, false) => {
            let (h, w) = (a.height_ratio.unwrap_or(1.0), a.width_ratio.unwrap_or(1.0));
            check_ratio("--height-ratio", h)?;
            check_ratio("--width-ratio", w)?;
            Target::Ratio(h, w)
        }
        (false, true) => {
            for (name, v) in [("--height", a.height), ("--width", a.width)] {
                if v.is_some_and(|v| v < MIN_ABSOLUTE) {
                    return Err(usage(format!("{name} must be at least {MIN_ABSOLUTE}")));
                }
            }
            Target::Absolute(a.height, a.width)
        }
    };
    if let Some(p) = &a.dump_attention {
        if !is_lossless_path(p) {
            return Err(usage(format!("{}: attention dumps need a lossless format (png or bmp)", p.display())));
        }
    }

    let params = a.model.load()?;
    let image = ImagePlane::load(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let dst = match target {
        Target::Ratio(h, w) => ratio_size(image.size(), h, w)?,
        Target::Absolute(h, w) => (h.unwrap_or(image.height()), w.unwrap_or(image.width())),
    };
    let out = retarget_image(&params, &image, dst)?;
    out.image.save(&a.output)?;
    if let Some(p) = &a.dump_attention {
        out.attention.to_image().save(p)?;
    }
    println!("{}x{} -> {}x{}: {}", image.width(), image.height(), dst.1, dst.0, a.output.display());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<(), Failure> {
    require_model(&a.model)?;
    let phi_h = a.height_ratio.unwrap_or(a.ratio);
    let phi_w = a.width_ratio.unwrap_or(a.ratio);
    check_cycle_ratio("height ratio", phi_h)?;
    check_cycle_ratio("width ratio", phi_w)?;
    let spec = RetargetSpec::new(phi_h, phi_w);

    let params = a.model.load()?;
    let image = ImagePlane::load(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let outs = run_cycle(&params, &image, &spec)?;
    let report = pair_cycle_loss(&extractor_for(&params)?, &image, &outs)?;

    std::fs::create_dir_all(&a.out_dir).context("creating the output directory")?;
    let name = stem(&a.input);
    for (suffix, img) in outs.named() {
        img.save(&a.out_dir.join(format!("{name}_{suffix}.png")))?;
    }
    outs.attn_fwd.to_image().save(&a.out_dir.join(format!("{name}_attention.png")))?;
    let (lr_size, hr_size) = retarget_sizes(image.size(), &spec)?;
    let lr = scaling_profile_lr(&outs.attn_fwd);
    let hr = scaling_profile_hr(&lr, &spec)?;
    std::fs::write(
        a.out_dir.join(format!("{name}_grid_lr.txt")),
        normalize_profile(&lr, image.size(), lr_size)?.to_text(),
    )
    .context("writing grid edges")?;
    std::fs::write(
        a.out_dir.join(format!("{name}_grid_hr.txt")),
        normalize_profile(&hr, image.size(), hr_size)?.to_text(),
    )
    .context("writing grid edges")?;
    std::fs::write(a.out_dir.join(format!("{name}_loss.json")), serde_json_line(&report)?).context("writing loss")?;
    println!("cycle loss {:.6e} (top {:.6e}, bottom {:.6e})", report.total, report.term_top, report.term_bottom);
    Ok(())
}

fn serde_json_line<T: serde::Serialize>(v: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string(v)? + "\n")
}

fn cmd_ablate(a: AblateArgs) -> Result<(), Failure> {
    check_cycle_ratio("--width-ratio", a.width_ratio)?;
    let pa = load_model(&a.model_a).with_context(|| format!("loading {}", a.model_a.display()))?;
    let pb = load_model(&a.model_b).with_context(|| format!("loading {}", a.model_b.display()))?;
    if pa.config.grid != pb.config.grid {
        return Err(Failure::Runtime(anyhow!(
            "checkpoints disagree on the warp grid: {:?} vs {:?}",
            pa.config.grid,
            pb.config.grid
        )));
    }
    let data = load_dataset(&a.images)?;
    let loss = extractor_for(&pa)?;
    let spec = RetargetSpec::new(1.0, a.width_ratio);
    let methods = [Method::Model { name: "model_a", params: &pa }, Method::Model { name: "model_b", params: &pb }];
    let mut records = Vec::new();
    for (id, image) in &data.items {
        let name = stem(Path::new(id));
        comparison_sheet(image, &methods, &spec, &a.out.join("sheets").join(format!("{name}.png")))?;
        for (m, tag) in methods.iter().zip(["a", "b"]) {
            let Method::Model { params, .. } = m else { unreachable!() };
            let attn = attention_for_image(image, params)?;
            let dir = a.out.join("attention");
            std::fs::create_dir_all(&dir).context("creating the attention directory")?;
            attn.to_image().save(&dir.join(format!("{name}_{tag}.png")))?;
            if let Some((rec, _)) = evaluate(id, m, &loss, image, &spec)? {
                records.push(rec);
            }
        }
    }
    append_records(&a.out.join("records.csv"), &records)?;
    println!("{} images, {} records", data.len(), records.len());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    require_model(&a.model)?;
    check_cycle_ratio("--height-ratio", a.height_ratio)?;
    check_cycle_ratio("--width-ratio", a.width_ratio)?;
    let params = a.model.load()?;
    let data = load_dataset(&a.images)?;
    let loss = extractor_for(&params)?;
    let spec = RetargetSpec::new(a.height_ratio, a.width_ratio);
    let methods = [Method::Model { name: "cycle_ir", params: &params }, Method::UniformScale];
    let mut records: Vec<EvalRecord> = Vec::new();
    for (id, image) in &data.items {
        for m in &methods {
            if let Some((rec, _)) = evaluate(id, m, &loss, image, &spec)? {
                records.push(rec);
            }
        }
        if let Some(dir) = &a.sheets {
            let all = [methods[0], Method::UniformScale, Method::CenterCrop];
            comparison_sheet(image, &all, &spec, &dir.join(format!("{}.png", stem(Path::new(id)))))?;
        }
    }
    append_records(&a.out, &records)?;
    for r in &records {
        println!("{} {} score {:.6e} in {:.3}s", r.image_id, r.method, r.cycle_score, r.wall_time);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Retarget(a) => cmd_retarget(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
