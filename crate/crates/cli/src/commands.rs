//! The eight subcommands. Each resolves its configuration (file, then
//! flag overrides), validates it, prepares the hash-named run directory,
//! and only then starts work, so every exit-2 failure happens before any
//! artifact is touched.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::Args;

use matteforge_core::bench::{run_benchmark, EvalSample};
use matteforge_core::data::{
    augment, depth_to_trimap, domain_shift, gen_backgrounds, gen_foreground, read_dataset,
    read_gray, read_image_dir, read_manifest, write_dataset, write_gray, write_rgb, DepthMap,
    ShiftConfig, SyntheticSample,
};
use matteforge_core::gradcheck::{full_suite_cases, run_suite};
use matteforge_core::mattemath::composite;
use matteforge_core::net::Model;
use matteforge_core::scalar::{Precision, Scalar};
use matteforge_core::tensor::Tensor;
use matteforge_core::train::{adapt_soc, soc_consistency, train_supervised};
use matteforge_core::video::{ofd_smooth, read_frames, write_frames};

use crate::config::{
    load_run_config, parse_size, prepare_run_dir, CliError, Phase, RunConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Precision {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON config file; omitted sections keep their defaults, flags
    /// override file values
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Parent output directory; artifacts land in <OUT>/<config-hash>/
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        load_run_config(self.config.as_deref())
    }
}

fn apply<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Generator seed [default: 0]
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,

    /// Distinct foreground figures [default: 4]
    #[arg(long, value_name = "INT")]
    pub count: Option<usize>,

    /// Sample size as HxW, both divisible by 16 [default: 64x64]
    #[arg(long, value_name = "HxW")]
    pub size: Option<String>,

    /// Re-render every sample in the shifted appearance domain
    #[arg(long)]
    pub shift: bool,
}

pub fn gen(args: &GenArgs) -> Result<(), CliError> {
    let mut rc = args.common.resolve()?;
    apply(&mut rc.gen.seed, args.seed);
    apply(&mut rc.gen.count, args.count);
    if let Some(raw) = &args.size {
        rc.gen.size = parse_size(raw)?;
    }
    if args.shift {
        rc.gen.shift = true;
    }
    rc.gen.validate()?;
    let dir = prepare_run_dir(&args.common.out, "gen", &rc)?;

    let gc = &rc.gen;
    let pool = gen_backgrounds::<f64>(gc.seed.wrapping_add(0x9e37_79b9), gc.size, gc.backgrounds);
    let mut samples = Vec::new();
    for i in 0..gc.count {
        let fig_seed = gc.seed.wrapping_add(i as u64);
        let (fg, alpha) = gen_foreground(fig_seed, gc.size, &gc.foreground).runtime_err()?;
        let batch =
            augment(&fg, &alpha, &pool, gc.n_crops, gc.n_composites, fig_seed).runtime_err()?;
        for (j, sample) in batch.iter().enumerate() {
            if gc.shift {
                let shift_seed = fig_seed.wrapping_mul(31).wrapping_add(j as u64);
                samples.push(
                    domain_shift(sample, shift_seed, &ShiftConfig::default()).runtime_err()?,
                );
            } else {
                samples.push(sample.clone());
            }
        }
    }
    let dataset_dir = dir.join("dataset");
    write_dataset(&dataset_dir, &samples).runtime_err()?;
    println!("wrote {} samples to {}", samples.len(), dataset_dir.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Dataset directory produced by `gen` (images plus manifest.json)
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,

    /// Initialization and shuffling seed [default: 0]
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,

    /// Weight of the semantic loss [default: 1]
    #[arg(long = "lambda-s", value_name = "REAL")]
    pub lambda_s: Option<f64>,

    /// Weight of the detail loss [default: 10]
    #[arg(long = "lambda-d", value_name = "REAL")]
    pub lambda_d: Option<f64>,

    /// Weight of the fused-matte loss [default: 1]
    #[arg(long = "lambda-alpha", value_name = "REAL")]
    pub lambda_alpha: Option<f64>,

    /// Epochs to run [default: 40]
    #[arg(long, value_name = "INT")]
    pub epochs: Option<usize>,

    /// Initial learning rate; decays by 0.1 every 10 epochs [default: 0.01]
    #[arg(long, value_name = "REAL")]
    pub lr: Option<f64>,

    /// Float width of parameters and arithmetic [default: single]
    #[arg(long, value_enum, value_name = "PRECISION")]
    pub precision: Option<PrecisionArg>,
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut rc = args.common.resolve()?;
    apply(&mut rc.train.seed, args.seed);
    apply(&mut rc.train.weights.semantic, args.lambda_s);
    apply(&mut rc.train.weights.detail, args.lambda_d);
    apply(&mut rc.train.weights.alpha, args.lambda_alpha);
    apply(&mut rc.train.epochs, args.epochs);
    apply(&mut rc.train.lr, args.lr);
    apply(&mut rc.precision, args.precision.map(Into::into));
    rc.train.validate().config_err()?;
    rc.model.validate().config_err()?;
    if rc.train.g_op.factor != rc.model.s_downsample_factor {
        return Err(CliError::Config(format!(
            "train.g_op.factor ({}) must match model.s_downsample_factor ({})",
            rc.train.g_op.factor, rc.model.s_downsample_factor
        )));
    }
    let dir = prepare_run_dir(&args.common.out, "train", &rc)?;
    match rc.precision {
        Precision::Single => train_with::<f32>(&rc, &args.data, &dir),
        Precision::Double => train_with::<f64>(&rc, &args.data, &dir),
    }
}

fn train_with<T: Scalar>(rc: &RunConfig, data: &Path, dir: &Path) -> Result<(), CliError> {
    let dataset: Vec<SyntheticSample<T>> = read_dataset(data).config_err()?;
    let mut model = Model::<T>::build(rc.model.clone(), rc.train.seed).config_err()?;
    let log = train_supervised(&mut model, &dataset, &rc.train).runtime_err()?;
    for r in log.records() {
        println!(
            "epoch {:>4}  lr {:<8}  total {:.6}  semantic {:.6}  detail {:.6}  alpha {:.6}",
            r.epoch, r.lr, r.loss_total, r.loss_semantic, r.loss_detail, r.loss_alpha
        );
    }
    let ckpt = dir.join("model.ckpt");
    model.save_to_path(&ckpt).runtime_err()?;
    let file = File::create(dir.join("train_log.jsonl")).runtime_err()?;
    log.write_jsonl(BufWriter::new(file)).runtime_err()?;
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Checkpoint of the trained model to adapt
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,

    /// Directory of unlabeled images from the target domain
    #[arg(long, value_name = "DIR")]
    pub images: PathBuf,

    /// Step-order seed [default: 0]
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,

    /// Adaptation steps [default: 100]
    #[arg(long, value_name = "INT")]
    pub steps: Option<usize>,

    /// Float width of parameters and arithmetic [default: single]
    #[arg(long, value_enum, value_name = "PRECISION")]
    pub precision: Option<PrecisionArg>,
}

pub fn adapt(args: &AdaptArgs) -> Result<(), CliError> {
    let mut rc = args.common.resolve()?;
    apply(&mut rc.soc.seed, args.seed);
    apply(&mut rc.soc.steps, args.steps);
    apply(&mut rc.precision, args.precision.map(Into::into));
    rc.soc.validate().config_err()?;
    let dir = prepare_run_dir(&args.common.out, "adapt", &rc)?;
    match rc.precision {
        Precision::Single => adapt_with::<f32>(&rc, &args.checkpoint, &args.images, &dir),
        Precision::Double => adapt_with::<f64>(&rc, &args.checkpoint, &args.images, &dir),
    }
}

fn adapt_with<T: Scalar>(
    rc: &RunConfig,
    checkpoint: &Path,
    images_dir: &Path,
    dir: &Path,
) -> Result<(), CliError> {
    let mut model = Model::<T>::load_from_path(checkpoint).config_err()?;
    if rc.soc.g_op.factor != model.config().s_downsample_factor {
        return Err(CliError::Config(format!(
            "soc.g_op.factor ({}) must match the checkpoint's s_downsample_factor ({})",
            rc.soc.g_op.factor,
            model.config().s_downsample_factor
        )));
    }
    let images: Vec<Tensor<T>> = read_image_dir(images_dir).config_err()?;
    if images.is_empty() {
        return Err(CliError::Config(format!("no images in {}", images_dir.display())));
    }
    let before = soc_consistency(&model, &images, &rc.soc).runtime_err()?;
    let outcome = adapt_soc(&mut model, &images, &rc.soc, None).runtime_err()?;
    let after = soc_consistency(&model, &images, &rc.soc).runtime_err()?;
    let ckpt = dir.join("adapted.ckpt");
    model.save_to_path(&ckpt).runtime_err()?;
    let file = File::create(dir.join("soc_log.jsonl")).runtime_err()?;
    outcome.log.write_jsonl(BufWriter::new(file)).runtime_err()?;
    println!(
        "consistency {before:.6} -> {after:.6} after {} steps on {} images",
        outcome.log.len(),
        images.len()
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Checkpoint to score
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,

    /// Ground-truthed dataset directory
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,

    /// Score only the transition band instead of the whole image
    #[arg(long)]
    pub transition_only: bool,

    /// Float width of parameters and arithmetic [default: single]
    #[arg(long, value_enum, value_name = "PRECISION")]
    pub precision: Option<PrecisionArg>,
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut rc = args.common.resolve()?;
    if args.transition_only {
        rc.bench.transition_only = true;
    }
    apply(&mut rc.precision, args.precision.map(Into::into));
    rc.bench.validate().config_err()?;
    let dir = prepare_run_dir(&args.common.out, "eval", &rc)?;
    match rc.precision {
        Precision::Single => eval_with::<f32>(&rc, &args.checkpoint, &args.data, &dir),
        Precision::Double => eval_with::<f64>(&rc, &args.checkpoint, &args.data, &dir),
    }
}

fn eval_with<T: Scalar>(
    rc: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    dir: &Path,
) -> Result<(), CliError> {
    let model = Model::<T>::load_from_path(checkpoint).config_err()?;
    let manifest = read_manifest(&data.join("manifest.json")).config_err()?;
    let samples: Vec<SyntheticSample<T>> = read_dataset(data).config_err()?;
    let eval_set: Vec<EvalSample<T>> = manifest
        .samples
        .into_iter()
        .zip(samples)
        .map(|(entry, s)| EvalSample { id: entry.id, image: s.image, alpha_g: s.alpha_g })
        .collect();
    let report = run_benchmark(&model, &eval_set, &rc.bench).runtime_err()?;
    report
        .write_json(BufWriter::new(File::create(dir.join("report.json")).runtime_err()?))
        .runtime_err()?;
    report
        .write_csv(BufWriter::new(File::create(dir.join("report.csv")).runtime_err()?))
        .runtime_err()?;
    println!(
        "mse {:.6}  mad {:.6}  params {}  {:.2} ms/frame over {} samples",
        report.mean_mse,
        report.mean_mad,
        report.params,
        report.mean_inference_ms,
        report.per_sample.len()
    );
    println!("report: {}", dir.join("report.json").display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct SmoothArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Directory of matte frames named frame_00000.png, frame_00001.png, ...
    #[arg(long, value_name = "DIR")]
    pub frames: PathBuf,

    /// Flicker threshold; a frame is corrected only when its neighbors
    /// agree within xi and it disagrees with both by more [default: 0.1]
    #[arg(long, value_name = "REAL")]
    pub xi: Option<f64>,
}

pub fn smooth(args: &SmoothArgs) -> Result<(), CliError> {
    let mut rc = args.common.resolve()?;
    apply(&mut rc.ofd.xi, args.xi);
    rc.ofd.validate().config_err()?;
    let dir = prepare_run_dir(&args.common.out, "smooth", &rc)?;

    let seq = read_frames::<f64>(&args.frames).config_err()?;
    let smoothed = ofd_smooth(&seq, &rc.ofd);
    let corrected = seq
        .frames()
        .iter()
        .zip(smoothed.frames())
        .filter(|(a, b)| a.tensor() != b.tensor())
        .count();
    let frames_dir = dir.join("frames");
    write_frames(&smoothed, &frames_dir).runtime_err()?;
    println!(
        "corrected {corrected} of {} frames into {}",
        smoothed.len(),
        frames_dir.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrimapArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Depth map (grayscale image), or a directory of them
    #[arg(long, value_name = "PATH")]
    pub depth: PathBuf,

    /// Reversed-depth foreground cut [default: 0.5]
    #[arg(long, value_name = "REAL")]
    pub threshold: Option<f64>,
}

pub fn trimap(args: &TrimapArgs) -> Result<(), CliError> {
    let mut rc = args.common.resolve()?;
    apply(&mut rc.trimap.threshold, args.threshold);
    rc.trimap.validate()?;
    let dir = prepare_run_dir(&args.common.out, "trimap", &rc)?;

    let inputs = depth_inputs(&args.depth)?;
    for path in &inputs {
        let gray: Tensor<f64> = read_gray(path).config_err()?;
        let s = gray.shape();
        let depth = DepthMap::new(s.h, s.w, gray.data().to_vec()).config_err()?;
        let tri = depth_to_trimap::<f64>(
            &depth,
            rc.trimap.threshold,
            rc.trimap.kernel,
            rc.trimap.iterations,
        )
        .runtime_err()?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        let out = dir.join(format!("trimap_{stem}.png"));
        write_gray(&out, tri.tensor()).runtime_err()?;
        let (f, b, u) = tri.counts();
        println!("{}: fg {f}, bg {b}, unknown {u}", out.display());
    }
    Ok(())
}

fn depth_inputs(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(CliError::Config(format!("{}: no such file or directory", path.display())));
    }
    let mut found: Vec<PathBuf> = fs::read_dir(path)
        .config_err()?
        .collect::<Result<Vec<_>, _>>()
        .config_err()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("pgm") | Some("ppm")
            )
        })
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(CliError::Config(format!("no depth maps in {}", path.display())));
    }
    Ok(found)
}

#[derive(Debug, Args)]
pub struct CompositeArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Dataset directory whose foregrounds and mattes to composite
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
}

pub fn composite_cmd(args: &CompositeArgs) -> Result<(), CliError> {
    let rc = args.common.resolve()?;
    rc.composite.validate()?;
    let dir = prepare_run_dir(&args.common.out, "composite", &rc)?;

    let manifest = read_manifest(&args.data.join("manifest.json")).config_err()?;
    let samples: Vec<SyntheticSample<f64>> = read_dataset(&args.data).config_err()?;
    let color = rc.composite.background;
    for (entry, s) in manifest.samples.iter().zip(&samples) {
        let bg = Tensor::from_fn(s.fg.shape(), |_, c, _, _| color[c]);
        let img = composite(&s.alpha_g, &s.fg, &bg).runtime_err()?;
        write_rgb(&dir.join(format!("composite_{}.png", entry.id)), &img).runtime_err()?;
    }
    println!("wrote {} composites to {}", samples.len(), dir.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// JSON config file; only its precision field is consulted
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Float width under test [default: single]
    #[arg(long, value_enum, value_name = "PRECISION")]
    pub precision: Option<PrecisionArg>,

    /// Random restarts per op [default: 8 single, 20 double]
    #[arg(long, value_name = "INT")]
    pub seeds: Option<u64>,
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let mut rc = load_run_config(args.config.as_deref())?;
    apply(&mut rc.precision, args.precision.map(Into::into));
    let seeds = args.seeds.unwrap_or(match rc.precision {
        Precision::Single => 8,
        Precision::Double => 20,
    });
    if seeds == 0 {
        return Err(CliError::Config("seeds: must be at least 1".into()));
    }
    let report = match rc.precision {
        Precision::Single => run_suite(&full_suite_cases::<f32>(), seeds),
        Precision::Double => run_suite(&full_suite_cases::<f64>(), seeds),
    }
    .runtime_err()?;
    print!("{report}");
    if report.all_pass() {
        println!("all {} ops within tolerance", report.cases.len());
        Ok(())
    } else {
        let failed = report.cases.iter().filter(|c| !c.pass).count();
        Err(CliError::Runtime(format!("{failed} ops exceeded tolerance")))
    }
}
