//! Command-line front end: synthetic data generation, training, pair and
//! group inference, metric evaluation, curve export, and the built-in
//! verification suites.

use cafcn_core::data::{generate_dataset, load_dataset, load_image, save_map, SyntheticSpec};
use cafcn_core::metrics::{
    evaluate_dataset_with, f_beta_adaptive, GroundTruthMask, SaliencyMap,
};
use cafcn_core::network::{
    forward_pair, infer_group, load_checkpoint, NetworkConfig, NetworkParams,
};
use cafcn_core::selftest::{self, SelfTestOptions};
use cafcn_core::training::{train, LossConfig, OptimizerState, TrainOptions};
use cafcn_core::Error as CoreError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Output root fallback when a command's --out is omitted.
const OUTPUT_ROOT_ENV: &str = "CAFCN_OUTPUT_ROOT";
const LOCK_NAME: &str = ".cafcn-lock";

#[derive(Parser)]
#[command(
    name = "cafcn",
    about = "Co-saliency detection with a co-attention fully convolutional network",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic co-salient pair dataset on disk.
    GenerateData(GenerateArgs),
    /// Train the network on a generated dataset.
    Train(TrainArgs),
    /// Run inference on explicit images or on dataset pairs.
    Infer(InferArgs),
    /// Evaluate predicted maps against ground truth and write a report.
    Eval(EvalArgs),
    /// Write the averaged PR/ROC curves as CSV.
    Curves(EvalArgs),
    /// Run the built-in gradient, attention and metric verification suites.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ShapeArg {
    Square,
    Disc,
    Triangle,
}

impl From<ShapeArg> for cafcn_core::data::ShapeKind {
    fn from(s: ShapeArg) -> Self {
        match s {
            ShapeArg::Square => Self::Square,
            ShapeArg::Disc => Self::Disc,
            ShapeArg::Triangle => Self::Triangle,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Output dataset root; defaults to $CAFCN_OUTPUT_ROOT/dataset.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of pairs to generate.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, value_enum, default_value_t = ShapeArg::Disc)]
    shape: ShapeArg,
    #[arg(long, default_value_t = 2)]
    distractors: usize,
    /// Gaussian pixel noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct NetworkArgs {
    #[arg(long, default_value_t = 32)]
    input_size: usize,
    /// Encoder stage channels, comma separated.
    #[arg(long, default_value = "8,16,32", value_delimiter = ',')]
    encoder_channels: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    feature_channels: usize,
    #[arg(long, default_value_t = 8)]
    attention_reduction: usize,
    /// Encoder stages added back during decoding, comma separated.
    #[arg(long, default_value = "1,2", value_delimiter = ',')]
    skip_stages: Vec<usize>,
}

impl NetworkArgs {
    fn config(&self) -> NetworkConfig {
        NetworkConfig {
            input_size: self.input_size,
            input_channels: 3,
            encoder_channels: self.encoder_channels.clone(),
            feature_channels: self.feature_channels,
            attention_reduction: self.attention_reduction,
            skip_stages: self.skip_stages.clone(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root containing manifest.tsv.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the run log.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.005)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    lr_decay_factor: f64,
    #[arg(long, default_value_t = 50)]
    lr_decay_epochs: usize,
    /// Foreground weight of the loss.
    #[arg(long, default_value_t = 0.3)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use only the first N pairs after --skip.
    #[arg(long)]
    take: Option<usize>,
    /// Skip the first N pairs of the manifest.
    #[arg(long, default_value_t = 0)]
    skip: usize,
    /// Resume from a checkpoint file (epoch inferred from its name).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Explicit first-epoch index when resuming.
    #[arg(long)]
    start_epoch: Option<usize>,
    /// Parameter-initialization seed (fresh runs only).
    #[arg(long, default_value_t = 1)]
    init_seed: u64,
    #[command(flatten)]
    network: NetworkArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for the predicted maps.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Explicit image files (2 for a pair, more for a group).
    #[arg(value_name = "IMAGE")]
    images: Vec<PathBuf>,
    /// Force group inference even for exactly two images.
    #[arg(long)]
    group: bool,
    /// Dataset root: run over manifest pairs instead of explicit images.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    take: Option<usize>,
    #[arg(long, default_value_t = 0)]
    skip: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding predicted maps named pair_%05d_{1,2}.pgm.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset root providing the ground truth.
    #[arg(long)]
    data: PathBuf,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the averaged 256-row curves CSV here.
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Report the adaptive-threshold (2x mean) F-beta variant as well.
    #[arg(long)]
    adaptive_f_beta: bool,
    /// beta^2 of the F-measure.
    #[arg(long, default_value_t = 0.3)]
    beta_sq: f64,
    /// Mixing weight of the structure measure.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Subset of metric keys to report, comma separated.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    #[arg(long)]
    take: Option<usize>,
    #[arg(long, default_value_t = 0)]
    skip: usize,
}

#[derive(Args)]
struct SelftestArgs {
    /// Test hook: perturb one analytic gradient so the suite must fail.
    #[arg(long, hide = true)]
    inject_gradient_fault: bool,
}

/// Guard file preventing concurrent invocations against one output dir.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, String> {
        fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
        let path = dir.join(LOCK_NAME);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(format!(
                "output dir {} is locked by another invocation (remove {} if stale)",
                dir.display(),
                path.display()
            )),
            Err(e) => Err(format!("cannot lock {}: {e}", dir.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn default_out(explicit: Option<PathBuf>, leaf: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
            .join(leaf)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args, false),
        Command::Curves(args) => cmd_eval(args, true),
        Command::Selftest(args) => cmd_selftest(args),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn core_err(e: CoreError) -> String {
    e.to_string()
}

fn cmd_generate(args: GenerateArgs) -> Result<ExitCode, String> {
    let out = default_out(args.out, "dataset");
    let _lock = DirLock::acquire(&out)?;
    let spec = SyntheticSpec {
        image_size: args.image_size,
        common_shape: args.shape.into(),
        distractor_count: args.distractors,
        noise_std_dev: args.noise,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    generate_dataset(&spec, args.count, &out).map_err(core_err)?;
    println!("manifest: {}", out.join(cafcn_core::data::MANIFEST_NAME).display());
    println!("pairs: {}", args.count);
    Ok(ExitCode::SUCCESS)
}

fn slice_range<T>(items: &[T], skip: usize, take: Option<usize>) -> &[T] {
    let start = skip.min(items.len());
    let end = take.map_or(items.len(), |t| (start + t).min(items.len()));
    &items[start..end]
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, String> {
    let out = default_out(args.out, "run");
    let _lock = DirLock::acquire(&out)?;
    let dataset = load_dataset(&args.data).map_err(core_err)?;
    let subset = slice_range(&dataset, args.skip, args.take);
    if subset.is_empty() {
        return Err("selected dataset range is empty".into());
    }

    let (mut params, start_epoch) = match &args.resume {
        Some(ckpt) => {
            let params = load_checkpoint(ckpt).map_err(core_err)?;
            let inferred = args.start_epoch.or_else(|| epoch_from_name(ckpt)).unwrap_or(0);
            (params, inferred)
        }
        None => {
            let config = args.network.config();
            (NetworkParams::init(&config, args.init_seed).map_err(core_err)?, 0)
        }
    };

    let loss_cfg = LossConfig { eta: args.eta, ..LossConfig::default() };
    let mut state = OptimizerState::new(&params);
    state.learning_rate = args.lr;
    state.momentum = args.momentum;
    state.weight_decay = args.weight_decay;
    state.decay_factor = args.lr_decay_factor;
    state.decay_every_epochs = args.lr_decay_epochs;

    let mut log = String::new();
    log.push_str(&format!(
        "# eta={} beta_sq=0.3 alpha=0.5 batch_size={} momentum={} weight_decay={} lr={} seed={}\n",
        args.eta, args.batch_size, args.momentum, args.weight_decay, args.lr, args.seed
    ));
    let c = &params.config;
    log.push_str(&format!(
        "# config: input_size={} encoder={:?} feature_channels={} reduction={} skips={:?} (desk-scale structural dims)\n",
        c.input_size, c.encoder_channels, c.feature_channels, c.attention_reduction, c.skip_stages
    ));
    log.push_str(&format!("# pairs={} start_epoch={start_epoch}\n", subset.len()));

    let opts = TrainOptions {
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        checkpoint_dir: Some(out.clone()),
        start_epoch,
    };
    let mut sink = Vec::new();
    let outcome = train(&mut params, subset, &loss_cfg, &mut state, &opts, Some(&mut sink));
    log.push_str(&String::from_utf8_lossy(&sink));
    fs::write(out.join("train.log"), &log).map_err(|e| e.to_string())?;
    match outcome {
        Ok(records) => {
            if let Some(last) = records.last() {
                println!("trained {} epochs, final mean loss {:.6}", records.len(), last.mean_loss);
            } else {
                println!("wrote initial checkpoint only (0 epochs)");
            }
            println!("run log: {}", out.join("train.log").display());
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => Err(format!("training aborted: {e}")),
    }
}

fn epoch_from_name(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    stem.strip_prefix("epoch_")?.parse().ok()
}

fn cmd_infer(args: InferArgs) -> Result<ExitCode, String> {
    let out = default_out(args.out, "maps");
    // Validate inputs fully before creating any output.
    let params = load_checkpoint(&args.checkpoint).map_err(core_err)?;

    if let Some(data) = &args.data {
        let dataset = load_dataset(data).map_err(core_err)?;
        let subset = slice_range(&dataset, args.skip, args.take);
        let _lock = DirLock::acquire(&out)?;
        for (offset, sample) in subset.iter().enumerate() {
            let idx = args.skip + offset;
            let (p1, p2) =
                forward_pair(&sample.image1, &sample.image2, &params).map_err(core_err)?;
            save_map(&p1, &out.join(format!("pair_{idx:05}_1.pgm"))).map_err(core_err)?;
            save_map(&p2, &out.join(format!("pair_{idx:05}_2.pgm"))).map_err(core_err)?;
        }
        println!("wrote {} map pairs to {}", subset.len(), out.display());
        return Ok(ExitCode::SUCCESS);
    }

    if args.images.len() < 2 {
        return Err("need at least two images (or --data for dataset mode)".into());
    }
    let mut images = Vec::new();
    for path in &args.images {
        images.push(load_image(path).map_err(|e| format!("{}: {e}", path.display()))?);
    }
    let maps = if args.images.len() == 2 && !args.group {
        let (p1, p2) = forward_pair(&images[0], &images[1], &params).map_err(core_err)?;
        vec![p1, p2]
    } else {
        infer_group(&images, &params).map_err(core_err)?
    };
    let _lock = DirLock::acquire(&out)?;
    for (i, map) in maps.iter().enumerate() {
        save_map(map, &out.join(format!("map_{i:02}.pgm"))).map_err(core_err)?;
    }
    println!("wrote {} maps to {}", maps.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs, curves_only: bool) -> Result<ExitCode, String> {
    let dataset = load_dataset(&args.data).map_err(core_err)?;
    let subset = slice_range(&dataset, args.skip, args.take);
    if subset.is_empty() {
        return Err("selected dataset range is empty".into());
    }
    let mut pairs: Vec<(SaliencyMap, GroundTruthMask)> = Vec::new();
    for (offset, sample) in subset.iter().enumerate() {
        let idx = args.skip + offset;
        for (branch, mask) in [(1, &sample.mask1), (2, &sample.mask2)] {
            let path = args.pred.join(format!("pair_{idx:05}_{branch}.pgm"));
            let map = cafcn_core::data::load_map(&path)
                .map_err(|e| format!("{}: {e}", path.display()))?;
            pairs.push((map, mask.clone()));
        }
    }
    let report = evaluate_dataset_with(&pairs, args.beta_sq, args.alpha).map_err(core_err)?;

    if let Some(path) = &args.curves {
        fs::write(path, report.curves_csv()).map_err(|e| e.to_string())?;
        println!("curves: {}", path.display());
    }
    if curves_only {
        if args.curves.is_none() {
            let path = default_out(args.out.clone(), "curves.csv");
            fs::write(&path, report.curves_csv()).map_err(|e| e.to_string())?;
            println!("curves: {}", path.display());
        }
        return Ok(ExitCode::SUCCESS);
    }

    let mut text = report.to_key_values();
    if args.adaptive_f_beta {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (map, mask) in &pairs {
            match f_beta_adaptive(map, mask, args.beta_sq) {
                Ok(v) => {
                    sum += v;
                    n += 1;
                }
                Err(CoreError::DegenerateMask) => {}
                Err(e) => return Err(core_err(e)),
            }
        }
        let line = format!("f_beta_adaptive={:.6}\n", sum / n.max(1) as f64);
        match text.find("images=") {
            Some(pos) => text.insert_str(pos, &line),
            None => text.push_str(&line),
        }
    }
    if !args.metrics.is_empty() {
        text = text
            .lines()
            .filter(|line| {
                let key = line.split('=').next().unwrap_or("");
                args.metrics.iter().any(|m| m == key)
                    || key == "images"
                    || key == "degenerate_skipped"
            })
            .map(|l| format!("{l}\n"))
            .collect();
    }
    match &args.out {
        Some(path) => {
            fs::write(path, &text).map_err(|e| e.to_string())?;
            println!("report: {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_selftest(args: SelftestArgs) -> Result<ExitCode, String> {
    let opts = SelfTestOptions { inject_gradient_fault: args.inject_gradient_fault };
    let results = selftest::run(&opts).map_err(core_err)?;
    let mut all_ok = true;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", r.name, r.detail);
        all_ok &= r.passed;
    }
    if all_ok {
        Ok(ExitCode::SUCCESS)
    } else {
        Err("selftest failed".into())
    }
}
