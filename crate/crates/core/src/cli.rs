//! The `vnet` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{format_xyz, parse_xyz, KvConfig};
use crate::dataset::{Dataset, SyntheticSet};
use crate::error::{Error, Result};
use crate::metrics::{self, SurfaceDistance};
use crate::model::{receptive_fields, NetworkConfig, VNetModel, NETWORK_KEYS};
use crate::rng::{self, tag};
use crate::train::{self, TrainConfig, Trainer};
use crate::volume::{self, ShapeKind, SyntheticSpec};

#[derive(Debug, Parser)]
#[command(
    name = "vnet",
    version,
    about = "Volumetric segmentation with a V-shaped residual network"
)]
pub struct Cli {
    /// key=value configuration file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for convolutions and evaluation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset of blobs on a noisy background.
    Generate(GenerateArgs),
    /// Print the theoretical receptive field of every stage.
    RfTable,
    /// Train a network on a dataset directory.
    Train(TrainArgs),
    /// Segment one volume.
    Infer(InferArgs),
    /// Segment a labelled dataset and write a metrics report.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Grid size x,y,z in voxels.
    #[arg(long)]
    pub dims: Option<String>,
    /// Voxel spacing x,y,z in mm.
    #[arg(long)]
    pub spacing: Option<String>,
    /// sphere or ellipsoid.
    #[arg(long)]
    pub shape: Option<String>,
    /// Sphere radius in voxels.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Ellipsoid semi-axes x,y,z in voxels.
    #[arg(long)]
    pub radii: Option<String>,
    /// Number of cases.
    #[arg(long)]
    pub count: Option<usize>,
    /// Maximum per-axis shift of the blob centre, voxels.
    #[arg(long)]
    pub center_jitter: Option<f64>,
    /// Maximum relative change of the radii.
    #[arg(long)]
    pub radius_jitter: Option<f64>,
    /// Standard deviation of the additive noise.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (`<name>_image.vvol` / `<name>_label.vvol`).
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for checkpoints and history.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Input image volume.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output label volume.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the foreground probability volume.
    #[arg(long)]
    pub prob: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Report CSV path.
    #[arg(long)]
    pub report: PathBuf,
    /// Report this percentile of the boundary distances instead of the
    /// maximum.
    #[arg(long, value_name = "Q")]
    pub percentile: Option<f64>,
}

pub const GENERATE_KEYS: &[&str] = &[
    "dims",
    "spacing",
    "shape",
    "radius",
    "radii",
    "count",
    "center_jitter",
    "radius_jitter",
    "fg_mean",
    "fg_std",
    "bg_mean",
    "bg_std",
    "noise_std",
    "seed",
];

/// File keys, then `--set` overrides, then `--seed`.
fn layered(cli: &Cli) -> Result<KvConfig> {
    let mut kv = match &cli.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::new(),
    };
    for s in &cli.overrides {
        let (k, v) = KvConfig::parse_assignment(s)?;
        kv.set(k, v);
    }
    if let Some(seed) = cli.seed {
        kv.set("seed", seed);
    }
    Ok(kv)
}

fn echo(kv: &KvConfig) {
    for (k, v) in kv.iter() {
        eprintln!("config: {k}={v}");
    }
    eprintln!("seed: {}", kv.get_raw("seed").unwrap_or("0"));
}

fn generate(cli: &Cli, args: &GenerateArgs) -> Result<()> {
    let mut kv = layered(cli)?;
    let flags: [(&str, Option<String>); 9] = [
        ("dims", args.dims.clone()),
        ("spacing", args.spacing.clone()),
        ("shape", args.shape.clone()),
        ("radius", args.radius.map(|v| v.to_string())),
        ("radii", args.radii.clone()),
        ("count", args.count.map(|v| v.to_string())),
        ("center_jitter", args.center_jitter.map(|v| v.to_string())),
        ("radius_jitter", args.radius_jitter.map(|v| v.to_string())),
        ("noise_std", args.noise.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    kv.reject_unknown(GENERATE_KEYS)?;

    let dims: [usize; 3] = match kv.get_raw("dims") {
        Some(v) => parse_xyz("dims", v)?,
        None => [32, 32, 32],
    };
    let seed: u64 = kv.get("seed")?.unwrap_or(0);
    let default_radius = *dims.iter().min().expect("three dims") as f64 / 4.0;
    let mut spec = SyntheticSpec::sphere(dims, kv.get("radius")?.unwrap_or(default_radius), seed);
    if let Some(v) = kv.get_raw("spacing") {
        spec.spacing = parse_xyz("spacing", v)?;
    }
    spec.shape = kv.get("shape")?.unwrap_or(ShapeKind::Sphere);
    if let Some(v) = kv.get_raw("radii") {
        spec.radii = parse_xyz("radii", v)?;
    }
    if let Some(v) = kv.get("fg_mean")? {
        spec.foreground_mean = v;
    }
    if let Some(v) = kv.get("fg_std")? {
        spec.foreground_std = v;
    }
    if let Some(v) = kv.get("bg_mean")? {
        spec.background_mean = v;
    }
    if let Some(v) = kv.get("bg_std")? {
        spec.background_std = v;
    }
    if let Some(v) = kv.get("noise_std")? {
        spec.noise_std = v;
    }
    let mut set = SyntheticSet::new(spec, kv.get("count")?.unwrap_or(1), seed);
    set.center_jitter = kv.get("center_jitter")?.unwrap_or(0.0);
    set.radius_jitter = kv.get("radius_jitter")?.unwrap_or(0.0);

    let t = &set.template;
    let mut resolved = KvConfig::new();
    resolved.set("dims", format_xyz(&t.dims));
    resolved.set("spacing", format_xyz(&t.spacing));
    resolved.set("shape", kv.get_raw("shape").unwrap_or("sphere"));
    resolved.set("radii", format_xyz(&t.radii));
    resolved.set("count", set.count);
    resolved.set("center_jitter", set.center_jitter);
    resolved.set("radius_jitter", set.radius_jitter);
    resolved.set("fg_mean", t.foreground_mean);
    resolved.set("fg_std", t.foreground_std);
    resolved.set("bg_mean", t.background_mean);
    resolved.set("bg_std", t.background_std);
    resolved.set("noise_std", t.noise_std);
    resolved.set("seed", seed);
    echo(&resolved);

    let data = set.generate()?;
    data.save_dir(&args.out)?;
    for c in data.cases() {
        let fg = c.label.foreground_count() as f64 / c.label.len() as f64;
        println!("{} foreground_fraction={fg:.6}", c.name);
    }
    Ok(())
}

fn rf_table(cli: &Cli) -> Result<()> {
    let kv = layered(cli)?;
    let mut known: Vec<&str> = NETWORK_KEYS.to_vec();
    known.push("seed");
    kv.reject_unknown(&known)?;
    let config = NetworkConfig::default().overlay(&kv)?;
    let mut resolved = KvConfig::new();
    config.write_to(&mut resolved);
    resolved.set("seed", kv.get::<u64>("seed")?.unwrap_or(0));
    echo(&resolved);
    print!("{}", receptive_fields(&config).to_table());
    Ok(())
}

fn run_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let kv = layered(cli)?;
    kv.reject_unknown(&train::known_keys())?;
    let data = Dataset::load_dir(&args.data)?;
    let mut trainer = match &args.resume {
        Some(path) => Trainer::resume(&Checkpoint::load(path)?, data, &kv)?,
        None => {
            let network = NetworkConfig::desk().overlay(&kv)?;
            let cfg = TrainConfig::desk().overlay(&kv)?;
            let model = VNetModel::build(network, rng::derive(cfg.seed, &[tag::MODEL_INIT]))?;
            Trainer::new(cfg, model, data)?
        }
    };
    let resolved = trainer.resolved_config();
    echo(&resolved);
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    std::fs::write(args.out.join("config.txt"), resolved.to_string())
        .map_err(|e| Error::io(args.out.join("config.txt"), e))?;
    eprintln!(
        "parameters: {} in {} blocks",
        trainer.model().parameter_count(),
        trainer.model().params().len()
    );
    trainer.train_to_dir(&args.out)?;
    if let Some(last) = trainer.history().last() {
        println!(
            "iterations={} loss={} train_dice={}",
            trainer.state().iteration,
            last.loss,
            last.train_dice
        );
    }
    Ok(())
}

fn load_model(cli: &Cli, path: &Path) -> Result<VNetModel> {
    let kv = layered(cli)?;
    kv.reject_unknown(&["seed"])?;
    let ck = Checkpoint::load(path)?;
    let model = train::model_from_checkpoint(&ck)?;
    let mut resolved = KvConfig::new();
    model.config().write_to(&mut resolved);
    resolved.set("seed", kv.get::<u64>("seed")?.unwrap_or(0));
    echo(&resolved);
    Ok(model)
}

fn infer(cli: &Cli, args: &InferArgs) -> Result<()> {
    let model = load_model(cli, &args.model)?;
    let image = volume::load_volume(&args.input)?;
    let seg = metrics::segment(&model, &image)?;
    volume::save_label(&seg.mask, &args.out)?;
    if let Some(p) = &args.prob {
        volume::save_volume(&seg.probability, p)?;
    }
    println!(
        "foreground_voxels={} seconds={:.3}",
        seg.mask.foreground_count(),
        seg.elapsed.as_secs_f64()
    );
    Ok(())
}

fn evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let model = load_model(cli, &args.model)?;
    let data = Dataset::load_dir(&args.data)?;
    let distance = match args.percentile {
        Some(q) => SurfaceDistance::Percentile(q),
        None => SurfaceDistance::Max,
    };
    let report = metrics::evaluate_with(&model, &data, distance)?;
    report.save_csv(&args.report)?;
    let fmt = |s: Option<metrics::Summary>| match s {
        Some(s) => format!("{:.4} +- {:.4}", s.mean, s.std),
        None => "n/a".into(),
    };
    println!("dice {}", fmt(report.dice()));
    println!("hausdorff_mm {}", fmt(report.hausdorff()));
    println!("excluded {}", report.excluded());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "--threads must be at least 1".into(),
            ));
        }
        // a pool set up earlier in the same process stays in place
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match &cli.command {
        Command::Generate(a) => generate(cli, a),
        Command::RfTable => rf_table(cli),
        Command::Train(a) => run_train(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
    }
}

/// Exit status for an error: 2 for bad invocations, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={}", one_line(first));
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), one_line(&e.to_string()));
            exit_code(&e)
        }
    }
}
