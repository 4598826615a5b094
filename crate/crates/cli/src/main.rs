//! `diif`: upscale images, train decoders, benchmark decode cost and run
//! the self-check suite.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use diif::costmodel::{benchmark_decode, write_csv};
use diif::decoder::{Architecture, DecoderWeights};
use diif::encoder::{load_weights, unfold_encode, FeatureMap};
use diif::pipeline::{encoder_radius, train, upscale, weight_init, Target, TrainConfig, UpscaleOptions};
use diif::verify::{check_training_smoke, run_suite, synthetic_image, SmokeSettings};
use diif::SliceStrategy;

#[derive(Parser)]
#[command(
    name = "diif",
    version,
    about = "Arbitrary-scale image decoding with grouped, sliced coordinates"
)]
struct Cli {
    /// More log output (repeat for debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Upscale a PNG
    Upscale(UpscaleArgs),
    /// Train a decoder on a directory of PNGs
    Train(TrainArgs),
    /// Report MACs and decode time across scales
    Bench(BenchArgs),
    /// Run the self-check suite; exit code 1 on any failure
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyKind {
    Linear,
    Constant,
    Fixed,
}

#[derive(Args)]
struct SliceArgs {
    /// Slice interval rule
    #[arg(long, value_enum, default_value = "linear")]
    strategy: StrategyKind,
    /// Order parameter n of the linear (u = n*s) or constant (u = s^2/n) rule
    #[arg(long, default_value_t = 1)]
    n: u32,
    /// Interval for --strategy fixed (defaults to --n)
    #[arg(long)]
    fixed_interval: Option<usize>,
}

impl SliceArgs {
    fn strategy(&self) -> SliceStrategy {
        match self.strategy {
            StrategyKind::Linear => SliceStrategy::Linear(self.n),
            StrategyKind::Constant => SliceStrategy::Constant(self.n),
            StrategyKind::Fixed => SliceStrategy::Fixed(self.fixed_interval.unwrap_or(self.n as usize)),
        }
    }
}

#[derive(Args)]
struct UpscaleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    scale: f64,
    /// Output PNG (defaults to <input>_x<scale>.png)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Decoder weights (DIIF format)
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    slicing: SliceArgs,
    /// Decode without slice ensemble; the weights must have been trained that way
    #[arg(long)]
    no_ensemble: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the trained weights (DIIF format)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 48)]
    crop: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    coarse_layers: usize,
    #[arg(long, default_value_t = 3)]
    fine_layers: usize,
    /// Neighbourhood radius of the unfold encoder
    #[arg(long, default_value_t = 1)]
    radius: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Train without slice ensemble
    #[arg(long)]
    no_ensemble: bool,
    /// Optional file for the per-iteration loss trace
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[command(flatten)]
    slicing: SliceArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 320)]
    width: usize,
    #[arg(long, default_value_t = 180)]
    height: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,6,12,18,24")]
    scales: Vec<f64>,
    /// Decoder weights; a seeded random 27-channel decoder when omitted
    #[arg(long)]
    weights: Option<PathBuf>,
    /// CSV output
    #[arg(long)]
    report: PathBuf,
    /// Timed runs per scale (median reported); 0 reports MACs only
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    #[command(flatten)]
    slicing: SliceArgs,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run the 2000-iteration training smoke check (several minutes)
    #[arg(long)]
    training: bool,
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DIIF_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("DIIF_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("DIIF_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn default_output(input: &Path, scale: f64) -> PathBuf {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    input.with_file_name(format!("{stem}_x{scale}.png"))
}

fn cmd_upscale(a: UpscaleArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| default_output(&a.input, a.scale));
    let report = upscale(
        &a.input,
        &out,
        &a.weights,
        UpscaleOptions {
            target: Target::Scale(a.scale),
            strategy: a.slicing.strategy(),
            no_ensemble: a.no_ensemble,
        },
    )?;
    println!("{}", report.summary());
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        crop: a.crop,
        batch: a.batch,
        hidden: a.hidden,
        coarse_layers: a.coarse_layers,
        fine_layers: a.fine_layers,
        encoder_radius: a.radius,
        lr: a.lr,
        ensemble: !a.no_ensemble,
        strategy: a.slicing.strategy(),
        ..TrainConfig::new(&a.data, a.iters, a.seed)
    };
    let out = train(&cfg)?;
    out.weights.save(&a.out)?;
    if let Some(path) = &a.loss_log {
        let text: String = out.losses.iter().map(|l| format!("{l:.9e}\n")).collect();
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(last) = out.losses.last() {
        println!("final L1 {last:.5}");
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn bench_features(weights: &DecoderWeights<f32>, height: usize, width: usize) -> FeatureMap<f32> {
    let depth = weights.arch.feature_depth;
    match encoder_radius(depth) {
        Ok(r) => unfold_encode(&synthetic_image(0, height, width), r),
        Err(_) => {
            // not an unfold depth: tile a synthetic image's channels
            let img = synthetic_image(0, height, width);
            let data = (0..height * width * depth)
                .map(|i| {
                    let (p, d) = (i / depth, i % depth);
                    img.data()[(d % 3) * height * width + p]
                })
                .collect();
            FeatureMap::new(height, width, depth, data).expect("consistent dimensions")
        }
    }
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let weights = match &a.weights {
        Some(p) => load_weights(p)?,
        None => weight_init(Architecture::diif(27), 0),
    };
    let features = bench_features(&weights, a.height, a.width);
    let reports = benchmark_decode(&features, &weights, &a.scales, a.slicing.strategy(), a.repetitions)?;
    for r in &reports {
        println!(
            "{}{}",
            r.summary(),
            r.runtime_ms.map(|t| format!(", {t:.1} ms")).unwrap_or_default()
        );
    }
    let file = std::fs::File::create(&a.report).with_context(|| format!("creating {}", a.report.display()))?;
    write_csv(&reports, std::io::BufWriter::new(file)).with_context(|| format!("writing {}", a.report.display()))?;
    println!("wrote {}", a.report.display());
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<bool> {
    let mut ok = true;
    let mut results = run_suite(a.seed);
    if a.training {
        results.push(check_training_smoke(&SmokeSettings::default()));
    }
    for r in results {
        match r {
            Ok(outcome) => {
                ok &= outcome.passed;
                println!("{}", outcome.line());
            }
            Err(e) => {
                ok = false;
                println!("FAIL error: {e}");
            }
        }
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Upscale(a) => cmd_upscale(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Bench(a) => cmd_bench(a).map(|_| true),
        Command::Verify(a) => cmd_verify(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
