use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use kqt_cli::{
    ingest_csv, load_model, load_table, parse_probs, read_text, save_model, save_table, sibling,
    write_csv, write_text, CliError, Result, RunManifest,
};
use kqt_ewma::bench::{self, BenchConfig};
use kqt_ewma::synthetic::{self, GaussianSpec, Source, StreamSpec};
use kqt_ewma::{
    build_histogram, calibrate_thresholds, monitor_stream, rng, BuildConfig, CalibrationConfig,
    KernelKind, KqtError,
};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "kqt",
    version,
    about = "Kernel-QuantTree EWMA change detection"
)]
struct Cli {
    /// Worker threads for calibration and benchmarks (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,

    /// Print results as JSON.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a threshold table by Monte Carlo.
    Calibrate(CalibrateArgs),
    /// Build a histogram from training data.
    Build(BuildArgs),
    /// Run a model and threshold table over a stream.
    Monitor(MonitorArgs),
    /// Generate synthetic streams with a controlled change.
    Gen(GenArgs),
    /// Run benchmark configurations and write a report.
    Bench(BenchArgs),
}

#[derive(Args, Serialize)]
struct CalibrateArgs {
    #[arg(long, default_value_t = 32)]
    k: usize,
    /// `uniform` or a comma-separated list of K probabilities.
    #[arg(long, default_value = "uniform")]
    pi: String,
    /// Training-set size of the histograms the table will serve.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0.05)]
    lambda: f64,
    #[arg(long, default_value_t = 500.0)]
    arl0: f64,
    #[arg(long, default_value_t = 20_000)]
    streams: usize,
    /// Calibration horizon; defaults to 6 * ARL0.
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum KernelArg {
    Mahalanobis,
    Wm,
    Lp,
    Axis,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Switch {
    On,
    Off,
}

#[derive(Args, Serialize)]
struct BuildArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long, value_enum, default_value_t = KernelArg::Mahalanobis)]
    kernel: KernelArg,
    /// Mixture components for the wm kernel.
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// Exponent for the lp kernel.
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    #[arg(long, default_value_t = 32)]
    k: usize,
    #[arg(long, default_value = "uniform")]
    pi: String,
    /// Candidate centroids per bin.
    #[arg(long, default_value_t = 250)]
    v: usize,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    jitter: Switch,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct MonitorArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    thresholds: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    /// Also write the result record here (JSON if the name ends in .json,
    /// CSV otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Family {
    Gaussian,
    Mixture,
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[arg(value_enum)]
    family: Family,
    #[arg(long, default_value_t = 4)]
    d: usize,
    /// Symmetric KL divergence of the change; 0 for a stationary stream.
    #[arg(long, default_value_t = 1.0)]
    skl: f64,
    /// 1-based position of the first changed sample.
    #[arg(long, default_value_t = 300)]
    tau: usize,
    #[arg(long, default_value_t = 3000)]
    length: usize,
    #[arg(long, default_value_t = 3)]
    modes: usize,
    /// Scale of the random mixture means.
    #[arg(long, default_value_t = 3.0)]
    spread: f64,
    /// Also write this many stationary training samples.
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long, requires = "train_size")]
    train_out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    /// A single configuration object or an array of them.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

struct Ctx {
    quiet: bool,
    json: bool,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn seed(&self, given: Option<u64>) -> u64 {
        given.unwrap_or_else(|| {
            let nanos = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_nanos() as u64)
                .unwrap_or(0);
            let s = rng::derive(nanos, "cli-seed", std::process::id() as u64);
            eprintln!("seed: {s}");
            s
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        quiet: cli.quiet,
        json: cli.json,
    };
    let res = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
        .and_then(|_| match cli.command {
            Command::Calibrate(a) => calibrate(&ctx, a),
            Command::Build(a) => build(&ctx, a),
            Command::Monitor(a) => monitor(&ctx, a),
            Command::Gen(a) => gen(&ctx, a),
            Command::Bench(a) => run_bench(&ctx, a),
        });
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v).map_err(KqtError::from)?)
}

fn finish(ctx: &Ctx, manifest: RunManifest) -> Result<()> {
    let primary = manifest.outputs[0].clone();
    let path = manifest.write_next_to(&primary)?;
    ctx.note(format!(
        "wrote {} (manifest {})",
        primary.display(),
        path.display()
    ));
    Ok(())
}

fn calibrate(ctx: &Ctx, mut a: CalibrateArgs) -> Result<()> {
    let seed = ctx.seed(a.seed);
    a.seed = Some(seed);
    let pi = parse_probs(&a.pi, a.k)?;
    let mut cfg = CalibrationConfig::new(pi, a.n, a.lambda, a.arl0);
    cfg.streams = a.streams;
    cfg.t_max = a.t_max;
    cfg.seed = seed;
    let table = calibrate_thresholds(&cfg)?;
    save_table(&a.out, &table)?;
    ctx.note(format!("calibrated {} steps", table.t_cut()));
    let mut m = RunManifest::new("calibrate", to_value(&a)?, Some(seed));
    m.outputs.push(a.out);
    finish(ctx, m)
}

fn build(ctx: &Ctx, mut a: BuildArgs) -> Result<()> {
    let seed = ctx.seed(a.seed);
    a.seed = Some(seed);
    let kernel = match a.kernel {
        KernelArg::Mahalanobis => KernelKind::Mahalanobis,
        KernelArg::Wm => KernelKind::WeightedMahalanobis { components: a.m },
        KernelArg::Lp => KernelKind::Lp { p: a.p },
        KernelArg::Axis => KernelKind::AxisAligned,
    };
    let train = ingest_csv(&a.train, None)?;
    let cfg = BuildConfig {
        bins: a.k,
        target_probs: Some(parse_probs(&a.pi, a.k)?),
        candidates: a.v,
        kernel,
        seed,
        jitter: matches!(a.jitter, Switch::On),
    };
    let hist = build_histogram(&train, &cfg)?;
    save_model(&a.out, &hist)?;
    ctx.note(format!(
        "built {} bins on {} points of dimension {}",
        hist.bins_len(),
        train.len(),
        train.dim()
    ));
    let mut m = RunManifest::new("build", to_value(&a)?, Some(seed));
    m.inputs.push(a.train);
    m.outputs.push(a.out);
    finish(ctx, m)
}

#[derive(Serialize)]
struct MonitorRecord {
    detected: bool,
    t_star: Option<usize>,
    samples_processed: usize,
}

fn monitor(ctx: &Ctx, a: MonitorArgs) -> Result<()> {
    let hist = load_model(&a.model)?;
    let table = load_table(&a.thresholds)?;
    let stream = ingest_csv(&a.stream, Some(hist.dim()))?;
    let out = monitor_stream(&hist, &table, stream.rows(), None)?;
    let rec = MonitorRecord {
        detected: out.detected,
        t_star: out.detection_time,
        samples_processed: out.samples_processed,
    };
    let json_line = serde_json::to_string(&rec).map_err(KqtError::from)?;
    let csv_text = format!(
        "detected,t_star,samples_processed\n{},{},{}\n",
        rec.detected,
        rec.t_star.map(|t| t.to_string()).unwrap_or_default(),
        rec.samples_processed
    );
    if ctx.json {
        println!("{json_line}");
    } else {
        print!("{csv_text}");
    }
    if let Some(path) = &a.out {
        let text = if path.extension().is_some_and(|e| e == "json") {
            format!("{json_line}\n")
        } else {
            csv_text
        };
        write_text(path, &text)?;
        let mut m = RunManifest::new("monitor", to_value(&a)?, None);
        m.inputs
            .extend([a.model.clone(), a.thresholds.clone(), a.stream.clone()]);
        m.outputs.push(path.clone());
        finish(ctx, m)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct StreamSidecar {
    d: usize,
    tau: Option<usize>,
    length: usize,
    achieved_skl: f64,
    seed: u64,
}

fn gen(ctx: &Ctx, mut a: GenArgs) -> Result<()> {
    let seed = ctx.seed(a.seed);
    a.seed = Some(seed);
    let mut r = rng::rng(seed, "phi0", 0);
    let source = match a.family {
        Family::Gaussian => Source::Gaussian(GaussianSpec::random(a.d, &mut r)?),
        Family::Mixture => {
            Source::Mixture(synthetic::random_mixture(a.d, a.modes, a.spread, &mut r)?)
        }
    };
    let change = if a.skl > 0.0 {
        let g = source.moment_gaussian()?;
        Some(synthetic::make_change(
            &g,
            a.skl,
            &mut rng::rng(seed, "change", 0),
        )?)
    } else {
        None
    };
    let achieved = change.as_ref().map_or(0.0, |c| c.achieved_skl);
    let spec = StreamSpec {
        source,
        tau: a.tau,
        length: a.length,
        change,
    };
    let stream = synthetic::sample_stream(&spec, &mut rng::rng(seed, "stream", 0))?;
    write_csv(&a.out, &stream)?;
    let sidecar = StreamSidecar {
        d: a.d,
        tau: spec.change.as_ref().map(|_| a.tau),
        length: a.length,
        achieved_skl: achieved,
        seed,
    };
    let side_path = sibling(&a.out, "json");
    write_json(&side_path, &sidecar)?;

    let mut m = RunManifest::new("gen", to_value(&a)?, Some(seed));
    m.outputs.extend([a.out.clone(), side_path]);
    if let (Some(n), Some(path)) = (a.train_size, &a.train_out) {
        let train = spec.source.sample(n, &mut rng::rng(seed, "train", 0));
        write_csv(path, &train)?;
        m.outputs.push(path.clone());
    }
    finish(ctx, m)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(KqtError::from)?;
    s.push('\n');
    write_text(path, &s)
}

fn run_bench(ctx: &Ctx, a: BenchArgs) -> Result<()> {
    let text = read_text(&a.config)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(KqtError::from)?;
    let cfgs: Vec<BenchConfig> = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|c| vec![c])
    }
    .map_err(KqtError::from)?;
    ctx.note(format!("running {} configurations", cfgs.len()));
    let rows = bench::compare_detectors(&cfgs)?;

    let mut w = csv::Writer::from_path(&a.out).map_err(|source| CliError::Csv {
        path: a.out.clone(),
        source,
    })?;
    for row in &rows {
        w.serialize(row).map_err(|source| CliError::Csv {
            path: a.out.clone(),
            source,
        })?;
    }
    w.flush().map_err(|source| CliError::Io {
        path: a.out.clone(),
        source,
    })?;
    if ctx.json {
        println!("{}", serde_json::to_string(&rows).map_err(KqtError::from)?);
    }

    let side_path = sibling(&a.out, "json");
    let seeds: Vec<u64> = cfgs.iter().map(|c| c.seed).collect();
    write_json(&side_path, &json!({ "configs": cfgs, "seeds": seeds }))?;
    let mut m = RunManifest::new("bench", to_value(&cfgs)?, seeds.first().copied());
    m.inputs.push(a.config);
    m.outputs.extend([a.out, side_path]);
    finish(ctx, m)
}
