use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spindlekv::allocator::BelowMinimum;
use spindlekv::config::{RunConfig, WORKERS_ENV};
use spindlekv::format::{
    read_archive, read_dump, write_archive, write_csv, write_dump, write_json, write_report_csv,
};
use spindlekv::pipeline::{census, compress, reconstruct_dump};
use spindlekv::simulator::{generate_synthetic, simulate_decode, SimulationOptions, SyntheticSpec};
use spindlekv::{Error, GqaMode, ModelConfig, Result};

/// KV-cache compression: layer-tapered eviction plus similarity codebooks.
#[derive(Parser)]
#[command(name = "spindlekv", version)]
struct Cli {
    /// JSON run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads [default: available parallelism].
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a dump into an archive and write a ratio report.
    Compress {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Report as JSON [default: <output>.report.json].
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-layer report as CSV.
        #[arg(long)]
        report_csv: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Rebuild a dump from an archive.
    Reconstruct {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Store keys rotated at their positions.
        #[arg(long)]
        apply_rope: bool,
    },
    /// Count similar key/value pairs per head and write the score profile.
    Census {
        #[arg(short, long)]
        input: PathBuf,
        /// Pair counts as CSV.
        #[arg(short, long)]
        output: PathBuf,
        /// Ascending per-layer score profile as CSV (needs query windows).
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        key_threshold: Option<f64>,
        #[arg(long)]
        value_threshold: Option<f64>,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Decode against full and compressed caches and measure divergence.
    Simulate {
        #[arg(short, long)]
        input: PathBuf,
        /// Fidelity result as JSON.
        #[arg(short, long)]
        output: PathBuf,
        /// Per-step divergences as CSV.
        #[arg(long)]
        steps_csv: Option<PathBuf>,
        /// Decoded tokens after the initial step.
        #[arg(long)]
        steps: Option<usize>,
        /// Max-abs divergence allowed for a pass.
        #[arg(long)]
        tolerance: Option<f64>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Generate a synthetic dump.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PipelineArgs {
    /// Global reserve ratio r in (0, 1].
    #[arg(long)]
    ratio: Option<f64>,
    /// Observation window length.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    key_threshold: Option<f64>,
    #[arg(long)]
    value_threshold: Option<f64>,
    /// Deepest-layer minimum ratio beta.
    #[arg(long)]
    min_ratio: Option<f64>,
    #[arg(long, value_enum)]
    gqa_mode: Option<CliGqaMode>,
    /// Use the published deep-layer endpoint 1 - 2 r_c.
    #[arg(long)]
    strict_paper: bool,
    /// Fall back to a uniform budget when r_c is at or below beta.
    #[arg(long)]
    uniform_below_minimum: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliGqaMode {
    PerHead,
    GroupAveraged,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(short, long)]
    output: PathBuf,
    /// JSON synthetic spec; flags below are ignored when given.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    q_heads: usize,
    #[arg(long, default_value_t = 8)]
    kv_heads: usize,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    #[arg(long, default_value_t = 256)]
    seq_len: usize,
    /// Number of clusters; 0 draws Gaussian vectors.
    #[arg(long, default_value_t = 0)]
    clusters: usize,
    #[arg(long, default_value_t = 0.96)]
    within: f64,
    #[arg(long, default_value_t = 0.5)]
    cross: f64,
    #[arg(long, default_value_t = 0.5)]
    magnitude_min: f64,
    #[arg(long, default_value_t = 2.0)]
    magnitude_max: f64,
    #[arg(long, default_value_t = 6.0)]
    temperature: f64,
    #[arg(long, default_value_t = 8)]
    query_window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn merge(cli: &Cli, pipeline: Option<&PipelineArgs>) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    if let Some(p) = pipeline {
        if let Some(v) = p.ratio {
            cfg.ratio = v;
        }
        if let Some(v) = p.window {
            cfg.window_len = v;
        }
        if let Some(v) = p.key_threshold {
            cfg.key_threshold = v;
        }
        if let Some(v) = p.value_threshold {
            cfg.value_threshold = v;
        }
        if let Some(v) = p.min_ratio {
            cfg.min_ratio = v;
        }
        if let Some(m) = p.gqa_mode {
            cfg.gqa_mode = match m {
                CliGqaMode::PerHead => GqaMode::PerHeadUnfolded,
                CliGqaMode::GroupAveraged => GqaMode::GroupAveraged,
            };
        }
        if p.strict_paper {
            cfg.strict_paper = true;
        }
        if p.uniform_below_minimum {
            cfg.below_minimum = BelowMinimum::Uniform;
        }
        if let Some(v) = p.seed {
            cfg.seed = v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_report_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".report.json");
    output.with_file_name(name)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Compress { input, output, report, report_csv, pipeline } => {
            let cfg = merge(cli, Some(pipeline))?;
            in_pool(&cfg, || {
                let dump = at(input, read_dump(input))?;
                let out = compress(&dump, &cfg.compression_options())?;
                at(output, write_archive(&out.archive, output))?;
                write_json(&out.report, report.clone().unwrap_or_else(|| default_report_path(output)))?;
                if let Some(path) = report_csv {
                    write_report_csv(&out.report, path)?;
                }
                println!(
                    "compressed {} layers: r = {:.6}, exact ratio = {:.6}",
                    out.archive.layers.len(),
                    out.report.r,
                    out.report.exact_ratio
                );
                Ok(())
            })
        }
        Command::Reconstruct { input, output, apply_rope } => {
            let mut cfg = merge(cli, None)?;
            cfg.apply_rope |= *apply_rope;
            in_pool(&cfg, || {
                let archive = at(input, read_archive(input))?;
                at(output, write_dump(&reconstruct_dump(&archive, cfg.apply_rope)?, output))
            })
        }
        Command::Census { input, output, profile, key_threshold, value_threshold, window } => {
            let mut cfg = merge(cli, None)?;
            cfg.key_threshold = key_threshold.unwrap_or(cfg.key_threshold);
            cfg.value_threshold = value_threshold.unwrap_or(cfg.value_threshold);
            cfg.window_len = window.unwrap_or(cfg.window_len);
            cfg.validate()?;
            in_pool(&cfg, || {
                let dump = at(input, read_dump(input))?;
                let c = census(&dump, cfg.key_threshold, cfg.value_threshold, cfg.window_len)?;
                write_csv(&c.pairs, output)?;
                if let Some(path) = profile {
                    write_csv(&c.profile, path)?;
                }
                Ok(())
            })
        }
        Command::Simulate { input, output, steps_csv, steps, tolerance, pipeline } => {
            let mut cfg = merge(cli, Some(pipeline))?;
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.tolerance = tolerance.unwrap_or(cfg.tolerance);
            cfg.validate()?;
            in_pool(&cfg, || {
                let dump = at(input, read_dump(input))?;
                let sim = SimulationOptions {
                    steps: cfg.steps,
                    tolerance: cfg.tolerance,
                    seed: cfg.seed,
                    ..Default::default()
                };
                let res = simulate_decode(&dump, &cfg.compression_options(), &sim)?;
                write_json(&res, output)?;
                if let Some(path) = steps_csv {
                    write_csv(&res.steps, path)?;
                }
                println!(
                    "max abs divergence {:.3e} (tolerance {:.1e}): {}; analytic bound {}",
                    res.max_abs,
                    res.tolerance,
                    if res.passed { "pass" } else { "fail" },
                    if res.bound_holds { "holds" } else { "violated" }
                );
                Ok(())
            })
        }
        Command::Synth(args) => {
            let cfg = merge(cli, None)?;
            in_pool(&cfg, || {
                let spec = match &args.spec {
                    Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                    None => {
                        let base = if args.clusters == 0 {
                            SyntheticSpec::gaussian()
                        } else {
                            SyntheticSpec::clusters(args.clusters, args.within, args.cross)
                        };
                        SyntheticSpec {
                            magnitude_min: args.magnitude_min,
                            magnitude_max: args.magnitude_max,
                            query_temperature: args.temperature,
                            query_window: args.query_window,
                            seed: args.seed,
                            ..base
                        }
                    }
                };
                let model = ModelConfig::new(args.head_dim, args.q_heads, args.kv_heads, args.layers)?;
                at(&args.output, write_dump(&generate_synthetic(&spec, &model, args.seq_len)?, &args.output))
            })
        }
    }
}

/// Names the file in I/O diagnostics.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn in_pool(cfg: &RunConfig, job: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.resolved_workers()?)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(job)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spindlekv: {e}");
            ExitCode::FAILURE
        }
    }
}
