//! `proxyforge`: command-line driver for the proxy ground-truth pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use proxyforge_core::config::PipelineConfig;
use proxyforge_core::crawl::TOKEN_ENV;
use proxyforge_core::pipeline::{gate_manifest, Pipeline, Stage, StageReport};
use proxyforge_core::Error;

/// Exit codes, one per failure class.
mod exit {
    pub const FAILURE: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const MISSING_INPUT: u8 = 4;
    pub const AUTH: u8 = 5;
    pub const NETWORK: u8 = 6;
    pub const IO: u8 = 7;
    pub const CONTRACT: u8 = 8;
    pub const DATA: u8 = 9;
}

#[derive(Parser)]
#[command(name = "proxyforge", version, about = "Proxy ground-truth synthesis for semantic segmentation")]
struct Cli {
    /// Pipeline configuration (TOML). When omitted, `<work-dir>/config.toml`
    /// is used if present, else the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Work directory holding every stage's output.
    #[arg(long, global = true, default_value = "work")]
    work_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download images for every keyword from the search endpoint.
    Crawl(CrawlArgs),
    /// Apply the blur and saturation/brightness gates.
    Filter(FilterArgs),
    /// Build region hierarchies from edge maps and cut them.
    Regions(RegionsArgs),
    /// Fuse cue maps and snap them onto regions.
    Heuristic(HeuristicArgs),
    /// Train the noise-filtering classifier.
    NfmTrain,
    /// Round 1: mark off-category regions of the heuristic maps as ignored.
    NfmFilter(NfmFilterArgs),
    /// Produce refined outputs for round 1 or round 2.
    Refine(RefineArgs),
    /// Per-category IoU of predicted masks against ground truth.
    Eval(EvalArgs),
    /// Overlay masks or heuristic maps on their images.
    Render(RenderArgs),
    /// Write a synthetic data set (images, manifest, cues, ground truth).
    Synth(SynthArgs),
    /// Fit the stand-in learner to round-1 targets and write score maps.
    Surrogate,
    /// Run several stages in dependency order.
    Run(RunArgs),
    /// Print the resolved configuration as TOML.
    Config(ConfigArgs),
}

#[derive(Args)]
struct CrawlArgs {
    /// File with one keyword per line; replaces the configured keywords.
    #[arg(long)]
    keywords: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    /// Search URL template with {keyword} and {limit} placeholders.
    #[arg(long)]
    endpoint: Option<String>,
    /// Crawl directory (default: <work-dir>/crawl).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FilterArgs {
    /// Gate this manifest in place instead of running the pipeline stage.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    blur_thresh: Option<f64>,
    #[arg(long)]
    sv_thresh: Option<f64>,
}

#[derive(Args)]
struct RegionsArgs {
    #[arg(long)]
    edges: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct HeuristicArgs {
    #[arg(long)]
    sal: Option<PathBuf>,
    #[arg(long)]
    att: Option<PathBuf>,
    /// Region maps (default: <work-dir>/regions).
    #[arg(long)]
    regions: Option<PathBuf>,
}

#[derive(Args)]
struct NfmFilterArgs {
    /// Pass the heuristic maps through unchanged.
    #[arg(long)]
    bypass: bool,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    round: u8,
    /// Learner score maps for round 2.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Request noise filtering; defaults to the configuration in round 1
    /// and is rejected in round 2.
    #[arg(long)]
    nfm: Option<bool>,
    #[arg(long)]
    crf_iters: Option<usize>,
    #[arg(long)]
    crf_lambda: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Print CSV instead of the aligned table.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Masks or heuristic maps (default: <work-dir>/round2).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// Stages to run, e.g. `synth filter regions heuristic`.
    #[arg(required = true)]
    stages: Vec<String>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Start from the synthetic preset instead of the defaults.
    #[arg(long)]
    synthetic: bool,
}

const WORK_CONFIG: &str = "config.toml";

fn load_config(cli: &Cli, synthetic_default: bool) -> Result<PipelineConfig> {
    let work_config = cli.work_dir.join(WORK_CONFIG);
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None if work_config.is_file() => PipelineConfig::load(&work_config)?,
        None if synthetic_default => PipelineConfig::synthetic(),
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn pipeline(cli: &Cli, config: PipelineConfig) -> Result<Pipeline> {
    Ok(Pipeline::new(config, &cli.work_dir, cli.jobs)?)
}

fn print_report(r: &StageReport) {
    println!("{}: {} items, {}", r.stage, r.items, r.detail);
}

fn read_keywords(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn run(cli: &Cli) -> Result<()> {
    let synthetic = matches!(cli.command, Command::Synth(_));
    let mut config = load_config(cli, synthetic)?;
    match &cli.command {
        Command::Crawl(a) => {
            if let Some(k) = &a.keywords {
                config.keywords = read_keywords(k)?;
            }
            if let Some(l) = a.limit {
                config.crawl.limit = l;
            }
            if let Some(e) = &a.endpoint {
                config.crawl.endpoint = e.clone();
            }
            if config.crawl.endpoint.is_empty() {
                return Err(Error::Config("no search endpoint configured; set crawl.endpoint or --endpoint".into()).into());
            }
            let mut p = pipeline(cli, config)?;
            if let Some(out) = &a.out {
                p.set_dir(Stage::Crawl, out);
            }
            print_report(&p.crawl(std::env::var(TOKEN_ENV).ok())?);
        }
        Command::Filter(a) => {
            if let Some(t) = a.blur_thresh {
                config.quality.blur_threshold = t;
            }
            if let Some(t) = a.sv_thresh {
                config.quality.sv_threshold = t;
            }
            match &a.manifest {
                Some(m) => {
                    config.validate()?;
                    let (accepted, fetched) = gate_manifest(m, &config.quality)?;
                    println!("filter: {accepted} of {fetched} fetched images accepted");
                }
                None => print_report(&pipeline(cli, config)?.filter()?),
            }
        }
        Command::Regions(a) => {
            if let Some(e) = &a.edges {
                config.paths.edges = e.clone();
            }
            if let Some(t) = a.threshold {
                config.regions.threshold = t;
            }
            print_report(&pipeline(cli, config)?.regions()?);
        }
        Command::Heuristic(a) => {
            if let Some(s) = &a.sal {
                config.paths.saliency = s.clone();
            }
            if let Some(s) = &a.att {
                config.paths.attention = Some(s.clone());
            }
            let mut p = pipeline(cli, config)?;
            if let Some(r) = &a.regions {
                p.set_dir(Stage::Regions, r);
            }
            print_report(&p.heuristic()?);
        }
        Command::NfmTrain => print_report(&pipeline(cli, config)?.nfm_train()?),
        Command::NfmFilter(a) => {
            let enabled = config.nfm.enabled && !a.bypass;
            print_report(&pipeline(cli, config)?.run_round(1, enabled)?);
        }
        Command::Refine(a) => {
            if let Some(s) = &a.scores {
                config.paths.scores = s.clone();
            }
            if let Some(i) = a.crf_iters {
                config.crf.iterations = i;
            }
            if let Some(l) = a.crf_lambda {
                config.crf.lambda = l;
            }
            let nfm = a.nfm.unwrap_or(a.round == 1 && config.nfm.enabled);
            print_report(&pipeline(cli, config)?.run_round(a.round, nfm)?);
        }
        Command::Eval(a) => {
            let p = pipeline(cli, config)?;
            let (report, _) = p.eval(a.pred.as_deref(), a.gt.as_deref())?;
            print!("{}", if a.csv { report.to_csv() } else { report.to_table() });
        }
        Command::Render(a) => {
            let mut p = pipeline(cli, config)?;
            if let Some(o) = &a.out {
                p.set_dir(Stage::Render, o);
            }
            print_report(&p.render(a.input.as_deref())?);
        }
        Command::Synth(a) => {
            if let Some(c) = a.count {
                config.synth.count = c;
            }
            let text = config.to_toml();
            print_report(&pipeline(cli, config)?.synth()?);
            let work_config = cli.work_dir.join(WORK_CONFIG);
            if !work_config.exists() {
                std::fs::write(&work_config, text).with_context(|| format!("writing {}", work_config.display()))?;
            }
        }
        Command::Surrogate => print_report(&pipeline(cli, config)?.surrogate()?),
        Command::Run(a) => {
            let stages = a.stages.iter().map(|s| Stage::parse(s)).collect::<Result<Vec<_>, _>>()?;
            for r in pipeline(cli, config)?.run(&stages)? {
                print_report(&r);
            }
        }
        Command::Config(a) => {
            let config = match (&cli.config, a.synthetic) {
                (None, true) => {
                    let mut c = PipelineConfig::synthetic();
                    c.seed = cli.seed.unwrap_or(c.seed);
                    c
                }
                _ => config,
            };
            config.validate()?;
            print!("{}", config.to_toml());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return exit::FAILURE;
    };
    match e {
        Error::Config(_) => exit::CONFIG,
        Error::MissingInput(_) | Error::StaleInput { .. } => exit::MISSING_INPUT,
        Error::Auth { .. } => exit::AUTH,
        Error::Network(_) => exit::NETWORK,
        Error::Unreadable { .. } | Error::UnsupportedFormat { .. } | Error::Corrupt { .. } | Error::Io { .. } => exit::IO,
        Error::Contract(_) | Error::ManifestConflict { .. } => exit::CONTRACT,
        Error::DimensionMismatch(_)
        | Error::InvalidInput(_)
        | Error::EmptyMask
        | Error::NonFiniteLoss
        | Error::MissingPrediction(_) => exit::DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
