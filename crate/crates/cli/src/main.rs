use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ndvr::eval::{load_ground_truth, parse_label_map, synth_dataset, SynthParams};
use ndvr::fsuml::{QuadraticForm, SigmaChoice};
use ndvr::pipeline::{self, KeyframesFile, OutputLevel, PipelineConfig, QuerySpec, ResultsFile, Workspace};

#[derive(Parser)]
#[command(name = "ndvr", version, about = "Near-duplicate video retrieval")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, default_value = "workspace")]
    workspace: PathBuf,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Keyframes per second.
    #[arg(long, global = true)]
    rate: Option<f64>,

    #[arg(long, global = true)]
    kpca_dim: Option<usize>,

    /// `median` or a positive bandwidth.
    #[arg(long, global = true, value_parser = parse_sigma)]
    kpca_sigma: Option<SigmaChoice>,

    #[arg(long, global = true)]
    sso_k: Option<f64>,

    /// `median` or a positive bandwidth.
    #[arg(long, global = true, value_parser = parse_sigma)]
    sso_sigma: Option<SigmaChoice>,

    /// `absolute` or `signed`.
    #[arg(long, global = true)]
    sso_form: Option<QuadraticForm>,

    /// Neighbourhood size for re-ranking.
    #[arg(long = "k", global = true)]
    knn_k: Option<usize>,

    #[arg(long, global = true)]
    num_trees: Option<usize>,

    #[arg(long, global = true)]
    budget: Option<usize>,

    /// Comma-separated subset of fc,conv,fused.
    #[arg(long, global = true, value_delimiter = ',')]
    levels: Option<Vec<OutputLevel>>,

    /// Ground-truth codes, e.g. `E=1,S=1,X=0`.
    #[arg(long, global = true)]
    label_map: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Copy and validate NDVF feature files into the workspace.
    Ingest {
        /// An .ndvf file or a directory of them.
        input: PathBuf,
    },
    /// Select keyframes and print them as JSON.
    Keyframes,
    /// Fit kernel PCA per level and write reduced signatures.
    Reduce,
    /// Build the kd-forests and the gallery neighbour lists.
    Index,
    /// Rank the gallery for the given videos (all gallery videos if none).
    Query {
        /// Gallery id or path to an .ndvf file; repeatable.
        #[arg(long = "video")]
        videos: Vec<String>,
    },
    /// Score rankings against a ground-truth file.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        /// Results file to score instead of the workspace's query output.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Where PR curves go when scoring an external results file.
        #[arg(long)]
        pr_out: Option<PathBuf>,
    },
    /// Write a seeded synthetic dataset with ground truth.
    Synth {
        #[arg(long, default_value_t = 20)]
        clusters: usize,
        #[arg(long, default_value_t = 5)]
        videos: usize,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        dims: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage; evaluates when a ground truth is given.
    Pipeline {
        input: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn parse_sigma(s: &str) -> Result<SigmaChoice, String> {
    if s == "median" {
        return Ok(SigmaChoice::Median);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(SigmaChoice::Fixed(v)),
        _ => Err(format!("expected `median` or a positive number, got `{s}`")),
    }
}

fn effective_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let o = &cli.overrides;
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.rate {
        cfg.rate = v;
    }
    if let Some(v) = o.kpca_dim {
        cfg.kpca_dim = v;
    }
    if let Some(v) = o.kpca_sigma {
        cfg.kpca_sigma = v;
    }
    if let Some(v) = o.sso_k {
        cfg.sso_k = v;
    }
    if let Some(v) = o.sso_sigma {
        cfg.sso_sigma = v;
    }
    if let Some(v) = o.sso_form {
        cfg.sso_form = v;
    }
    if let Some(v) = o.knn_k {
        cfg.knn_k = v;
    }
    if let Some(v) = o.num_trees {
        cfg.num_trees = v;
    }
    if let Some(v) = o.budget {
        cfg.budget = Some(v);
    }
    if let Some(v) = &o.levels {
        cfg.levels = v.clone();
    }
    if let Some(v) = &o.label_map {
        cfg.label_map = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_out(text: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    print_out(&format!("{}\n", serde_json::to_string_pretty(value)?))
}

fn score_external(cfg: &PipelineConfig, results: &Path, truth: &Path, pr_out: Option<&Path>) -> anyhow::Result<()> {
    let results: ResultsFile =
        pipeline::read_json(results).with_context(|| format!("reading {}", results.display()))?;
    let truths = load_ground_truth(truth, &parse_label_map(&cfg.label_map)?)?;
    let levels: Vec<OutputLevel> = OutputLevel::ALL.into_iter().filter(|l| cfg.wants(*l)).collect();
    let pr_dirs: Option<Vec<PathBuf>> = pr_out.map(|d| levels.iter().map(|l| d.join(l.as_str())).collect());
    let (scores, _) = pipeline::score_results(&results, &truths, &levels, pr_dirs.as_deref())?;
    print_json(&scores)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = effective_config(cli)?;
    let ws = Workspace::new(&cli.workspace);
    match &cli.command {
        Command::Ingest { input } => print_json(&pipeline::ingest(&ws, &cfg, input)?),
        Command::Keyframes => {
            pipeline::keyframes(&ws, &cfg)?;
            let file: KeyframesFile = pipeline::read_json(&ws.keyframes_file())?;
            print_json(&file.videos)
        }
        Command::Reduce => print_json(&pipeline::reduce(&ws, &cfg)?),
        Command::Index => print_json(&pipeline::index(&ws, &cfg)?),
        Command::Query { videos } => {
            let specs: Vec<QuerySpec> = videos.iter().map(|v| QuerySpec::parse(v)).collect();
            let (results, _) = pipeline::query(&ws, &cfg, &specs)?;
            print_json(&results.queries)
        }
        Command::Evaluate { truth, results, pr_out } => match results {
            Some(path) if *path != ws.results_file() => score_external(&cfg, path, truth, pr_out.as_deref()),
            _ => {
                if pr_out.is_some() {
                    bail!("--pr-out applies only with --results; workspace curves go to {}", ws.root().join("results/pr").display());
                }
                print_json(&pipeline::evaluate(&ws, &cfg, truth)?.0.levels)
            }
        },
        Command::Synth { clusters, videos, frames, dims, noise, out } => {
            let params = SynthParams {
                num_clusters: *clusters,
                videos_per_cluster: *videos,
                frames_per_video: *frames,
                dims: *dims,
                noise: *noise,
                seed: cfg.seed,
            };
            let data = synth_dataset(&params)?;
            let truth = pipeline::write_synth(out, &data)?;
            print_json(&serde_json::json!({
                "videos": data.videos.len(),
                "queries": data.truths.len(),
                "truth": truth,
            }))
        }
        Command::Pipeline { input, truth } => {
            let (results, evaluation) = pipeline::run_all(&ws, &cfg, input, truth.as_deref())?;
            match evaluation {
                Some(e) => print_json(&e.levels.iter().map(|(l, e)| (*l, e.map)).collect::<std::collections::BTreeMap<_, _>>()),
                None => print_json(&serde_json::json!({
                    "queries": results.queries.len(),
                    "results": ws.results_file(),
                })),
            }
        }
        Command::Config => print_out(&cfg.to_toml()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
