use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use star_core::metrics::compare_runs;
use star_core::pipeline::{run, FlowSource, InputSource, PipelineConfig};
use star_core::warpfield::GraphMode;

#[derive(Parser)]
#[command(
    name = "star",
    version,
    about = "Semantic surfel tracking and reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct a sequence and write per-frame metrics.
    Run(RunArgs),
    /// Compare two metrics.jsonl files frame by frame.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Where to write the JSON report; defaults to printing only.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Sequence directory or `preset:<name>`.
    #[arg(long)]
    input: InputSource,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    dump_ply: bool,
    #[arg(long)]
    dump_graph: bool,
    #[arg(long)]
    dump_render: bool,
    /// `sad` or `ed-uniform`.
    #[arg(long, value_parser = parse_graph_mode)]
    graph_mode: Option<GraphMode>,
    /// Sets the 2D flow term weight to zero.
    #[arg(long)]
    no_2d_loss: bool,
    /// `gt` or `files`.
    #[arg(long)]
    flow: Option<FlowSource>,
    #[arg(long)]
    frames: Option<usize>,
    /// Worker threads; 1 runs single-threaded.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_graph_mode(s: &str) -> Result<GraphMode, String> {
    GraphMode::from_name(s)
        .ok_or_else(|| format!("unknown graph mode '{s}' (expected sad or ed-uniform)"))
}

fn config(args: &RunArgs) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.dump_ply |= args.dump_ply;
    cfg.dump_graph |= args.dump_graph;
    cfg.dump_render |= args.dump_render;
    if let Some(m) = args.graph_mode {
        cfg.graph_mode = m;
    }
    if args.no_2d_loss {
        cfg.w_2d = 0.0;
    }
    if args.flow.is_some() {
        cfg.flow_source = args.flow;
    }
    if args.frames.is_some() {
        cfg.frames = args.frames;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_command(args: RunArgs) -> Result<()> {
    let cfg = config(&args)?;
    if let Some(n) = args.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    fs::create_dir_all(&args.output)
        .with_context(|| format!("cannot create {}", args.output.display()))?;
    let text = toml::to_string(&cfg).context("cannot serialize the configuration")?;
    fs::write(args.output.join("config.toml"), text)?;
    let metrics = run(&cfg, &args.input, Some(&args.output), |_, out| {
        let m = &out.metrics;
        let err = m
            .error
            .as_ref()
            .map_or_else(String::new, |e| format!(" error {:.2} mm", e.mean_mm));
        println!(
            "frame {:>4}: {} surfels, {} nodes, {} correspondences{}",
            m.frame, m.surfels, m.nodes, m.correspondences, err
        );
    })?;
    println!(
        "{} frames, metrics in {}",
        metrics.len(),
        args.output.join("metrics.jsonl").display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STAR_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run_command(args),
        Command::Compare { a, b, output } => {
            compare_runs(&a, &b).map_err(Into::into).and_then(|c| {
                println!("{c}");
                if let Some(path) = output {
                    fs::write(&path, serde_json::to_string_pretty(&c)?)
                        .with_context(|| format!("cannot write {}", path.display()))?;
                }
                Ok(())
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
