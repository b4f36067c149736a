use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

mod commands;
mod config;
mod error;

use error::{CliError, EXIT_USAGE};

/// Learn explanatory graphs from CNN feature maps and localize parts with them.
///
/// Every subcommand accepts `--config FILE` (TOML, or a manifest written by an earlier run);
/// flags override values from the file.
#[derive(Debug, Parser)]
#[command(name = "expgraph", version)]
struct Cli {
    /// Worker threads (default: available cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Settings file; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic feature maps with planted parts.
    Synth(SynthFlags),
    /// Learn an explanatory graph from feature maps.
    Learn(LearnFlags),
    /// Infer node positions on images.
    Infer(InferFlags),
    /// Location instability of learned patterns and of raw filter peaks.
    Instability(InstabilityFlags),
    /// Render a layer's inferred patterns as a PGM heatmap.
    Heatmap(HeatmapFlags),
    /// List the image patches that best represent nodes.
    Patches(PatchesFlags),
    /// Build And-Or graphs from part annotations.
    AogBuild(AogBuildFlags),
    /// Localize annotated parts on new images.
    AogLocalize(AogLocalizeFlags),
    /// Score part localizations against landmarks.
    AogEval(AogEvalFlags),
}

#[derive(Debug, Args, Serialize)]
struct SynthFlags {
    /// Generator spec (TOML).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory for `.fmap` files, truth and landmarks.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
struct LearnFlags {
    /// `.fmap` files or directories containing them.
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    fmaps: Vec<PathBuf>,
    /// Output `.egraph` path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat compatibility of the noise component.
    #[arg(long)]
    tau: Option<f64>,
    /// Maximum parents per node.
    #[arg(long)]
    max_parents: Option<usize>,
    /// EM iterations per layer.
    #[arg(long)]
    iterations: Option<usize>,
    /// Activation scale.
    #[arg(long)]
    beta: Option<f64>,
    /// Nodes per filter, lowest layer first; a single value applies to every layer.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    nodes_per_filter: Vec<usize>,
    #[arg(long)]
    sigma2_init: Option<f64>,
    #[arg(long)]
    sigma2_floor: Option<f64>,
    /// Step size of the gradient update mode.
    #[arg(long)]
    eta: Option<f64>,
    /// Upper nodes considered during parent selection.
    #[arg(long)]
    candidate_pool: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `closed_form` or `gradient`.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Debug, Args, Serialize)]
struct InferFlags {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    fmaps: Vec<PathBuf>,
    /// Output directory; one result file per image.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct InstabilityFlags {
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Inference result files or directories.
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    results: Vec<PathBuf>,
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// Images per pattern, taken by descending score.
    #[arg(long)]
    top_n: Option<usize>,
    /// Restrict to the patterns with the largest total score.
    #[arg(long)]
    patterns: Option<usize>,
    /// Feature maps for the raw-filter-peak baseline.
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    baseline_fmaps: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct HeatmapFlags {
    #[arg(long)]
    graph: Option<PathBuf>,
    /// One inference result file.
    #[arg(long)]
    result: Option<PathBuf>,
    /// Graph layer, 0 = lowest.
    #[arg(long)]
    layer: Option<usize>,
    /// Share of assigned patterns drawn, by descending score.
    #[arg(long)]
    fraction: Option<f64>,
    /// Raster width (default: image width in pixels).
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Output `.pgm` path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct PatchesFlags {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    results: Vec<PathBuf>,
    /// Node ids as `layer:filter:slot` (default: every live node).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    nodes: Vec<String>,
    /// Share of a node's inference energy covered by its patches.
    #[arg(long)]
    fraction: Option<f64>,
    /// Patch side in pixels.
    #[arg(long)]
    patch: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct AogBuildFlags {
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    results: Vec<PathBuf>,
    /// Annotation file (JSON list of {image_id, part, template, x, y}).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Latent patterns kept per template.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct AogLocalizeFlags {
    #[arg(long)]
    aog: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    results: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct AogEvalFlags {
    /// Localization file written by `aog-localize`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    landmarks: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    let file = cli.config.as_deref();
    match &cli.command {
        Command::Synth(f) => commands::synth(config::resolve(file, "synth", f)?),
        Command::Learn(f) => commands::learn(config::resolve(file, "learn", f)?),
        Command::Infer(f) => commands::infer(config::resolve(file, "infer", f)?),
        Command::Instability(f) => commands::instability(config::resolve(file, "instability", f)?),
        Command::Heatmap(f) => commands::heatmap(config::resolve(file, "heatmap", f)?),
        Command::Patches(f) => commands::patches(config::resolve(file, "patches", f)?),
        Command::AogBuild(f) => commands::aog_build(config::resolve(file, "aog-build", f)?),
        Command::AogLocalize(f) => commands::aog_localize(config::resolve(file, "aog-localize", f)?),
        Command::AogEval(f) => commands::aog_eval(config::resolve(file, "aog-eval", f)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                // --help / --version
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let err = CliError::Usage(e.kind().to_string());
            eprintln!("{}", err.to_line());
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
