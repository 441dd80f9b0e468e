use std::path::PathBuf;
use std::process::ExitCode;

use cfaudit_cli::{run_all, run_stage, CliError, Ctx, Effective, Overrides, Stage};
use cfaudit_core::stats::MetricKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "cfaudit",
    version,
    about = "Counterfactual gender-bias audit of LLM essay feedback"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest the corpus and select single-gender essays.
    Screen(Common),
    /// Build gender-swapped counterfactuals for every screened essay.
    Counterfact(Common),
    /// Render every prompt of the experiment grid.
    Plan(Common),
    /// Collect feedback for every planned prompt.
    Generate(Common),
    /// Embed all feedback texts.
    Embed(Common),
    /// Run the permutation tests.
    Stats(Common),
    /// Project each condition family with t-SNE.
    Tsne(Common),
    /// Compute the linguistic measures of the feedback.
    Textstats(Common),
    /// Write the results tables and plot data.
    Report(Common),
    /// Run every stage in order.
    RunAll(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Path to the TOML configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Use the offline mock LLM and embedder.
    #[arg(long)]
    mock: bool,
    /// Comma-separated model ids to run.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Distance metric(s) for the permutation test.
    #[arg(long, value_delimiter = ',', value_parser = parse_metric)]
    metric: Option<Vec<MetricKind>>,
    /// Number of permutations.
    #[arg(long)]
    permutations: Option<usize>,
    /// Directory that holds runs and caches.
    #[arg(long)]
    run_root: Option<PathBuf>,
}

fn parse_metric(s: &str) -> Result<MetricKind, String> {
    MetricKind::parse(s)
        .ok_or_else(|| format!("unknown metric `{s}` (cosine, euclidean, mahalanobis)"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, common) = match cli.command {
        Command::Screen(c) => (Some(Stage::Screen), c),
        Command::Counterfact(c) => (Some(Stage::Counterfact), c),
        Command::Plan(c) => (Some(Stage::Plan), c),
        Command::Generate(c) => (Some(Stage::Generate), c),
        Command::Embed(c) => (Some(Stage::Embed), c),
        Command::Stats(c) => (Some(Stage::Stats), c),
        Command::Tsne(c) => (Some(Stage::Tsne), c),
        Command::Textstats(c) => (Some(Stage::Textstats), c),
        Command::Report(c) => (Some(Stage::Report), c),
        Command::RunAll(c) => (None, c),
    };
    match execute(stage, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(stage: Option<Stage>, c: Common) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: c.seed,
        mock: c.mock,
        models: c.models,
        metrics: c.metric,
        permutations: c.permutations,
        run_root: c.run_root,
    };
    let eff = Effective::load(&c.config, &overrides)?;
    let mut ctx = Ctx::new(&eff);
    log::info!("run directory {}", ctx.run_dir.display());
    match stage {
        Some(s) => run_stage(&mut ctx, s).map(|_| ()),
        None => run_all(&mut ctx),
    }
}
