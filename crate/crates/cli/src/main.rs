use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use revbrowse_core::config::PipelineConfig;
use revbrowse_core::http::API_KEY_ENV;
use revbrowse_core::pipeline::{format_recommendation, EvaluateOptions, Pipeline, PipelineError};
use revbrowse_core::ranker::{Ablation, CandidateStrategy};

/// Review-driven recommendation pipeline.
///
/// Settings come from the TOML file given by --config (or REVBROWSE_CONFIG);
/// flags given on the command line override the file, and the file overrides
/// the defaults shown below. Without REVBROWSE_API_KEY every model call is
/// served by the offline mock components.
#[derive(Debug, Parser)]
#[command(name = "revbrowse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file.
    #[arg(long, global = true, env = "REVBROWSE_CONFIG")]
    config: Option<PathBuf>,

    /// Run even when upstream artifacts are stale.
    #[arg(long, global = true)]
    force: bool,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse raw reviews, apply k-core filtering and write the canonical corpus.
    Ingest,
    /// Extract pros and cons from every non-test review.
    Extract,
    /// Build windowed contrastive samples for the retriever.
    BuildTrainset,
    /// Train the projection adapter.
    Train,
    /// Embed every extracted phrase into the feature index.
    Index,
    /// Rank one user's candidate slate and show the retrieved evidence.
    Recommend {
        user_id: String,
        /// Also print the rendered prompt.
        #[arg(long)]
        show_prompt: bool,
    },
    /// Leave-one-out evaluation over all test users.
    Evaluate {
        /// Also run the other three prompt variants.
        #[arg(long)]
        all_ablations: bool,
        /// Also evaluate these retrieval depths, e.g. 1,2,3.
        #[arg(long, value_delimiter = ',')]
        sweep_top_k: Vec<usize>,
        /// Write prompt/label pairs to reports/training_pairs.jsonl.
        #[arg(long)]
        export_pairs: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    Auto,
    On,
    Off,
}

impl Switch {
    fn value(self) -> Option<bool> {
        match self {
            Switch::Auto => None,
            Switch::On => Some(true),
            Switch::Off => Some(false),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Popularity,
    Recency,
    File,
}

/// Configuration overrides; applied only when given on the command line.
#[derive(Debug, Args)]
struct Overrides {
    /// Raw review input file.
    #[arg(long, global = true, default_value = "data/reviews.jsonl")]
    input: PathBuf,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "artifacts")]
    workdir: PathBuf,
    /// Candidate slates for the file strategy.
    #[arg(long, global = true)]
    slates: Option<PathBuf>,
    /// Recorded log-probability responses used instead of a scoring server.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    /// Base URL of the OpenAI-compatible server.
    #[arg(long, global = true, default_value = "http://localhost:8000/v1")]
    base_url: String,
    /// Concurrent requests / worker threads.
    #[arg(long, global = true, default_value_t = 4)]
    concurrency: usize,
    /// Minimum interactions per user and item.
    #[arg(long, global = true, default_value_t = 5)]
    kcore: usize,
    /// Sliding window length.
    #[arg(long, global = true, default_value_t = 20)]
    window: usize,
    /// Negatives per contrastive sample.
    #[arg(long, global = true, default_value_t = 40)]
    negatives: usize,
    /// Window stride.
    #[arg(long, global = true, default_value_t = 1)]
    stride: usize,
    /// InfoNCE temperature.
    #[arg(long, global = true, default_value_t = 1.0)]
    tau: f64,
    /// Training epochs (at most 5).
    #[arg(long, global = true, default_value_t = 5)]
    epochs: u32,
    /// Mini-batch size.
    #[arg(long, global = true, default_value_t = 16)]
    batch_size: u32,
    /// Gradient step size.
    #[arg(long, global = true, default_value_t = 0.05)]
    step_size: f64,
    /// Seed for sampling and adapter initialization.
    #[arg(long, global = true, default_value_t = 42)]
    train_seed: u64,
    /// Retrieved pros and cons per candidate.
    #[arg(long, global = true, default_value_t = 2)]
    top_k: usize,
    /// Candidates per slate (2..=26).
    #[arg(long, global = true, default_value_t = 20)]
    slate_size: usize,
    /// Candidate generator.
    #[arg(long, global = true, value_enum, default_value_t = StrategyArg::Popularity)]
    strategy: StrategyArg,
    /// Insert the held-out item into slates that miss it.
    #[arg(long, global = true, default_value_t = true, action = clap::ArgAction::Set)]
    inject: bool,
    /// Seed for ground-truth placement.
    #[arg(long, global = true, default_value_t = 42)]
    rank_seed: u64,
    /// Prompt variant.
    #[arg(long, global = true, default_value = "FULL", value_parser = parse_ablation)]
    ablation: Ablation,
    /// Offline extraction (auto: when no API key is set).
    #[arg(long, global = true, value_enum, default_value_t = Switch::Auto)]
    mock_extraction: Switch,
    /// Offline embeddings (auto: when no API key is set).
    #[arg(long, global = true, value_enum, default_value_t = Switch::Auto)]
    mock_embedding: Switch,
    /// Offline scoring (auto: when no API key is set).
    #[arg(long, global = true, value_enum, default_value_t = Switch::Auto)]
    mock_scoring: Switch,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse()
}

fn given(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine | ValueSource::EnvVariable))
}

/// Apply overrides that were given on the command line.
fn apply(cfg: &mut PipelineConfig, o: &Overrides, top: &ArgMatches, sub: Option<&ArgMatches>) {
    let set = |id: &str| given(top, id) || sub.is_some_and(|s| given(s, id));
    macro_rules! over {
        ($id:literal, $dst:expr, $val:expr) => {
            if set($id) {
                $dst = $val;
            }
        };
    }
    over!("input", cfg.paths.input, o.input.clone());
    over!("workdir", cfg.paths.workdir, o.workdir.clone());
    over!("slates", cfg.paths.slates, o.slates.clone());
    over!("replay", cfg.paths.replay, o.replay.clone());
    over!("base_url", cfg.client.base_url, o.base_url.clone());
    over!("concurrency", cfg.client.concurrency, o.concurrency);
    over!("kcore", cfg.corpus.kcore, o.kcore);
    over!("window", cfg.prefrag.window, o.window);
    over!("negatives", cfg.prefrag.negatives, o.negatives);
    over!("stride", cfg.prefrag.stride, o.stride);
    over!("tau", cfg.prefrag.tau, o.tau);
    over!("epochs", cfg.prefrag.epochs, o.epochs);
    over!("batch_size", cfg.prefrag.batch_size, o.batch_size);
    over!("step_size", cfg.prefrag.step_size, o.step_size);
    over!("train_seed", cfg.prefrag.seed, o.train_seed);
    over!("top_k", cfg.ranker.top_k, o.top_k);
    over!("slate_size", cfg.ranker.slate_size, o.slate_size);
    over!(
        "strategy",
        cfg.ranker.strategy,
        match o.strategy {
            StrategyArg::Popularity => CandidateStrategy::Popularity,
            StrategyArg::Recency => CandidateStrategy::Recency,
            StrategyArg::File => CandidateStrategy::File,
        }
    );
    over!("inject", cfg.ranker.inject, o.inject);
    over!("rank_seed", cfg.ranker.seed, o.rank_seed);
    over!("ablation", cfg.mode.ablation, o.ablation);
    over!("mock_extraction", cfg.mode.mock_extraction, o.mock_extraction.value());
    over!("mock_embedding", cfg.mode.mock_embedding, o.mock_embedding.value());
    over!("mock_scoring", cfg.mode.mock_scoring, o.mock_scoring.value());
}

fn run(cli: &Cli, top: &ArgMatches) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let sub = top.subcommand().map(|(_, m)| m);
    apply(&mut cfg, &cli.overrides, top, sub);
    let key = std::env::var(API_KEY_ENV).is_ok_and(|k| !k.is_empty());
    cfg.resolve_modes(key);
    let pipeline = Pipeline::new(cfg, cli.force)?;

    match &cli.command {
        Command::Ingest => println!("{}", pipeline.ingest()?),
        Command::Extract => println!("{}", pipeline.extract()?),
        Command::BuildTrainset => println!("{}", pipeline.build_trainset()?),
        Command::Train => println!("{}", pipeline.train()?),
        Command::Index => println!("{}", pipeline.index()?),
        Command::Recommend { user_id, show_prompt } => {
            let ranking = pipeline.recommend(user_id)?;
            if *show_prompt {
                println!("{}", ranking.prompt);
            }
            print!("{}", format_recommendation(user_id, &ranking, None));
        }
        Command::Evaluate {
            all_ablations,
            sweep_top_k,
            export_pairs,
        } => {
            let opts = EvaluateOptions {
                all_ablations: *all_ablations,
                sweep_top_k: sweep_top_k.clone(),
                export_pairs: *export_pairs,
            };
            let out = pipeline.evaluate(&opts)?;
            print!("{}", out.table);
            if *export_pairs {
                println!("exported {} training pairs", out.pairs);
            }
            println!("reports in {}", pipeline.cfg.paths.reports().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
