//! `collide` command-line tool.
//!
//! Each subcommand maps onto one stage in [`collide_core::pipeline`]. Values
//! come from built-in defaults, then the optional `--config` file, then flags.
//!
//! Exit codes: 0 success, 2 usage error, 3 bad input data, 4 internal error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use collide_core::config::ToolkitConfig;
use collide_core::distill::MixConfig;
use collide_core::par::Exec;
use collide_core::pipeline::{self, ClusterOptions, FilterOptions, GenerateOptions, TrainOptions};
use collide_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "collide", version, about = "Generate, filter and learn from collision driving scenarios")]
pub struct Cli {
    /// TOML configuration file; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Run every stage on one thread
    #[arg(long, global = true)]
    pub sequential: bool,

    /// Log progress to stderr (repeat for more)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a scenario dataset from collision templates
    Generate(GenerateArgs),
    /// Keep lane-compliant colliding scenarios with at least one avoiding trajectory
    Filter(FilterArgs),
    /// Cluster ego trajectories into a vocabulary
    Cluster(ClusterArgs),
    /// Simulate every vocabulary entry on every scenario
    Score(ScoreArgs),
    /// Train a score head on regular and collision datasets
    Train(TrainArgs),
    /// Closed-loop evaluation of a trained score head
    Eval(EvalArgs),
    /// Compare a generated dataset against a reference one
    EvalRealism(EvalRealismArgs),
    /// Draw a scenario as SVG
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Template catalog JSON [default: built-in catalog]
    #[arg(long, value_name = "FILE")]
    pub templates: Option<PathBuf>,
    /// Bundled map name (straight_bidir, crossroads) or map JSON file
    #[arg(long)]
    pub map: Option<String>,
    /// Output dataset directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of scenarios
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Seed for template draws and jitter
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use only this template
    #[arg(long, value_name = "NAME")]
    pub template: Option<String>,
    /// Generate everyday traffic instead of collisions
    #[arg(long)]
    pub regular: bool,
    /// Fraction of scenarios assigned to the test split
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Input dataset directory
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Output directory for retained scenarios and the report
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Trajectory vocabulary JSON
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Dataset directory whose ego tracks are sampled
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Vocabulary size
    #[arg(long)]
    pub k: Option<usize>,
    /// Output vocabulary JSON
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Number of sampled trajectory windows
    #[arg(long)]
    pub samples: Option<usize>,
    /// Seed for sampling and k-means++ seeding
    #[arg(long)]
    pub seed: Option<u64>,
    /// Lloyd iteration cap
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Dataset directory
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Trajectory vocabulary JSON
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Output score table JSON
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Regular dataset directory
    #[arg(long, value_name = "DIR")]
    pub regular: PathBuf,
    /// Collision dataset directory
    #[arg(long, value_name = "DIR")]
    pub collision: PathBuf,
    /// Score tables covering both datasets
    #[arg(long, value_name = "FILE", num_args = 1.., required = true)]
    pub tables: Vec<PathBuf>,
    /// Regular:collision batch ratio, e.g. 10:1
    #[arg(long)]
    pub ratio: Option<String>,
    /// Output model checkpoint
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Optimizer steps
    #[arg(long)]
    pub steps: Option<usize>,
    /// Learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Scenarios per batch
    #[arg(long)]
    pub batch: Option<usize>,
    /// Seed for initialization and batch sampling
    #[arg(long)]
    pub seed: Option<u64>,
    /// Regular and collision loss weights
    #[arg(long, value_names = ["W_R", "W_C"], num_args = 2)]
    pub weights: Option<Vec<f64>>,
    /// Per-step training log CSV
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model checkpoint
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Dataset directory; its test split is used when present
    #[arg(long, value_name = "DIR")]
    pub testset: PathBuf,
    /// Trajectory vocabulary JSON
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalRealismArgs {
    /// Reference dataset directory
    #[arg(long, value_name = "DIR")]
    pub real: PathBuf,
    /// Generated dataset directory
    #[arg(long, value_name = "DIR")]
    pub generated: PathBuf,
    /// Report JSON; the CSV is written next to it
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Scenario JSON
    #[arg(long, value_name = "FILE")]
    pub scenario: PathBuf,
    /// Output SVG
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Overlay this model's plan (needs --vocab)
    #[arg(long, value_name = "FILE", requires = "vocab")]
    pub model: Option<PathBuf>,
    /// Trajectory vocabulary JSON
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_data_error() => EXIT_DATA,
            CliError::Core(_) => EXIT_INTERNAL,
        }
    }
}

fn need(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("--{name} is required (or set paths.{name} in the config)")))
}

/// Runs one invocation; returns what should be printed on stdout.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let cfg = match &cli.config {
        Some(p) => ToolkitConfig::load(p)?,
        None => ToolkitConfig::default(),
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let sim = cfg.simulator.clone();
    match cli.command {
        Command::Generate(a) => {
            let map = a
                .map
                .or(cfg.paths.map.clone())
                .ok_or_else(|| CliError::Usage("--map is required (or set paths.map in the config)".into()))?;
            let s = pipeline::generate(&GenerateOptions {
                templates: a.templates.or(cfg.paths.templates.clone()),
                map,
                out: a.out.clone(),
                count: a.count,
                seed: a.seed,
                template: a.template,
                regular: a.regular,
                synthesis: cfg.synthesis.clone(),
                test_fraction: a.test_fraction,
            })?;
            let mut out = format!("wrote {} scenarios to {}\n", s.written, a.out.display());
            for f in &s.failures {
                out.push_str(&format!("failed {} ({}): {}\n", f.id, f.template, f.reason));
            }
            Ok(out)
        }
        Command::Filter(a) => {
            let r = pipeline::filter(&FilterOptions {
                input: a.input,
                out: a.out.clone(),
                vocab: need(a.vocab, &cfg.paths.vocab, "vocab")?,
                filter: cfg.filtering.to_filter_config(),
                sim,
                exec,
            })?;
            Ok(format!(
                "total {}  after step 1 {}  after step 2 {}\nreport: {}\n",
                r.total,
                r.after_step1,
                r.after_step2,
                a.out.join(pipeline::FILTER_REPORT_FILE).display()
            ))
        }
        Command::Cluster(a) => {
            let v = pipeline::cluster(&ClusterOptions {
                input: a.input,
                out: a.out.clone(),
                k: a.k.unwrap_or(cfg.vocabulary.k),
                samples: a.samples.unwrap_or(cfg.vocabulary.samples),
                seed: a.seed.unwrap_or(cfg.vocabulary.seed),
                max_iters: a.max_iters.unwrap_or(cfg.vocabulary.max_iters),
                exec,
            })?;
            Ok(format!(
                "wrote {} entries ({} Lloyd iterations) to {}\n",
                v.k(),
                v.build_meta.iterations,
                a.out.display()
            ))
        }
        Command::Score(a) => {
            let vocab = need(a.vocab, &cfg.paths.vocab, "vocab")?;
            let t = pipeline::score(&a.input, &vocab, &a.out, &sim, exec)?;
            Ok(format!("scored {} scenarios × {} entries into {}\n", t.scores.len(), t.k, a.out.display()))
        }
        Command::Train(a) => {
            let mut t = cfg.training.clone();
            if let Some(r) = a.ratio {
                t.ratio = r;
            }
            if let Some(w) = a.weights {
                t.w_r = w[0];
                t.w_c = w[1];
            }
            t.steps = a.steps.unwrap_or(t.steps);
            t.lr = a.lr.unwrap_or(t.lr);
            t.batch = a.batch.unwrap_or(t.batch);
            t.seed = a.seed.unwrap_or(t.seed);
            let mix: MixConfig = t.to_mix()?;
            let o = pipeline::train_model(&TrainOptions {
                regular: a.regular,
                collision: a.collision,
                tables: a.tables,
                mix,
                train: t.to_train_config(),
                out: a.out.clone(),
                log: a.log,
            })?;
            let last = o.log.last().map_or(f64::NAN, |e| e.loss);
            Ok(format!("trained {} steps, final loss {last:.4}; model at {}\n", o.log.len(), a.out.display()))
        }
        Command::Eval(a) => {
            let model = need(a.model, &cfg.paths.model, "model")?;
            let vocab = need(a.vocab, &cfg.paths.vocab, "vocab")?;
            let s = pipeline::eval(&model, &a.testset, &vocab, &sim, exec)?;
            Ok(pipeline::format_summary(&s))
        }
        Command::EvalRealism(a) => {
            let r = pipeline::eval_realism(&a.real, &a.generated, &cfg.realism, a.out.as_deref(), exec)?;
            Ok(r.to_csv())
        }
        Command::Render(a) => {
            let vocab = a.vocab.or(cfg.paths.vocab.clone());
            let planner = match (&a.model, &vocab) {
                (Some(m), Some(v)) => Some((m.as_path(), v.as_path())),
                _ => None,
            };
            pipeline::render(&a.scenario, &a.out, planner, &sim)?;
            Ok(format!("wrote {}\n", a.out.display()))
        }
    }
}

/// Log level for a `-v` count.
pub fn log_level(verbose: u8) -> log::LevelFilter {
    match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    }
}
