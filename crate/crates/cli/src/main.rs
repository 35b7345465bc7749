//! `fichad` command-line tool.
//!
//! Exit codes: 0 success, 1 input error, 2 backend error, 64 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fichad::context::Variant;
use fichad::embed::{Family, Loss, Norm};
use fichad::kg::Split;
use fichad::pipeline::{BackendKind, Pipeline, PipelineError, RunConfig, Scope, StepOutput};
use serde_json::{json, Value};

const EXIT_INPUT: u8 = 1;
const EXIT_BACKEND: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "fichad", version, about = "Multimodal context generation for knowledge graph completion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Args, Debug, Default)]
struct Common {
    /// JSON run config; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset config (JSON).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Chat-completions base URL, e.g. http://localhost:8000/v1
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Model name sent to the wire backend.
    #[arg(long = "vlm-model", global = true)]
    vlm_model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, global = true)]
    api_key_env: Option<String>,
    /// Directory that relative image paths resolve against.
    #[arg(long, global = true)]
    image_root: Option<PathBuf>,
    /// Relevance threshold.
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    image_cap: Option<usize>,
    /// Neighbors per entity.
    #[arg(short = 'k', long = "neighbors", global = true)]
    k: Option<usize>,
    /// fichad-1, fichad-2, fichad-1+x or fichad-1+y
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Emit both link-aware and summary neighbor blocks.
    #[arg(long, global = true)]
    both: bool,
    /// Fail instead of falling back when a +x/+y supplement is missing.
    #[arg(long, global = true)]
    no_degrade: bool,
    #[arg(long, global = true)]
    token_limit: Option<usize>,
    #[arg(long, global = true)]
    hint_triples: Option<usize>,
    #[arg(long, global = true, value_enum)]
    scope: Option<ScopeArg>,
    /// Directory of prompt template overrides (<name>.txt).
    #[arg(long, global = true)]
    prompts_dir: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    split: Option<SplitArg>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a dataset and report its statistics.
    Ingest,
    /// Train a structural embedding model.
    TrainEmbed(TrainArgs),
    /// Filtered link-prediction evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score and filter the images of every in-scope triple.
    FilterImages,
    /// Generate link-aware contexts and entity summaries.
    GenContext,
    /// Generate conceptual hints for the split's queries.
    Hints,
    /// Generate one [A]/[B] template per relation.
    Templates,
    /// Assemble the KGC inputs for the split's queries.
    BuildPrompts {
        /// Also print the first N prompts.
        #[arg(long, default_value_t = 0)]
        preview: usize,
    },
    /// Entity context counts.
    Stats {
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Entity-name coverage of the generated contexts.
    Coverage {
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Auto,
    Mock,
    Openai,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeArg {
    All,
    Neighbors,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    Transe,
    Distmult,
    Complex,
    Rotate,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    MarginRanking,
    Logistic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    L1,
    L2,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::TrainEmbed(_) => "train-embed",
            Command::Eval { .. } => "eval",
            Command::FilterImages => "filter-images",
            Command::GenContext => "gen-context",
            Command::Hints => "hints",
            Command::Templates => "templates",
            Command::BuildPrompts { .. } => "build-prompts",
            Command::Stats { .. } => "stats",
            Command::Coverage { .. } => "coverage",
        }
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($src:expr => $dst:expr),* $(,)?) => {
            $(if let Some(v) = $src.clone() { $dst = v.into(); })*
        };
    }
    set! {
        c.out => cfg.out,
        c.seed => cfg.seed,
        c.endpoint => cfg.openai.endpoint,
        c.vlm_model => cfg.openai.model,
        c.api_key_env => cfg.openai.api_key_env,
        c.tau => cfg.tau,
        c.k => cfg.k,
        c.variant => cfg.variant,
        c.token_limit => cfg.token_limit,
        c.hint_triples => cfg.hint_triples,
        c.jobs => cfg.jobs,
    }
    if c.dataset.is_some() {
        cfg.dataset = c.dataset.clone();
    }
    if c.image_root.is_some() {
        cfg.openai.image_root = c.image_root.clone();
    }
    if c.image_cap.is_some() {
        cfg.image_cap = c.image_cap;
    }
    if c.prompts_dir.is_some() {
        cfg.prompts_dir = c.prompts_dir.clone();
    }
    if let Some(b) = c.backend {
        cfg.backend = match b {
            BackendArg::Auto => BackendKind::Auto,
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Openai => BackendKind::Openai,
        };
    }
    if let Some(s) = c.scope {
        cfg.scope = match s {
            ScopeArg::All => Scope::All,
            ScopeArg::Neighbors => Scope::Neighbors,
        };
    }
    if let Some(s) = c.split {
        cfg.split = match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        };
    }
    if c.both {
        cfg.both = true;
    }
    if c.no_degrade {
        cfg.degrade = false;
    }
    match &cli.command {
        Command::Eval { model: Some(m) } => cfg.model = Some(m.clone()),
        Command::Stats { store: Some(s) } | Command::Coverage { store: Some(s) } => cfg.store = Some(s.clone()),
        Command::TrainEmbed(t) => {
            let o = &mut cfg.train;
            if let Some(f) = t.family {
                o.family = match f {
                    FamilyArg::Transe => Family::TransE,
                    FamilyArg::Distmult => Family::DistMult,
                    FamilyArg::Complex => Family::ComplEx,
                    FamilyArg::Rotate => Family::RotatE,
                };
            }
            o.dim = t.dim.or(o.dim);
            o.epochs = t.epochs.or(o.epochs);
            o.learning_rate = t.learning_rate.or(o.learning_rate);
            o.batch_size = t.batch_size.or(o.batch_size);
            o.negatives = t.negatives.or(o.negatives);
            o.margin = t.margin.or(o.margin);
            o.l2 = t.l2.or(o.l2);
            if let Some(l) = t.loss {
                o.loss = Some(match l {
                    LossArg::MarginRanking => Loss::MarginRanking,
                    LossArg::Logistic => Loss::Logistic,
                });
            }
            if let Some(n) = t.norm {
                o.norm = Some(match n {
                    NormArg::L1 => Norm::L1,
                    NormArg::L2 => Norm::L2,
                });
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn run_step(p: &Pipeline, cmd: &Command) -> Result<StepOutput, PipelineError> {
    match cmd {
        Command::Ingest => p.ingest(),
        Command::TrainEmbed(_) => p.train_embed(),
        Command::Eval { .. } => p.eval(),
        Command::FilterImages => p.filter_images(),
        Command::GenContext => p.gen_context(),
        Command::Hints => p.hints(),
        Command::Templates => p.templates_step(),
        Command::BuildPrompts { preview } => p.build_prompts(*preview),
        Command::Stats { .. } => p.stats(),
        Command::Coverage { .. } => p.coverage(),
    }
}

fn summary_line(command: &str, hash: &str, mut body: Value) -> String {
    let mut line = json!({ "command": command, "config_hash": hash });
    if let Value::Object(fields) = body.take() {
        line.as_object_mut().unwrap().extend(fields);
    }
    line.to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = cli.command.name();
    let result = effective_config(&cli).and_then(|cfg| {
        let hash = cfg.hash();
        let p = Pipeline::new(cfg)?;
        run_step(&p, &cli.command).map(|out| (hash, out))
    });
    match result {
        Ok((hash, out)) => {
            if let Some(text) = &out.text {
                if matches!(cli.command, Command::Eval { .. }) {
                    eprint!("{text}");
                } else {
                    println!("{}", text.trim_end());
                }
            }
            println!("{}", summary_line(name, &hash, out.summary));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_backend() { EXIT_BACKEND } else { EXIT_INPUT })
        }
    }
}
