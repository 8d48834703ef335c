use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "bias-tracer", version, about = "Trace, suppress and evaluate bias neurons in a masked-LM encoder")]
struct Cli {
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true, env = "BIAS_TRACER_THREADS")]
    threads: Option<usize>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check or summarize a relation dataset.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Generate synthetic inputs.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train a toy encoder on an answer-marked corpus.
    TrainToy(TrainToyArgs),
    /// Per-neuron attribution for every prompt.
    Trace(TraceArgs),
    /// Neuron sets per relation from an attribution file.
    Select(SelectArgs),
    /// Suppress each relation's neurons and measure perplexity ratios.
    Erase(EraseArgs),
    /// Scale each relation's neurons up and measure perplexity ratios.
    Amplify(AmplifyArgs),
    /// Wilcoxon, Cliff's delta and Spearman over an erasure file.
    Stats(StatsArgs),
    /// Downstream task metrics with and without suppression.
    EvalTasks(EvalTasksArgs),
    /// Render a markdown report from stage artifacts.
    Report(ReportArgs),
    /// Run every stage from a config file, reusing unchanged outputs.
    Pipeline(PipelineArgs),
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    /// Load the dataset and report problems.
    Validate(DatasetArgs),
    /// Per-category counts as CSV (or JSON lines) on stdout.
    Summary {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Args, Debug, Clone)]
struct DatasetArgs {
    #[arg(long)]
    relations: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    /// Accept relations without exactly ten prompts.
    #[arg(long)]
    lenient: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Subcommand, Debug)]
enum CorpusCmd {
    /// Synthetic relations, prompts and a training corpus.
    Synth {
        #[arg(long, default_value_t = 30)]
        relations: usize,
        #[arg(long, default_value_t = 10)]
        paraphrases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Synthetic downstream tasks over a checkpoint's vocabulary.
    Tasks {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Corpus, trained toy checkpoint, tasks and a run config in one go.
    Fixture {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainToyArgs {
    /// Answer-marked corpus, one line per example.
    #[arg(long)]
    corpus: PathBuf,
    /// TOML with optional `[model]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum MethodArg {
    Ig,
    Baseline,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum IgPathArg {
    PerLayer,
    Joint,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long, value_enum, default_value_t = MethodArg::Ig)]
    method: MethodArg,
    /// Integration steps.
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = IgPathArg::PerLayer)]
    ig_path: IgPathArg,
    /// Drop entries below this fraction of the prompt maximum; pass 0 to keep
    /// all non-negative scores. Must not exceed the later selection threshold.
    #[arg(long, default_value_t = 0.05)]
    write_fraction: f64,
    /// Write every entry, including negative scores (needed for top-k).
    #[arg(long)]
    dense: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ModeArg {
    Threshold,
    Topk,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    attr: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Threshold)]
    mode: ModeArg,
    /// Relative threshold for `threshold` mode.
    #[arg(long, default_value_t = 0.2)]
    t: f64,
    /// Neurons per prompt for `topk` mode.
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Share of a relation's prompts a neuron must appear in.
    #[arg(long, default_value_t = 0.7)]
    share: f64,
    /// Lower the share step by step when nothing survives (default on).
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    adaptive: Option<bool>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum PoolingArg {
    Matched,
    Pooled,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ScopeArg {
    Mask,
    All,
}

#[derive(Args, Debug)]
struct InterventionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    sets: PathBuf,
    #[command(flatten)]
    data: DatasetArgs,
    /// Control prompts per relation.
    #[arg(long, default_value_t = 10)]
    ctrl_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PoolingArg::Matched)]
    pooling: PoolingArg,
    /// Positions the intervention touches.
    #[arg(long, value_enum, default_value_t = ScopeArg::Mask)]
    scope: ScopeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EraseArgs {
    #[command(flatten)]
    common: InterventionArgs,
    /// Scale by this factor instead of zeroing.
    #[arg(long, value_name = "F")]
    amplify: Option<f64>,
}

#[derive(Args, Debug)]
struct AmplifyArgs {
    #[command(flatten)]
    common: InterventionArgs,
    #[arg(long, default_value_t = 2.0)]
    factor: f64,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    erasure: PathBuf,
    /// Neuron sets, for the inner-intersection correlation.
    #[arg(long)]
    sets: Option<PathBuf>,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum VariantArg {
    Raw,
    FineTuned,
}

#[derive(Args, Debug)]
struct EvalTasksArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of task JSON files.
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    sets: PathBuf,
    /// Needed to map relations to categories.
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// One condition per relation instead of per category union.
    #[arg(long)]
    per_relation: bool,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "raw,fine-tuned")]
    variants: Vec<VariantArg>,
    #[arg(long, default_value_t = 400)]
    finetune_steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    finetune_lr: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// `rq1.json` from `pipeline`.
    #[arg(long)]
    rq1: Option<PathBuf>,
    /// Erasure results (JSON lines).
    #[arg(long)]
    rq2: Option<PathBuf>,
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Downstream records (JSON lines).
    #[arg(long)]
    rq3: Option<PathBuf>,
    /// Reference constants; the shipped ones when omitted.
    #[arg(long)]
    paper_ref: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set t=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Recompute every stage.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already carry their sources in the message.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
