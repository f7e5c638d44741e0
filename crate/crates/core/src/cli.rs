//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_checkpoint, load_checkpoint_with_meta, save_checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::experiments::{run_experiment, train_member, DatasetDesc, ExperimentSpec};
use crate::fusion::{fuse, EnsembleBundle, FusionMethod, FusionPlan};
use crate::pruning::{magnitude_prune, KeepPolicy};
use crate::report::{self, ReportFormat};
use crate::training::{distill, evaluate, KdConfig, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "ntfuse", about = "Fuse trained networks by concatenating and pruning their neurons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one ensemble member described by an experiment spec.
    Train {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run seed; defaults to the spec's first seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Member index within the seed's ensemble.
        #[arg(long, default_value_t = 0)]
        member: usize,
    },
    /// Fuse two or more checkpoints of the same architecture.
    Fuse {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Fraction of concatenated neurons to drop; default keeps one member's width.
        #[arg(long)]
        sparsity: Option<f32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Magnitude-prune hidden units.
    Prune {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        policy: PruneArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print test accuracy and loss as JSON.
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        /// Dataset description: a JSON file or inline JSON.
        #[arg(long)]
        data: String,
    },
    /// Fine-tune a student against the averaged logits of teachers.
    Distill {
        #[arg(long)]
        student: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        teachers: Vec<PathBuf>,
        #[arg(long, default_value_t = 2.0)]
        temperature: f32,
        #[arg(long = "soft-weight", default_value_t = 1.0)]
        soft_weight: f32,
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f32,
        #[arg(long, default_value_t = 0.9)]
        momentum: f32,
        #[arg(long = "batch-size", default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment spec and write report.{csv,json,svg} into a directory.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write wall-clock and memory measurements to this file.
        #[arg(long)]
        timings: Option<PathBuf>,
    },
    /// Re-render a report directory in one format and print it.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: FormatArg,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct PruneArgs {
    /// Comma-separated kept units per hidden layer.
    #[arg(long = "keep-counts", value_delimiter = ',')]
    keep_counts: Option<Vec<usize>>,
    #[arg(long)]
    sparsity: Option<f32>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Nt,
    NtIter,
    NtRec,
    Avg,
    Align,
}

impl From<MethodArg> for FusionMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Nt => FusionMethod::Nt,
            MethodArg::NtIter => FusionMethod::NtIterative,
            MethodArg::NtRec => FusionMethod::NtRecursive,
            MethodArg::Avg => FusionMethod::VanillaAvg,
            MethodArg::Align => FusionMethod::AlignAvg,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Svg,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Svg => ReportFormat::Svg,
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}\n\nUsage: ntfuse <train|fuse|prune|eval|distill|experiment|report> [OPTIONS]");
            1
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            2
        }
    }
}

fn parse_data(arg: &str) -> Result<DatasetDesc> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).map_err(|e| Error::io(Path::new(arg), e))?
    };
    Ok(serde_json::from_str(&text)?)
}

fn print(stdout: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(stdout, "{text}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn dispatch(cmd: Command, stdout: &mut dyn Write) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Train { spec, out, seed, member } => {
            let spec = ExperimentSpec::load(&spec)?;
            let seed = seed.unwrap_or(spec.seeds[0]);
            let (train, test) = spec.dataset.load()?;
            let specs = spec.arch.specs(train.sample_shape(), train.num_classes())?;
            let net = train_member(&specs, train.sample_shape(), &train, &test, &spec.train, seed, member)?;
            let eval = evaluate(&net, &test)?;
            let meta = CheckpointMeta {
                seed: Some(seed),
                epoch: Some(spec.train.epochs),
                metrics: [("test_accuracy".to_string(), eval.accuracy), ("test_loss".to_string(), eval.mean_loss)].into(),
            };
            save_checkpoint(&net, &out, &meta)?;
            print(stdout, &serde_json::to_string(&eval).map_err(Error::from)?)?;
        }
        Command::Fuse { method, inputs, sparsity, out } => {
            if inputs.len() < 2 {
                return Err(Failure::Usage(format!("fuse needs at least 2 checkpoints, got {}", inputs.len())));
            }
            let mut members = Vec::with_capacity(inputs.len());
            let mut seeds = Vec::with_capacity(inputs.len());
            for (i, p) in inputs.iter().enumerate() {
                let (net, meta) = load_checkpoint_with_meta(p)?;
                members.push(net);
                seeds.push(meta.seed.unwrap_or(i as u64));
            }
            let bundle = EnsembleBundle::new(members, seeds)?;
            let plan = FusionPlan { sparsity, ..FusionPlan::new(method.into(), TrainConfig::new(0, 0.01, 0.0, 1, 0)) };
            save_checkpoint(&fuse(&bundle, &plan)?, &out, &CheckpointMeta::default())?;
        }
        Command::Prune { input, policy, out } => {
            let policy = match (policy.keep_counts, policy.sparsity) {
                (Some(counts), _) => KeepPolicy::KeepCounts(counts),
                (None, Some(s)) => KeepPolicy::Sparsity(s),
                (None, None) => return Err(Failure::Usage("give --keep-counts or --sparsity".into())),
            };
            let (net, meta) = load_checkpoint_with_meta(&input)?;
            save_checkpoint(&magnitude_prune(&net, &policy)?, &out, &CheckpointMeta { epoch: None, ..meta })?;
        }
        Command::Eval { input, data } => {
            let net = load_checkpoint(&input)?;
            let (_, test) = parse_data(&data)?.load()?;
            print(stdout, &serde_json::to_string(&evaluate(&net, &test)?).map_err(Error::from)?)?;
        }
        Command::Distill {
            student,
            teachers,
            temperature,
            soft_weight,
            data,
            epochs,
            lr,
            momentum,
            batch_size,
            seed,
            out,
        } => {
            let kd = KdConfig::new(temperature, soft_weight)?;
            let student = load_checkpoint(&student)?;
            let teachers = teachers.iter().map(load_checkpoint).collect::<Result<Vec<_>>>()?;
            let (train, test) = parse_data(&data)?.load()?;
            let cfg = TrainConfig::new(epochs, lr, momentum, batch_size, seed);
            let (net, history) = distill(student, &teachers, &train, &test, &cfg, &kd)?;
            if let Some(out) = out {
                let mut meta = CheckpointMeta { seed: Some(seed), epoch: Some(epochs), ..Default::default() };
                if let Some(last) = history.last() {
                    meta.metrics.insert("test_accuracy".into(), last.test_accuracy);
                }
                save_checkpoint(&net, &out, &meta)?;
            }
            print(stdout, &serde_json::to_string(&history).map_err(Error::from)?)?;
        }
        Command::Experiment { spec, out, timings } => {
            let spec = ExperimentSpec::load(&spec)?;
            let output = run_experiment(&spec)?;
            for path in output.write(&out)? {
                print(stdout, &path.display().to_string())?;
            }
            if let Some(t) = timings {
                output.write_timings(&t)?;
            }
        }
        Command::Report { input, format } => {
            let rows = report::read_report_csv(&input)?;
            if rows.is_empty() {
                return Err(Failure::Runtime(Error::InvalidArg("report has no rows".into())));
            }
            let text = report::render(&rows, format.into())?;
            write!(stdout, "{text}").map_err(|e| Error::io(Path::new("<stdout>"), e))?;
        }
    }
    Ok(())
}
