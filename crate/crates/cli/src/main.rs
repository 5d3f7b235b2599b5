use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

mod commands;

/// Train PEFT modules on small hosts, port them between hosts and measure
/// what survives.
#[derive(Parser, Debug)]
#[command(name = "peftport", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the raw and instruction-tuned host analogs.
    BuildModels(BuildModels),
    /// Write a synthetic classification dataset as TSV.
    GenData(GenData),
    /// Train a PEFT module on a frozen host.
    PeftTrain(PeftTrain),
    /// Validate a module file and write it back in canonical form.
    Export(Export),
    /// Build a receiving-side module under an importing scenario.
    Import(Import),
    /// Exact-match accuracy of a host (plus optional module) on a dataset.
    Eval(Eval),
    /// Run every coordinate of a grid spec not yet recorded.
    Grid(Grid),
    /// Tables and charts for a results directory.
    Report(Report),
}

#[derive(Args, Debug)]
struct BuildModels {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Language-model steps for the raw analog.
    #[arg(long)]
    raw_steps: Option<usize>,
    /// Mixture steps on top of the raw analog.
    #[arg(long)]
    instruct_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct GenData {
    /// sentiment-a, sentiment-b, nli, polarity or topic
    #[arg(long)]
    task: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PeftTrain {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Technique for a fresh module; omit when continuing from --init.
    #[arg(long)]
    technique: Option<String>,
    /// Continue training this module (e.g. one written by `import`).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 4096)]
    batch_tokens: usize,
    #[arg(long, default_value_t = 0.1)]
    warmup: f64,
    /// `step,loss,lr` CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Export {
    #[arg(long)]
    module: PathBuf,
    /// Also check the module against this host.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Import {
    #[arg(long)]
    module: PathBuf,
    /// Receiving host.
    #[arg(long)]
    model: PathBuf,
    /// ported, sampled or from_scratch
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    module: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct Grid {
    /// TOML grid spec with an [artifacts] table.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Added to every seed listed in the spec.
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct Report {
    #[arg(long)]
    results: PathBuf,
    /// Defaults to `<results>/report`.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Refuses to overwrite any input file.
fn distinct_out(out: &Path, inputs: &[&Path]) -> Result<(), Failure> {
    let canon = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    if inputs.iter().any(|i| canon(i) == canon(out)) {
        return Err(usage(format!("--out {} would overwrite an input", out.display())));
    }
    Ok(())
}

fn run(command: Command) -> Result<Value, Failure> {
    match command {
        Command::BuildModels(a) => commands::build_models(&a.out_dir, a.seed, a.raw_steps, a.instruct_steps),
        Command::GenData(a) => {
            let task = commands::task_spec(&a.task, a.seed)?;
            if a.n == 0 {
                return Err(usage("--n must be at least 1"));
            }
            commands::gen_data(&task, a.n, &a.out)
        }
        Command::PeftTrain(a) => {
            let technique = match (&a.technique, &a.init) {
                (Some(_), Some(_)) => return Err(usage("--technique and --init are exclusive")),
                (None, None) => return Err(usage("one of --technique or --init is required")),
                (Some(t), None) => Some(t.parse().map_err(|e: String| usage(format!("--technique: {e}")))?),
                (None, Some(_)) => None,
            };
            if !(0.0..1.0).contains(&a.warmup) {
                return Err(usage("--warmup must lie in [0, 1)"));
            }
            if a.batch_tokens == 0 {
                return Err(usage("--batch-tokens must be at least 1"));
            }
            let mut inputs = vec![a.model.as_path(), a.data.as_path()];
            inputs.extend(a.init.as_deref());
            distinct_out(&a.out, &inputs)?;
            commands::peft_train(commands::TrainArgs {
                model: &a.model,
                data: &a.data,
                technique,
                init: a.init.as_deref(),
                steps: a.steps,
                lr: a.lr,
                batch_tokens: a.batch_tokens,
                warmup: a.warmup,
                trace: a.trace.as_deref(),
                seed: a.seed,
                out: &a.out,
            })
        }
        Command::Export(a) => {
            let mut inputs = vec![a.module.as_path()];
            inputs.extend(a.model.as_deref());
            distinct_out(&a.out, &inputs)?;
            commands::export(&a.module, a.model.as_deref(), &a.out)
        }
        Command::Import(a) => {
            let scenario = a
                .scenario
                .parse()
                .map_err(|e: String| usage(format!("--scenario: {e}")))?;
            distinct_out(&a.out, &[&a.module, &a.model])?;
            commands::import(&a.module, &a.model, scenario, a.seed, &a.out)
        }
        Command::Eval(a) => commands::eval(&a.model, a.module.as_deref(), &a.data),
        Command::Grid(a) => {
            if a.workers == 0 {
                return Err(usage("--workers must be at least 1"));
            }
            commands::grid(&a.spec, &a.out, a.workers, a.seed)
        }
        Command::Report(a) => {
            let out = a.out.unwrap_or_else(|| a.results.join("report"));
            commands::report(&a.results, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
