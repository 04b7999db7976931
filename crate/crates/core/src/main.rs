use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pnf::harness::{run_experiment, ExperimentConfig, Task};
use pnf::Error;

#[derive(Parser)]
#[command(name = "pnf", version, about = "Annealed Langevin sampling from autoregressive models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base model on a synthetic corpus.
    Train(Common),
    /// Fine-tune a base model at every noise level of the schedule.
    Finetune(Common),
    /// Unconditional sampling.
    Sample(Common),
    /// Unconditional block-parallel sampling.
    SampleStochastic(Stochastic),
    /// Source separation from a linear mixture.
    Separate(Common),
    /// Super-resolution from a decimated signal.
    Superres(Common),
    /// Inpainting of masked positions.
    Inpaint(Common),
    /// Median noiseless log-likelihood of stored samples.
    EvalLl(Common),
    /// Wall-clock sweep over worker counts.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Size of the thread pool for independent runs.
    #[arg(long)]
    threads_override: Option<usize>,
}

#[derive(Args)]
struct Stochastic {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    workers: Option<usize>,
}

fn build(task: Task, common: &Common, workers: Option<usize>) -> pnf::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?.with_task(task)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(t) = common.threads_override {
        cfg.threads = Some(t);
    }
    if let Some(w) = workers {
        cfg.block.workers = w;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (task, common, workers) = match &cli.command {
        Command::Train(c) => (Task::Train, c, None),
        Command::Finetune(c) => (Task::Finetune, c, None),
        Command::Sample(c) => (Task::Sample, c, None),
        Command::SampleStochastic(s) => (Task::SampleStochastic, &s.common, s.workers),
        Command::Separate(c) => (Task::Separate, c, None),
        Command::Superres(c) => (Task::Superres, c, None),
        Command::Inpaint(c) => (Task::Inpaint, c, None),
        Command::EvalLl(c) => (Task::EvalLl, c, None),
        Command::Bench(c) => (Task::Bench, c, None),
    };
    let result = build(task, common, workers).and_then(|cfg| {
        let records = run_experiment(&cfg)?;
        eprintln!("{task}: {} record(s) written to {}", records.len(), cfg.out.display());
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Divergence { level, step, worker, .. } = &e {
                eprintln!("diverged at level {level}, step {step}, worker {worker:?}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
