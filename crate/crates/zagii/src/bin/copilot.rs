use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use zagii::backend::{build_gateway, BackendKind};
use zagii_core::copilot::{self, CopilotJob, JobStatus};
use zagii_core::game_schema::{load_game, serialize_game};
use zagii_core::llm::Gateway;

#[derive(Parser)]
#[command(name = "copilot", version, about = "Expand a one-line idea into a game definition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "scripted")]
    backend: BackendKind,
    #[arg(long)]
    scripts: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a new job. The job document is written to --out; a completed
    /// definition also goes to --game-out when given.
    Expand {
        #[arg(long)]
        seed: String,
        /// Existing game document used as a template.
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        game_out: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Continue a paused job with a repaired stage output read from a file.
    Resume {
        #[arg(long)]
        job: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        game_out: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

fn gateway(args: &BackendArgs) -> anyhow::Result<Gateway> {
    build_gateway(args.backend, args.scripts.as_deref(), args.config.as_deref())
}

fn save(job: &CopilotJob, path: &Path, game_out: Option<&Path>) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(job)?).with_context(|| format!("writing {}", path.display()))?;
    if let (Some(out), Some(def)) = (game_out, &job.final_def) {
        std::fs::write(out, serialize_game(def)).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn report(job: &CopilotJob) -> anyhow::Result<()> {
    match job.status {
        JobStatus::Complete => {
            let def = job.final_def.as_ref().expect("complete jobs carry a definition");
            println!("complete: {} ({})", def.title, def.game_id);
        }
        JobStatus::NeedsInput => {
            let waiting = job.needs_input.as_ref().expect("paused jobs say why");
            println!("needs input at stage {}: {}", waiting.stage.as_str(), waiting.reason);
            println!("{}", waiting.raw_output);
        }
        JobStatus::Running | JobStatus::Failed => bail!("job {} ended as {:?}", job.job_id, job.status),
    }
    for w in &job.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Expand { seed, template, out, game_out, backend } => {
            let template = template
                .map(|p| -> anyhow::Result<_> {
                    let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
                    Ok(load_game(&bytes)?)
                })
                .transpose()?;
            let gateway = gateway(&backend)?;
            let mut job = CopilotJob::new("job-1", &seed, template)?;
            let outcome = copilot::run_job(&gateway, &mut job);
            save(&job, &out, game_out.as_deref())?;
            outcome?;
            report(&job)
        }
        Command::Resume { job, output, game_out, backend } => {
            let text = std::fs::read_to_string(&job).with_context(|| format!("reading {}", job.display()))?;
            let mut doc: CopilotJob = serde_json::from_str(&text)?;
            let repaired = std::fs::read_to_string(&output).with_context(|| format!("reading {}", output.display()))?;
            let gateway = gateway(&backend)?;
            let outcome = copilot::resume(&gateway, &mut doc, &repaired);
            save(&doc, &job, game_out.as_deref())?;
            outcome?;
            report(&doc)
        }
    }
}
