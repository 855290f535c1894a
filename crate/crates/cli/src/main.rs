use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use groundeval::metrics::EpScope;
use groundeval_cli::{
    cmd_audit_export, cmd_audit_stats, cmd_run, cmd_score, cmd_validate_dataset, CliError, Completed,
    RunConfig, ScoreOverrides,
};

#[derive(Parser)]
#[command(name = "groundeval", version, about = "Grounding-aware scoring of form extraction models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Document,
    Field,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset manifest, its schema and annotations.
    ValidateDataset {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Query one configured model over the test split.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: String,
    },
    /// Score prediction files and write reports.
    Score {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "pred", num_args = 1.., required = true)]
        pred: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iou_thresh: Option<f64>,
        #[arg(long)]
        iop_thresh: Option<f64>,
        #[arg(long, value_enum)]
        ep_scope: Option<Scope>,
    },
    /// Rewrite audit packets for one scored model.
    AuditExport {
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: PathBuf,
        /// Dataset manifest; defaults to the one recorded by `score`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Reviewer/scorer agreement from exported audit decisions.
    AuditStats {
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "decisions", num_args = 1.., required = true)]
        decisions: Vec<PathBuf>,
    },
}

fn dispatch(command: Command) -> Result<Completed, CliError> {
    match command {
        Command::ValidateDataset { manifest } => cmd_validate_dataset(&manifest),
        Command::Run { config, model } => {
            let cfg = RunConfig::load(&config)?;
            cmd_run(&cfg, &model).map(|(c, _)| c)
        }
        Command::Score {
            config,
            pred,
            out,
            iou_thresh,
            iop_thresh,
            ep_scope,
        } => {
            let cfg = RunConfig::load(&config)?;
            let overrides = ScoreOverrides {
                iou_thresh,
                iop_thresh,
                ep_scope: ep_scope.map(|s| match s {
                    Scope::Document => EpScope::Document,
                    Scope::Field => EpScope::Field,
                }),
            };
            cmd_score(&cfg, &pred, &out, overrides).map(|(c, _)| c)
        }
        Command::AuditExport { model, out, manifest } => {
            cmd_audit_export(&model, &out, manifest.as_deref())
        }
        Command::AuditStats { out, decisions } => cmd_audit_stats(&out, &decisions),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(done) => {
            if done.code == 0 {
                print!("{}", done.report);
            } else {
                eprint!("{}", done.report);
            }
            ExitCode::from(done.code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
