//! `priorzero`: train, evaluate and inspect agents from the command line.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};
use priorzero::text_env::EnvName;
use priorzero::trainer::Mode;
use priorzero_cli::commands::{self, Common};
use priorzero_cli::error::CliError;

static STOP: AtomicBool = AtomicBool::new(false);

#[derive(Parser)]
#[command(name = "priorzero", version, about = "World-model search with a trainable token-model prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per configured seed.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate the full agent, the standalone prior and the world model alone.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Episodes per variant.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Step one episode and print the root fusion at every state as JSON lines.
    CaseStudy {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Collect episodes with the training policy and dump them as JSON lines.
    DumpReplay {
        #[command(flatten)]
        common: CommonArgs,
        /// Episodes to collect; `episodes_per_collect` when absent.
        #[arg(long)]
        episodes: Option<usize>,
        /// Also write the per-step environment trace.
        #[arg(long)]
        trace: bool,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory to load the configuration and parameters from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory. PRIORZERO_OUT takes precedence.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    env: Option<EnvName>,
    /// Dotted-path override such as `search.fusion.alpha=0.3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl CommonArgs {
    fn into_common(self) -> Common {
        Common {
            config: self.config,
            checkpoint: self.checkpoint,
            out: self.out,
            out_env: std::env::var("PRIORZERO_OUT").ok(),
            seed: self.seed,
            mode: self.mode,
            env: self.env,
            set: self.set,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    match cli.command {
        Command::Train { common } => {
            // Without a handler the default action still terminates the
            // process, so failing to install one is not fatal.
            if let Err(e) = ctrlc::set_handler(|| STOP.store(true, Ordering::SeqCst)) {
                eprintln!("warning: no interrupt handler: {e}");
            }
            for run in commands::train(&common.into_common(), &STOP)? {
                let summary = serde_json::json!({
                    "seed": run.seed,
                    "out_dir": run.out_dir,
                    "interrupted": run.interrupted,
                    "last": run.last,
                });
                println!("{summary}");
            }
        }
        Command::Eval { common, episodes } => {
            let record = commands::eval(&common.into_common(), episodes)?;
            commands::print_jsonl(stdout.lock(), &[record])?;
        }
        Command::CaseStudy { common } => {
            let rows = commands::case_study(&common.into_common())?;
            commands::print_jsonl(stdout.lock(), &rows)?;
        }
        Command::DumpReplay {
            common,
            episodes,
            trace,
        } => {
            let (dir, eps) = commands::dump_replay(&common.into_common(), episodes, trace)?;
            eprintln!("wrote {} episodes to {}", eps.len(), dir.join("replay.jsonl").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
