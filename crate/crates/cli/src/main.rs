use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rtta::{run, Command, Invocation};

#[derive(Parser)]
#[command(name = "rtta", version = rtta::commands::VERSION, about = "Test-time robust adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Sectioned key = value config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set adaptation.beta=12`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to runs/<command>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the source model.
    Pretrain(Common),
    /// Adapt a pretrained model on the corrupted target domain.
    Adapt(Common),
    /// Score `paths.checkpoint` on the eval split.
    Eval(Common),
    /// One adaptation per (method, axis value) cell.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// beta, severity or split_fraction.
        #[arg(long)]
        axis: Option<String>,
    },
    /// Per-epoch logs for each method in `sweep.methods`.
    Dynamics(Common),
    /// Check the gradient decomposition on seeded random triples.
    VerifyProp(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default();
            eprintln!("{}", serde_json::json!({"error": "config", "line": 0, "message": first}));
            return ExitCode::from(1);
        }
    };
    let (cmd, common, axis) = match cli.cmd {
        Cmd::Pretrain(c) => (Command::Pretrain, c, None),
        Cmd::Adapt(c) => (Command::Adapt, c, None),
        Cmd::Eval(c) => (Command::Eval, c, None),
        Cmd::Sweep { common, axis } => (Command::Sweep, common, axis),
        Cmd::Dynamics(c) => (Command::Dynamics, c, None),
        Cmd::VerifyProp(c) => (Command::VerifyProp, c, None),
    };
    let inv = Invocation {
        config: common.config,
        sets: common.sets,
        seed: common.seed,
        out: common.out,
        axis,
    };
    match run(cmd, &inv) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
