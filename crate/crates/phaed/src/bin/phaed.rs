use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use phaed::{Command, Invocation};

#[derive(Parser)]
#[command(name = "phaed", version, about = "Train, evaluate and talk to a phaed dialogue model")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write a checkpoint plus a per-step loss log
    Train(Common),
    /// Score a test corpus and write report.json
    Eval(Common),
    /// Greedy responses for every test conversation
    Generate(Common),
    /// Interactive session on stdin (/reset, /quit)
    Chat(Common),
    /// Query-to-query attention weights per conversation
    Attn(Common),
    /// Corpus statistics for the configured splits
    Stats(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. --set train.learning_rate=0.001
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory (overrides out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::Generate(a) => (Command::Generate, a),
        Cmd::Chat(a) => (Command::Chat, a),
        Cmd::Attn(a) => (Command::Attn, a),
        Cmd::Stats(a) => (Command::Stats, a),
    };
    let inv = Invocation {
        command,
        config: args.config,
        overrides: args.set,
        checkpoint: args.checkpoint,
        out: args.out,
    };
    let stdin = io::stdin();
    let mut input = stdin.lock();
    let mut output = io::stdout();
    let mut log = io::stderr();
    match phaed::run(&inv, &mut input, &mut output, &mut log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(log, "error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
