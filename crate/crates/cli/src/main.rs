mod cli;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;

use cli::{Cli, Command};
use output::{CliResult, Output};

fn run(cli: &Cli, args: &[String]) -> CliResult<()> {
    let (name, common) = match &cli.command {
        Command::Gen(a) => ("gen", &a.common),
        Command::Train(a) => ("train", &a.common),
        Command::Ablate(a) => ("ablate", &a.common),
        Command::Sensitivity(a) => ("sensitivity", &a.common),
        Command::Eval(a) => ("eval", &a.common),
        Command::Tune(a) => ("tune", &a.common),
        Command::Serve(a) => ("serve", &a.common),
        Command::Replay(a) => ("replay", &a.common),
    };
    let mut out = Output::create(&common.out)?;
    match &cli.command {
        Command::Gen(a) => commands::gen(a, &mut out),
        Command::Train(a) => commands::train(a, &mut out),
        Command::Ablate(a) => commands::ablate(a, &mut out),
        Command::Sensitivity(a) => commands::sensitivity(a, &mut out),
        Command::Eval(a) => commands::eval(a, &mut out),
        Command::Tune(a) => commands::tune_cmd(a, &mut out),
        Command::Serve(a) => commands::serve(a, &mut out),
        Command::Replay(a) => commands::replay(a, &mut out),
    }?;
    out.finish(name, common.seed(), args)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
