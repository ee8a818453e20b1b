use clap::Parser;

use selflearn_cli::args::Cli;
use selflearn_cli::commands::execute;
use selflearn_cli::{EXIT_DIVERGED, EXIT_OK};

fn main() {
    let cli = Cli::parse();
    let common = cli.command.common();
    let level = if common.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = cli
        .command
        .resolve_config()
        .and_then(|cfg| execute(cli.command.verb(), &cfg, &common.out));
    let code = match result {
        Ok((record, dir)) => {
            if !common.quiet {
                println!("{}", dir.display());
                for (k, v) in &record.metrics {
                    println!("  {k} = {v}");
                }
            }
            if record.diverged() {
                log::error!("run diverged: {:?}", record.outcome);
                EXIT_DIVERGED
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
