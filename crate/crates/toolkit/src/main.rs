use clap::Parser;
use hypermod_toolkit::cli::Cli;
use hypermod_toolkit::commands;

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli, argv) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
