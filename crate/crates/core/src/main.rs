use clap::Parser;

use macflow::cli::{exit_code, run, Cli};

fn main() {
    macflow::par::init_threads_from_env();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
