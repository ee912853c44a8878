use clap::Parser;

use renyi_mix_cli::{configure_threads, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message);
        std::process::exit(f.code);
    }
    std::process::exit(run(cli));
}
