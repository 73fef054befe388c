use clap::Parser;
use hetphase_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("hetphase: {e}");
        std::process::exit(e.exit_code());
    }
}
