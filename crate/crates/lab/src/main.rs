use clap::Parser;
use intactkv_lab::cli::Cli;
use intactkv_lab::commands::run;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
