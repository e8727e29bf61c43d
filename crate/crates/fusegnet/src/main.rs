use clap::Parser;

fn main() {
    let cli = fusegnet::cli::Cli::parse();
    if let Err(e) = fusegnet::cli::run(cli) {
        eprintln!("fusegnet: {e}");
        std::process::exit(1);
    }
}
