use clap::Parser;

fn main() {
    std::process::exit(dacq_cli::run(dacq_cli::Cli::parse()));
}
