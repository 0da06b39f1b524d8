use clap::Parser;

fn main() {
    std::process::exit(sklimit::cli::run(sklimit::cli::Cli::parse()));
}
