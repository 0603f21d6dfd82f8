use clap::Parser;

fn main() {
    let cli = starlit::cli::Cli::parse();
    std::process::exit(starlit::cli::main_with(&cli));
}
