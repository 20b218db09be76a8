use clap::Parser;

fn main() {
    let cli = featlearn::cli::Cli::parse();
    std::process::exit(featlearn::cli::main_with(cli));
}
