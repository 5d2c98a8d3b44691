use clap::Parser;

fn main() {
    let cli = bilevel_cli::Cli::parse();
    std::process::exit(bilevel_cli::run(&cli));
}
