use clap::Parser;

fn main() {
    let cli = pillarnext_cli::Cli::parse();
    std::process::exit(pillarnext_cli::run(cli));
}
