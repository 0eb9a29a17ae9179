use clap::Parser;

fn main() {
    let cli = histokind_cli::Cli::parse();
    if let Err(err) = histokind_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
