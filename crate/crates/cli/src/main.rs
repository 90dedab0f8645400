use clap::Parser;

fn main() {
    let cli = flowprox::Cli::parse();
    if let Err(e) = flowprox::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
