use clap::Parser;

fn main() {
    let cli = matteforge_cli::Cli::parse();
    if let Err(e) = matteforge_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
