use clap::Parser;

fn main() {
    let cli = abacus_core::cli::Cli::parse();
    if let Err(e) = abacus_core::cli::run(cli, std::io::stdout().lock()) {
        eprintln!("error: {e:#}");
        std::process::exit(abacus_core::cli::exit_code(&e));
    }
}
