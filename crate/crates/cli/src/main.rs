use clap::Parser;

fn main() {
    let cli = abh_cli::Cli::parse();
    if let Err(e) = abh_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(abh_cli::exit_code(&e));
    }
}
