use clap::Parser;

fn main() {
    let cli = stome::Cli::parse();
    if let Err(e) = stome::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
