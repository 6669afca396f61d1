use clap::Parser;

fn main() {
    let cli = aquafarm_cli::Cli::parse();
    if let Err(e) = aquafarm_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
