use clap::Parser;

fn main() {
    let cli = dimex::cli::Cli::parse();
    if let Err(err) = dimex::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
