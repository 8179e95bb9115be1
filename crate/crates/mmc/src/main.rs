use clap::Parser;

fn main() {
    let cli = mmc::cli::Cli::parse();
    if let Err(e) = mmc::cli::run(cli) {
        eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
        std::process::exit(mmc::cli::exit_code(&e));
    }
}
