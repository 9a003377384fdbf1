use clap::Parser;

fn main() {
    let cli = meshsva::cli::Cli::parse();
    if let Err(e) = meshsva::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(meshsva::cli::exit_code(&e));
    }
}
