use clap::Parser;

fn main() {
    let cli = gmmscope_service::cli::Cli::parse();
    if let Err(e) = gmmscope_service::cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
