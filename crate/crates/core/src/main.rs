use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = reqqda::cli::Cli::parse();
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = reqqda::cli::execute(cli, &mut stdout) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
