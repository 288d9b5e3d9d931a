use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = sdtseg_cli::Cli::parse();
    if let Err(e) = sdtseg_cli::run(cli) {
        eprintln!("sdtseg: {e}");
        std::process::exit(e.exit_code());
    }
}
