use clap::Parser;
use collide_cli::{log_level, run, Cli};

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(log_level(cli.verbose)).format_timestamp(None).init();
    match run(cli) {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
