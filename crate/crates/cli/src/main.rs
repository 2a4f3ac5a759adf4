use clap::Parser;
use d3t_cli::commands::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => println!("{}", serde_json::json!({"status": "ok", "result": summary})),
        Err(e) => {
            eprintln!("{}", e.record());
            std::process::exit(e.exit_code());
        }
    }
}
