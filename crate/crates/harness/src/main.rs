use std::process::ExitCode;

use blockdance_harness::cli::{exit_code, run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = run(&cli, |k| std::env::var(k).ok());
    match &result {
        Ok(out) => {
            print!("{}", out.summary);
            for path in &out.artifacts {
                println!("wrote {}", path.display());
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(exit_code(&result) as u8)
}
