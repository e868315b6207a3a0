use std::process::ExitCode;

use clap::Parser;

use icl::cli;

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("ICL_THREADS") {
        match threads.parse::<usize>() {
            Ok(t) if t > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
            }
            _ => {
                eprintln!("warning: ignoring invalid ICL_THREADS={threads}");
            }
        }
    }
    let args = cli::Cli::parse();
    match cli::run(&args) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
