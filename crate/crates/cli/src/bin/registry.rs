//! Target registry: serves the target list that managers connect to.

use std::path::PathBuf;
use std::process::ExitCode;
use std::{fs, thread};

use clap::Parser;
use depman::targets::{parse_targets, run_registry};

#[derive(Parser)]
#[command(name = "depman-registry", version, about = "Serve a deployment target list")]
struct Args {
    /// targets.xml listing servers and groups
    #[arg(long)]
    targets: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7000")]
    listen: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let targets = match fs::read(&args.targets).map_err(|e| e.to_string()).and_then(|d| parse_targets(&d).map_err(|e| e.to_string())) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("depman-registry: {}: {e}", args.targets.display());
            return ExitCode::from(2);
        }
    };
    let handle = match run_registry(targets, &args.listen) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("depman-registry: {e}");
            return ExitCode::from(1);
        }
    };
    println!("manager {}", handle.uri());
    loop {
        thread::park();
    }
}
