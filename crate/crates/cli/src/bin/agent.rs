//! Target agent: hosts deployed units for one server.

use std::path::PathBuf;
use std::process::ExitCode;
use std::{fs, thread};

use clap::Parser;
use depman::agent::{run_agent, ServerConfig};

#[derive(Parser)]
#[command(name = "depman-agent", version, about = "Run a deployment target agent")]
struct Args {
    /// server.xml describing this server
    #[arg(long)]
    config: PathBuf,
    /// Directory for state.json and installed module archives
    #[arg(long)]
    data: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let config = match fs::read(&args.config).map_err(|e| e.to_string()).and_then(|d| ServerConfig::parse(&d).map_err(|e| e.to_string())) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("depman-agent: {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let handle = match run_agent(config, args.data.as_deref()) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("depman-agent: {e}");
            return ExitCode::from(1);
        }
    };
    // Scripts starting the agent on port 0 read the address from here.
    println!("listening {}", handle.endpoint());
    // State is persisted after every mutation, so the agent can simply be
    // killed.
    loop {
        thread::park();
    }
}
