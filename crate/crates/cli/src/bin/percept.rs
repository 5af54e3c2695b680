//! Standalone perception peer. Prints `LISTENING <addr>` once ready.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use servosim::link::{resolve_addr, PerceptionLink, COMMAND_ADDR_ENV, DEFAULT_COMMAND_PORT, DEFAULT_FRAME_PORT, FRAME_ADDR_ENV};
use servosim::percept::PerceptParams;
use servosim::sim::LISTENING_PREFIX;
use servosim::RunConfig;

#[derive(Parser)]
#[command(name = "servosim-percept", version, about = "Pseudo-depth obstacle perception peer")]
struct Args {
    /// Address to accept the frame stream on.
    #[arg(long)]
    frame_addr: Option<String>,
    /// Where to send command datagrams.
    #[arg(long)]
    cmd_addr: Option<String>,
    /// Perception parameters as JSON.
    #[arg(long, conflicts_with = "config")]
    params_json: Option<String>,
    /// Run config whose [percept] table is used.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match serve(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn serve(args: Args) -> Result<(), String> {
    let params: PerceptParams = match (&args.params_json, &args.config) {
        (Some(json), _) => serde_json::from_str(json).map_err(|e| format!("bad params: {e}"))?,
        (None, Some(path)) => RunConfig::load(path).map_err(|e| e.to_string())?.percept,
        (None, None) => PerceptParams::default(),
    };
    let frame_addr = resolve_addr(args.frame_addr.as_deref(), FRAME_ADDR_ENV, DEFAULT_FRAME_PORT).map_err(|e| e.to_string())?;
    let cmd_addr = resolve_addr(args.cmd_addr.as_deref(), COMMAND_ADDR_ENV, DEFAULT_COMMAND_PORT).map_err(|e| e.to_string())?;
    let link = PerceptionLink::bind(frame_addr, cmd_addr).map_err(|e| e.to_string())?;
    let bound = link.frame_addr().map_err(|e| e.to_string())?;
    let mut stdout = std::io::stdout();
    writeln!(stdout, "{LISTENING_PREFIX}{bound}").and_then(|_| stdout.flush()).map_err(|e| e.to_string())?;
    servosim::node::serve(link, params).map_err(|e| e.to_string())?;
    Ok(())
}
