use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use servosim::node::replay_frames;
use servosim::world::{load_scenario, validate_spacing};
use servosim::{export_report, run_mission, MissionReport, RunConfig, SimOptions};

#[derive(Parser)]
#[command(name = "servosim", version, about = "Quadrotor IBVS mission simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fly a mission and write its logs.
    Run(RunArgs),
    /// Re-decide avoidance commands from a recorded frame log.
    Replay {
        /// Frame log written by `run --record-frames`.
        frames: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check a scenario file.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Regenerate CSV and summary files from a saved report.json.
    Export {
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_avoidance: bool,
    #[arg(long)]
    two_process: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    duration: Option<f64>,
    /// Also keep every perception frame in frames.bin.
    #[arg(long)]
    record_frames: bool,
}

const USAGE_ERROR: u8 = 1;

fn load_config(path: Option<&Path>) -> Result<RunConfig, String> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| e.to_string()),
        None => Ok(RunConfig::default()),
    }
}

fn perception_exe() -> Option<PathBuf> {
    let me = std::env::current_exe().ok()?;
    let exe = me.with_file_name(format!("servosim-percept{}", std::env::consts::EXE_SUFFIX));
    exe.exists().then_some(exe)
}

fn run(args: RunArgs) -> Result<u8, String> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.scenario {
        cfg.run.scenario = s;
    }
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(d) = args.duration {
        cfg.run.duration = d;
    }
    if args.no_avoidance {
        cfg.run.avoidance = false;
    }
    if args.two_process {
        cfg.run.two_process = true;
    }
    if args.out.is_some() {
        cfg.run.out = args.out;
    }
    cfg.run.record_frames |= args.record_frames;
    cfg.validate().map_err(|e| e.to_string())?;
    let scene = cfg.scene().map_err(|e| e.to_string())?;
    for w in validate_spacing(&scene) {
        eprintln!("warning: {w}");
    }

    let out = cfg.run.out.clone();
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    }
    let opts = SimOptions {
        perception_exe: perception_exe(),
        frame_log: match (&out, cfg.run.record_frames) {
            (Some(dir), true) => Some(dir.join("frames.bin")),
            _ => None,
        },
    };
    let report = run_mission(&cfg, &opts).map_err(|e| e.to_string())?;
    print!("{}", report.summary());
    if let Some(dir) = &out {
        write_outputs(&report, dir)?;
    }
    Ok(report.outcome.exit_code() as u8)
}

fn write_outputs(report: &MissionReport, dir: &Path) -> Result<(), String> {
    export_report(report, dir).map_err(|e| format!("export failed: {e}"))?;
    servosim::report::write_atomic(&dir.join("report.json"), report.to_json().as_bytes())
        .map_err(|e| format!("cannot write report.json: {e}"))
}

fn replay(frames: &Path, config: Option<&Path>) -> Result<u8, String> {
    let cfg = load_config(config)?;
    let bytes = std::fs::read(frames).map_err(|e| format!("cannot read {}: {e}", frames.display()))?;
    let cmds = replay_frames(&bytes, cfg.percept).map_err(|e| e.to_string())?;
    for c in cmds {
        println!("{} {} {}", c.seq, c.direction, servosim::report::fmt_g(c.white_fraction));
    }
    Ok(0)
}

fn validate(path: &Path) -> Result<u8, String> {
    let doc = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let scene = load_scenario(&doc).map_err(|e| e.to_string())?;
    for w in validate_spacing(&scene) {
        println!("warning: {w}");
    }
    println!(
        "ok: {} tags, {} gates, {} obstacles",
        scene.tags.len(),
        scene.gates.len(),
        scene.obstacles.len()
    );
    Ok(0)
}

fn export(report: &Path, out: &Path) -> Result<u8, String> {
    let text = std::fs::read_to_string(report).map_err(|e| format!("cannot read {}: {e}", report.display()))?;
    let report = MissionReport::from_json(&text).map_err(|e| format!("bad report: {e}"))?;
    export_report(&report, out).map_err(|e| format!("export failed: {e}"))?;
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE_ERROR) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Cmd::Run(args) => run(args),
        Cmd::Replay { frames, config } => replay(&frames, config.as_deref()),
        Cmd::Validate { scenario } => validate(&scenario),
        Cmd::Export { report, out } => export(&report, &out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(USAGE_ERROR)
        }
    }
}
