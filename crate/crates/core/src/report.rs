//! Run results and their CSV / text export.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::mission::FailReason;
use crate::percept::Direction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Done,
    Failed(FailReason),
    Collision,
    Timeout,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Done => 0,
            Outcome::Failed(_) => 2,
            Outcome::Collision => 3,
            Outcome::Timeout => 4,
        }
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Outcome::Failed(r) => write!(f, "Failed({r:?})"),
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityRow {
    pub t: f64,
    pub reference: [f64; 3],
    pub actual: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YawRateRow {
    pub t: f64,
    pub wz_ref: f64,
    pub wz: f64,
}

/// An avoidance command as delivered to the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandRow {
    pub t: f64,
    pub seq: u32,
    pub direction: Direction,
    pub white_fraction: f64,
}

/// How the vehicle fared against one obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Encounter {
    pub obstacle: usize,
    /// Closest approach of the hull to the obstacle surface, m.
    pub min_clearance: f64,
    /// Came within the encounter radius and left it again without contact.
    pub passed: bool,
    /// LEFT / RIGHT commands decided on frames where this obstacle filled most
    /// of the near region.
    pub commands: u32,
}

/// Mission phase entered at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseChange {
    pub t: f64,
    pub phase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionReport {
    pub scenario: String,
    pub seed: u64,
    pub avoidance: bool,
    pub outcome: Outcome,
    pub end_time: f64,
    /// Smallest hull-to-surface distance over the run; `None` without obstacles.
    pub min_obstacle_clearance: Option<f64>,
    pub gates_passed: u32,
    pub tags_tracked: u32,
    pub frames_sent: u32,
    pub encounters: Vec<Encounter>,
    pub trajectory: Vec<TrajectoryRow>,
    pub velocity: Vec<VelocityRow>,
    pub yawrate: Vec<YawRateRow>,
    pub commands: Vec<CommandRow>,
    pub phases: Vec<PhaseChange>,
}

pub const EXPORT_FILES: [&str; 5] = [
    "trajectory.csv",
    "velocity.csv",
    "yawrate.csv",
    "commands.csv",
    "summary.txt",
];

/// C-style `%g` with six significant digits.
pub fn fmt_g(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_fraction(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_fraction(mantissa.to_string()), exp.abs())
    }
}

fn trim_fraction(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn csv(header: &str, rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

impl MissionReport {
    pub fn trajectory_csv(&self) -> String {
        csv(
            "t,x,y,z",
            self.trajectory.iter().map(|r| [r.t, r.x, r.y, r.z].map(fmt_g).to_vec()),
        )
    }

    pub fn velocity_csv(&self) -> String {
        csv(
            "t,vx_ref,vx,vy_ref,vy,vz_ref,vz",
            self.velocity.iter().map(|r| {
                [r.t, r.reference[0], r.actual[0], r.reference[1], r.actual[1], r.reference[2], r.actual[2]]
                    .map(fmt_g)
                    .to_vec()
            }),
        )
    }

    pub fn yawrate_csv(&self) -> String {
        csv(
            "t,wz_ref,wz",
            self.yawrate.iter().map(|r| [r.t, r.wz_ref, r.wz].map(fmt_g).to_vec()),
        )
    }

    pub fn commands_csv(&self) -> String {
        csv(
            "t,seq,direction,white_fraction",
            self.commands.iter().map(|c| {
                vec![fmt_g(c.t), c.seq.to_string(), c.direction.token().to_string(), fmt_g(c.white_fraction)]
            }),
        )
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario: {}", self.scenario);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "avoidance: {}", if self.avoidance { "on" } else { "off" });
        let _ = writeln!(s, "outcome: {}", self.outcome);
        let _ = writeln!(s, "end_time: {}", fmt_g(self.end_time));
        let clearance = self.min_obstacle_clearance.map_or("none".to_string(), fmt_g);
        let _ = writeln!(s, "min_obstacle_clearance: {clearance}");
        let _ = writeln!(s, "gates_passed: {}", self.gates_passed);
        let _ = writeln!(s, "tags_tracked: {}", self.tags_tracked);
        let _ = writeln!(s, "frames_sent: {}", self.frames_sent);
        let _ = writeln!(s, "avoid_commands: {}", self.commands.len());
        for e in &self.encounters {
            let _ = writeln!(
                s,
                "obstacle {}: min_clearance {} passed {} commands {}",
                e.obstacle,
                fmt_g(e.min_clearance),
                e.passed,
                e.commands
            );
        }
        if let Some(last) = self.trajectory.last() {
            let _ = writeln!(s, "final_position: {} {} {}", fmt_g(last.x), fmt_g(last.y), fmt_g(last.z));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })
}

/// Writes the four CSV logs and `summary.txt` into `dir`. Returns the paths.
pub fn export_report(report: &MissionReport, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let contents = [
        report.trajectory_csv(),
        report.velocity_csv(),
        report.yawrate_csv(),
        report.commands_csv(),
        report.summary(),
    ];
    let mut paths = Vec::new();
    for (name, body) in EXPORT_FILES.iter().zip(contents) {
        let p = dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        paths.push(p);
    }
    Ok(paths)
}
