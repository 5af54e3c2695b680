//! Closed-loop mission simulation: vehicle, camera, servo, mission logic and
//! a perception peer reached over the link under a simulated clock.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::thread::JoinHandle;
use std::time::Duration;

use nalgebra::{Isometry3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::features::{feature_vector, DesiredFeatures};
use crate::link::{encode_framed, run_channel_pair, ControllerLink, FrameKind, FrameMessage, LatestCommand, LinkError, PerceptionLink};
use crate::mission::{step_mission, MissionError, MissionInputs, MissionState, Phase, TargetView};
use crate::percept::{AvoidCommandMsg, Direction};
use crate::report::{CommandRow, Encounter, MissionReport, Outcome, PhaseChange, TrajectoryRow, VelocityRow, YawRateRow};
use crate::servo::{camera_to_body, feature_error, ibvs_velocity, ServoError, ServoGains};
use crate::simcam::{
    camera_to_body_mount, level_camera_pose, obstacle_coverage, observe_tag, render_pseudo_depth, DepthAffine, SimCamError,
    NEARNESS_K,
};
use crate::vehicle::{step_dynamics, FlightController, QuadState, VehicleError, RATE_LOOP_DT};
use crate::world::WorldScene;

/// Radius of the sphere standing in for the airframe, m.
pub const HULL_RADIUS: f64 = 0.25;
/// Surface distance under which an obstacle counts as being encountered, m.
pub const ENCOUNTER_RADIUS: f64 = 1.5;
pub const GUIDANCE_DT: f64 = 0.01;
const PHYSICS_STEPS_PER_GUIDANCE: usize = 10;
/// Pixel stride used when attributing a frame to an obstacle.
const COVERAGE_STRIDE: usize = 4;
/// Nominal start point; each seed perturbs it slightly.
pub const START_POSITION: Vector3<f64> = Vector3::new(0.0, 0.0, 0.2);
/// Printed by the perception executable once it accepts frames.
pub const LISTENING_PREFIX: &str = "LISTENING ";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("link failure: {0}")]
    Link(#[from] LinkError),
    #[error("no perception reply for frame {0}")]
    PerceptionTimeout(u32),
    #[error("perception process: {0}")]
    Peer(String),
    #[error(transparent)]
    Render(#[from] SimCamError),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error(transparent)]
    Mission(#[from] MissionError),
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Knobs that are about the host rather than the experiment.
#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Perception executable used when the config asks for two processes.
    pub perception_exe: Option<PathBuf>,
    /// Destination for the raw frame log.
    pub frame_log: Option<PathBuf>,
}

enum PeerHandle {
    Thread(JoinHandle<Result<u64, LinkError>>),
    Child(Child),
}

/// Controller-side view of the perception peer.
struct Perception {
    link: ControllerLink,
    peer: Option<PeerHandle>,
    timeout: Duration,
    log: Option<BufWriter<std::fs::File>>,
}

impl Perception {
    fn start(cfg: &RunConfig, opts: &SimOptions) -> Result<Self, SimError> {
        let loopback: SocketAddr = "127.0.0.1:0".parse().expect("literal address");
        let unreachable: SocketAddr = "127.0.0.1:1".parse().expect("literal address");
        let mut link = run_channel_pair(unreachable, loopback, cfg.link.staleness)?;
        let cmd_addr = link.command_addr()?;
        let peer = if cfg.run.two_process {
            let exe = opts
                .perception_exe
                .clone()
                .ok_or_else(|| SimError::Peer("two-process mode needs the perception executable".into()))?;
            let params = serde_json::to_string(&cfg.percept).expect("params serialize");
            let mut child = Command::new(&exe)
                .args(["--frame-addr", "127.0.0.1:0", "--cmd-addr", &cmd_addr.to_string(), "--params-json", &params])
                .stdin(Stdio::null())
                .stdout(Stdio::piped())
                .spawn()
                .map_err(|e| SimError::Peer(format!("cannot start {}: {e}", exe.display())))?;
            let stdout = child.stdout.take().expect("piped stdout");
            let mut line = String::new();
            BufReader::new(stdout).read_line(&mut line)?;
            let addr = line
                .trim()
                .strip_prefix(LISTENING_PREFIX)
                .and_then(|a| a.parse().ok())
                .ok_or_else(|| {
                    let _ = child.kill();
                    SimError::Peer(format!("unexpected greeting {line:?}"))
                })?;
            link.set_frame_addr(addr);
            PeerHandle::Child(child)
        } else {
            let plink = PerceptionLink::bind(loopback, cmd_addr)?;
            link.set_frame_addr(plink.frame_addr()?);
            let params = cfg.percept;
            PeerHandle::Thread(std::thread::spawn(move || crate::node::serve(plink, params)))
        };
        let log = match &opts.frame_log {
            Some(p) => Some(BufWriter::new(std::fs::File::create(p)?)),
            None => None,
        };
        Ok(Self {
            link,
            peer: Some(peer),
            timeout: Duration::from_secs_f64(cfg.run.perception_timeout),
            log,
        })
    }

    fn send(&mut self, frame: &FrameMessage) -> Result<(), SimError> {
        if let Some(log) = &mut self.log {
            log.write_all(&encode_framed(frame))?;
        }
        self.link.send_frame(frame)?;
        Ok(())
    }

    fn exchange(&mut self, frames: &[FrameMessage], seq: u32) -> Result<AvoidCommandMsg, SimError> {
        for f in frames {
            self.send(f)?;
        }
        self.link.wait_for(seq, self.timeout)?.ok_or(SimError::PerceptionTimeout(seq))
    }

    fn shutdown(mut self) -> Result<(), SimError> {
        if let Some(log) = &mut self.log {
            log.flush()?;
        }
        self.link.close();
        match self.peer.take() {
            Some(PeerHandle::Thread(h)) => {
                h.join().map_err(|_| SimError::Peer("perception thread panicked".into()))??;
            }
            Some(PeerHandle::Child(mut c)) => {
                let status = c.wait()?;
                if !status.success() {
                    return Err(SimError::Peer(format!("exited with {status}")));
                }
            }
            None => {}
        }
        Ok(())
    }
}

impl Drop for Perception {
    fn drop(&mut self) {
        self.link.close();
        if let Some(PeerHandle::Child(c)) = &mut self.peer {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

/// Per-obstacle bookkeeping while flying.
#[derive(Debug, Clone, Copy)]
struct EncounterTrack {
    min_clearance: f64,
    entered: bool,
    left: bool,
    commands: u32,
}

fn start_pose(seed: u64, jitter: f64) -> (Vector3<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    if jitter == 0.0 {
        return (START_POSITION, 0.0);
    }
    let dx = rng.random_range(-jitter..=jitter);
    let dy = rng.random_range(-jitter..=jitter);
    let dyaw = rng.random_range(-jitter..=jitter);
    (START_POSITION + Vector3::new(dx, dy, 0.0), dyaw)
}

fn describe(phase: &Phase) -> String {
    match phase {
        Phase::Takeoff => "Takeoff".into(),
        Phase::Track(k) => format!("Track({k})"),
        Phase::CrossGate(k, leg) => format!("CrossGate({k}, {leg:?})"),
        Phase::Search(k) => format!("Search({k})"),
        Phase::AvoidLocked { k, maneuver, .. } => format!("AvoidLocked({k}, {:?})", maneuver.kind),
        Phase::Done => "Done".into(),
        Phase::Failed(r) => format!("Failed({r:?})"),
    }
}

fn body_to_world(v: &Vector3<f64>, yaw: f64) -> Vector3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), yaw) * v
}

struct Tracker<'a> {
    scene: &'a WorldScene,
    cfg: &'a RunConfig,
    desired: Vec<DesiredFeatures>,
    gains: ServoGains,
}

impl Tracker<'_> {
    /// Looks for target `k` and, if visible, computes the servo command.
    fn view(&self, k: usize, position: &Vector3<f64>, yaw: f64) -> Result<Option<TargetView>, SimError> {
        let pose = level_camera_pose(position, yaw);
        let Some(obs) = observe_tag(&pose, &self.scene.tags[k], &self.cfg.camera, &self.scene.obstacles) else {
            return Ok(None);
        };
        let des = &self.desired[k];
        let q = feature_vector(&obs, &self.cfg.camera, des);
        let Some(cam_cmd) = ibvs_velocity(&q, des, &self.gains) else {
            return Ok(None);
        };
        let servo = camera_to_body(&cam_cmd, &camera_to_body_mount())?;
        Ok(Some(TargetView {
            features: q,
            error_norm: feature_error(&q, des).norm(),
            servo,
        }))
    }
}

/// Obstacle covering most of the region the threshold marks as near.
fn dominant_obstacle(pose: &Isometry3<f64>, scene: &WorldScene, cfg: &RunConfig) -> Option<usize> {
    let affine = cfg.depth.affine();
    let excess = cfg.percept.decision.tau - affine.shift;
    let max_depth = if excess > 0.0 {
        affine.scale * NEARNESS_K / excess
    } else {
        f64::INFINITY
    };
    let counts = obstacle_coverage(pose, scene, &cfg.camera, max_depth, COVERAGE_STRIDE);
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .max_by_key(|(_, &c)| c)
        .map(|(i, _)| i)
}

/// Runs one mission to completion. Deterministic for a given config.
pub fn run_mission(cfg: &RunConfig, opts: &SimOptions) -> Result<MissionReport, SimError> {
    cfg.validate()?;
    let scene = cfg.scene()?;
    let desired = scene
        .tags
        .iter()
        .map(|t| cfg.desired_features(t.side))
        .collect::<Result<Vec<_>, _>>()
        .map_err(ConfigError::from)?;
    let tracker = Tracker {
        scene: &scene,
        cfg,
        desired,
        gains: cfg.servo.gains()?,
    };

    let (start, yaw0) = start_pose(cfg.run.seed, cfg.run.start_jitter);
    let mut state = QuadState::at_rest(start, yaw0);
    let mut fc = FlightController::new(cfg.vehicle, cfg.gains, yaw0);
    let mut mission = MissionState::new();
    let mut latest = LatestCommand::new(cfg.link.staleness);
    let mut in_flight: VecDeque<(f64, AvoidCommandMsg, Option<usize>)> = VecDeque::new();
    let mut perception = if cfg.run.avoidance {
        Some(Perception::start(cfg, opts)?)
    } else {
        None
    };
    let period = 1.0 / cfg.percept.rate_hz;
    let mut next_frame_at = 0.0;
    let mut seq: u32 = 0;

    let mut report = MissionReport {
        scenario: cfg.run.scenario.clone(),
        seed: cfg.run.seed,
        avoidance: cfg.run.avoidance,
        outcome: Outcome::Timeout,
        end_time: 0.0,
        min_obstacle_clearance: None,
        gates_passed: 0,
        tags_tracked: 0,
        frames_sent: 0,
        encounters: Vec::new(),
        trajectory: Vec::new(),
        velocity: Vec::new(),
        yawrate: Vec::new(),
        commands: Vec::new(),
        phases: vec![PhaseChange {
            t: 0.0,
            phase: describe(&mission.phase),
        }],
    };
    let mut tracks = vec![
        EncounterTrack {
            min_clearance: f64::INFINITY,
            entered: false,
            left: false,
            commands: 0,
        };
        scene.obstacles.len()
    ];
    let mut collided = false;

    let mut tick: u64 = 0;
    let outcome = 'run: loop {
        let t = tick as f64 * GUIDANCE_DT;

        if let Some(p) = perception.as_mut() {
            if t + 1e-9 >= next_frame_at {
                let pose = level_camera_pose(&state.position, state.yaw());
                let depth = render_pseudo_depth(
                    &pose,
                    &scene,
                    &cfg.camera,
                    cfg.depth.affine(),
                    cfg.depth.noise_sigma,
                    cfg.run.seed,
                    seq as u64,
                )?;
                let stamp = (t * 1e6).round() as u64;
                let mut frames = Vec::with_capacity(2);
                if cfg.percept.align {
                    let truth = render_pseudo_depth(&pose, &scene, &cfg.camera, DepthAffine::default(), 0.0, 0, 0)?;
                    frames.push(FrameMessage::from_depth(seq, stamp, FrameKind::Reference, &truth));
                }
                frames.push(FrameMessage::from_depth(seq, stamp, FrameKind::PseudoDepth, &depth));
                let reply = p.exchange(&frames, seq)?;
                let cause = dominant_obstacle(&pose, &scene, cfg);
                in_flight.push_back((t + cfg.percept.latency, reply, cause));
                report.frames_sent += 1;
                seq += 1;
                next_frame_at = t + period;
            }
        }

        while in_flight.front().is_some_and(|(at, ..)| *at <= t + 1e-9) {
            let (_, msg, cause) = in_flight.pop_front().expect("non-empty");
            latest.offer(msg, t);
            if msg.direction != Direction::Center {
                report.commands.push(CommandRow {
                    t,
                    seq: msg.seq,
                    direction: msg.direction,
                    white_fraction: msg.white_fraction,
                });
                if let Some(i) = cause {
                    tracks[i].commands += 1;
                }
            }
        }

        let yaw = state.yaw();
        let target = match mission.phase {
            Phase::Takeoff => tracker.view(0, &state.position, yaw)?,
            Phase::Track(k) | Phase::Search(k) => tracker.view(k, &state.position, yaw)?,
            _ => None,
        };
        let inputs = MissionInputs {
            target,
            avoid: latest.fresh(t),
            altitude: state.position.z,
        };
        let (next, cmd) = step_mission(&mission, &inputs, &scene, &cfg.mission, GUIDANCE_DT)?;
        let entered = describe(&next.phase);
        if entered != describe(&mission.phase) {
            report.phases.push(PhaseChange {
                t,
                phase: entered,
            });
        }
        mission = next;
        let v_body = cmd.velocity.linear();
        let v_ref = body_to_world(&Vector3::new(v_body.x, v_body.y, 0.0), yaw) + Vector3::z() * v_body.z;
        let wz_ref = cmd.velocity.wz;

        report.trajectory.push(TrajectoryRow {
            t,
            x: state.position.x,
            y: state.position.y,
            z: state.position.z,
        });
        report.velocity.push(VelocityRow {
            t,
            reference: v_ref.into(),
            actual: state.velocity.into(),
        });
        report.yawrate.push(YawRateRow {
            t,
            wz_ref,
            wz: state.omega.z,
        });
        report.end_time = t;

        if collided {
            break 'run Outcome::Collision;
        }
        match mission.phase {
            Phase::Done => break 'run Outcome::Done,
            Phase::Failed(r) => break 'run Outcome::Failed(r),
            _ => {}
        }
        if t >= cfg.run.duration - 1e-9 {
            break 'run Outcome::Timeout;
        }

        for _ in 0..PHYSICS_STEPS_PER_GUIDANCE {
            let rotors = fc.update(&state, &v_ref, wz_ref);
            state = step_dynamics(&state, &rotors, &cfg.vehicle, fc.allocation(), RATE_LOOP_DT)?;
            if state.position.z < 0.0 {
                state.position.z = 0.0;
                state.velocity.z = state.velocity.z.max(0.0);
            }
            for (i, obstacle) in scene.obstacles.iter().enumerate() {
                let clearance = obstacle.surface_distance(&state.position) - HULL_RADIUS;
                let tr = &mut tracks[i];
                tr.min_clearance = tr.min_clearance.min(clearance);
                if clearance + HULL_RADIUS <= ENCOUNTER_RADIUS {
                    tr.entered = true;
                } else if tr.entered {
                    tr.left = true;
                }
                if clearance <= 0.0 {
                    collided = true;
                }
            }
        }
        tick += 1;
    };

    if let Some(p) = perception.take() {
        p.shutdown()?;
    }
    report.outcome = outcome;
    report.gates_passed = mission.gates_passed;
    report.tags_tracked = mission.tags_tracked;
    report.min_obstacle_clearance = tracks.iter().map(|t| t.min_clearance).reduce(f64::min);
    report.encounters = tracks
        .iter()
        .enumerate()
        .map(|(i, tr)| Encounter {
            obstacle: i,
            min_clearance: tr.min_clearance,
            passed: tr.entered && tr.min_clearance > 0.0 && (tr.left || outcome == Outcome::Done),
            commands: tr.commands,
        })
        .collect();
    Ok(report)
}
