//! Switching law: takeoff, tag tracking, open-loop gate crossing, target
//! search and locked avoidance maneuvers.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureVec;
use crate::percept::{AvoidCommandMsg, Direction};
use crate::servo::VelocityCommand;
use crate::world::{SearchHint, WorldScene};

#[derive(Debug, Error, PartialEq)]
pub enum MissionError {
    #[error("mission parameter {0} is out of range")]
    BadParam(&'static str),
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateLeg {
    Up,
    Forward,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailReason {
    /// The sweep for a target that was never seen ran out.
    SearchTimeout,
    /// A tracked target disappeared and could not be found again.
    TargetLost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ManeuverKind {
    RightTurnForward,
    LeftTurnForward,
    HoldForward,
}

impl ManeuverKind {
    /// Maneuver that steers away from an obstacle reported on `side`.
    pub fn away_from(side: Direction) -> Option<Self> {
        match side {
            Direction::Left => Some(Self::RightTurnForward),
            Direction::Right => Some(Self::LeftTurnForward),
            Direction::Center => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvoidManeuver {
    pub kind: ManeuverKind,
    pub duration: f64,
    pub yaw_rate: f64,
    pub forward_speed: f64,
    /// Share of the duration spent turning before flying forward.
    pub turn_fraction: f64,
}

impl AvoidManeuver {
    /// Body-frame command `elapsed` seconds into the maneuver.
    pub fn command_at(&self, elapsed: f64) -> VelocityCommand {
        let turning = elapsed < self.turn_fraction * self.duration;
        let wz = match (self.kind, turning) {
            (ManeuverKind::RightTurnForward, true) => -self.yaw_rate,
            (ManeuverKind::LeftTurnForward, true) => self.yaw_rate,
            _ => 0.0,
        };
        let vx = if turning && self.kind != ManeuverKind::HoldForward {
            0.0
        } else {
            self.forward_speed
        };
        VelocityCommand::body(vx, 0.0, 0.0, wz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Phase {
    Takeoff,
    Track(usize),
    CrossGate(usize, GateLeg),
    Search(usize),
    AvoidLocked {
        k: usize,
        maneuver: AvoidManeuver,
        elapsed: f64,
    },
    Done,
    Failed(FailReason),
}

impl Phase {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Phase::Done | Phase::Failed(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Phase::Takeoff => "Takeoff",
            Phase::Track(_) => "Track",
            Phase::CrossGate(..) => "CrossGate",
            Phase::Search(_) => "Search",
            Phase::AvoidLocked { .. } => "AvoidLocked",
            Phase::Done => "Done",
            Phase::Failed(_) => "Failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissionState {
    pub phase: Phase,
    /// Current target index.
    pub k: usize,
    pub consec_hits: u32,
    pub search_yaw_accum: f64,
    pub search_elapsed: f64,
    /// Time the current target has been out of view while tracking.
    pub lost_time: f64,
    /// Whether the current search started from losing a tracked target.
    pub searching_after_loss: bool,
    /// Distance covered on the current gate leg.
    pub leg_progress: f64,
    /// Newest avoidance message already acted on or discarded under lock.
    pub last_avoid_seq: Option<u32>,
    pub gates_passed: u32,
    pub tags_tracked: u32,
}

impl Default for MissionState {
    fn default() -> Self {
        Self::new()
    }
}

impl MissionState {
    pub fn new() -> Self {
        Self {
            phase: Phase::Takeoff,
            k: 0,
            consec_hits: 0,
            search_yaw_accum: 0.0,
            search_elapsed: 0.0,
            lost_time: 0.0,
            searching_after_loss: false,
            leg_progress: 0.0,
            last_avoid_seq: None,
            gates_passed: 0,
            tags_tracked: 0,
        }
    }

    fn enter(&mut self, phase: Phase) {
        match phase {
            Phase::Track(_) => {
                self.consec_hits = 0;
                self.lost_time = 0.0;
            }
            Phase::Search(_) => {
                self.search_yaw_accum = 0.0;
                self.search_elapsed = 0.0;
            }
            Phase::CrossGate(..) => self.leg_progress = 0.0,
            _ => {}
        }
        self.phase = phase;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CommandSource {
    Takeoff,
    Servo,
    Gate,
    Search,
    Avoid,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManeuverCmd {
    /// Body-frame velocity and yaw rate.
    pub velocity: VelocityCommand,
    pub source: CommandSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissionParams {
    /// Feature-error norm counted as converged.
    pub eps_track: f64,
    pub n_hold: u32,
    pub t_lost: f64,
    pub search_yaw_rate: f64,
    pub search_climb_rate: f64,
    /// Extra time allowed after a full sweep before giving up.
    pub search_timeout: f64,
    /// Vertical search keeps within this altitude band.
    pub search_alt_min: f64,
    pub search_alt_max: f64,
    pub climb_rate: f64,
    pub gate_speed: f64,
    /// Standoff the servo converges to; the gate forward leg adds it.
    pub z_star: f64,
    pub avoid_duration: f64,
    pub avoid_yaw_rate: f64,
    pub avoid_speed: f64,
    pub avoid_turn_fraction: f64,
    pub area_min: f64,
    pub altitude_tolerance: f64,
    pub v_max: f64,
    pub w_max: f64,
}

impl Default for MissionParams {
    fn default() -> Self {
        Self {
            eps_track: 0.10,
            n_hold: 10,
            t_lost: 1.0,
            search_yaw_rate: 0.5,
            search_climb_rate: 0.3,
            search_timeout: 5.0,
            search_alt_min: 0.4,
            search_alt_max: 2.5,
            climb_rate: 0.4,
            gate_speed: 0.5,
            z_star: 1.0,
            avoid_duration: 2.5,
            avoid_yaw_rate: 0.7,
            avoid_speed: 0.69,
            avoid_turn_fraction: 0.4,
            area_min: 0.05,
            altitude_tolerance: 0.05,
            v_max: 1.0,
            w_max: 1.0,
        }
    }
}

impl MissionParams {
    pub fn validate(&self) -> Result<(), MissionError> {
        let positive = [
            (self.eps_track, "eps_track"),
            (self.t_lost, "t_lost"),
            (self.search_yaw_rate, "search_yaw_rate"),
            (self.search_climb_rate, "search_climb_rate"),
            (self.climb_rate, "climb_rate"),
            (self.gate_speed, "gate_speed"),
            (self.z_star, "z_star"),
            (self.avoid_duration, "avoid_duration"),
            (self.altitude_tolerance, "altitude_tolerance"),
            (self.v_max, "v_max"),
            (self.w_max, "w_max"),
        ];
        for (v, name) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MissionError::BadParam(name));
            }
        }
        if self.n_hold == 0 {
            return Err(MissionError::BadParam("n_hold"));
        }
        if !(self.search_timeout >= 0.0) {
            return Err(MissionError::BadParam("search_timeout"));
        }
        if !(self.avoid_yaw_rate >= 0.0 && self.avoid_speed >= 0.0) {
            return Err(MissionError::BadParam("avoid"));
        }
        if !(0.0..=1.0).contains(&self.avoid_turn_fraction) {
            return Err(MissionError::BadParam("avoid_turn_fraction"));
        }
        if !(0.0..=1.0).contains(&self.area_min) {
            return Err(MissionError::BadParam("area_min"));
        }
        if !(self.search_alt_min < self.search_alt_max) {
            return Err(MissionError::BadParam("search_alt_min"));
        }
        Ok(())
    }

    /// Upper bound on the time any search can last.
    pub fn search_budget(&self) -> f64 {
        TAU / self.search_yaw_rate + self.search_timeout
    }

    pub fn maneuver(&self, kind: ManeuverKind) -> AvoidManeuver {
        AvoidManeuver {
            kind,
            duration: self.avoid_duration,
            yaw_rate: self.avoid_yaw_rate,
            forward_speed: self.avoid_speed,
            turn_fraction: self.avoid_turn_fraction,
        }
    }
}

/// What the tracker sees of the current target this step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetView {
    pub features: FeatureVec,
    /// Norm of the feature error `q - q*`.
    pub error_norm: f64,
    /// Servo output, already in the body frame.
    pub servo: VelocityCommand,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MissionInputs {
    pub target: Option<TargetView>,
    /// Newest avoidance message still inside its staleness window.
    pub avoid: Option<AvoidCommandMsg>,
    pub altitude: f64,
}

/// Search velocity for a hint. Unknown sweeps left; the caller tracks the
/// swept angle.
pub fn search_command(hint: SearchHint, params: &MissionParams) -> VelocityCommand {
    let (vz, wz) = match hint {
        SearchHint::Left | SearchHint::Unknown => (0.0, params.search_yaw_rate),
        SearchHint::Right => (0.0, -params.search_yaw_rate),
        SearchHint::Up => (params.search_climb_rate, 0.0),
        SearchHint::Down => (-params.search_climb_rate, 0.0),
    };
    VelocityCommand::body(0.0, 0.0, vz, wz)
}

fn hold() -> ManeuverCmd {
    ManeuverCmd {
        velocity: VelocityCommand::body(0.0, 0.0, 0.0, 0.0),
        source: CommandSource::Hold,
    }
}

fn cmd(velocity: VelocityCommand, source: CommandSource) -> ManeuverCmd {
    ManeuverCmd { velocity, source }
}

fn triggering(avoid: Option<AvoidCommandMsg>, last_seq: Option<u32>, params: &MissionParams) -> Option<(ManeuverKind, u32)> {
    let msg = avoid?;
    if last_seq.is_some_and(|s| msg.seq <= s) || msg.white_fraction < params.area_min {
        return None;
    }
    ManeuverKind::away_from(msg.direction).map(|k| (k, msg.seq))
}

/// Advances the mission by one guidance step and returns the command to fly.
pub fn step_mission(
    state: &MissionState,
    inputs: &MissionInputs,
    scene: &WorldScene,
    params: &MissionParams,
    dt: f64,
) -> Result<(MissionState, ManeuverCmd), MissionError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(MissionError::BadTimeStep(dt));
    }
    let mut s = *state;
    let n = scene.last_index();
    let out = match state.phase {
        Phase::Done | Phase::Failed(_) => hold(),
        Phase::Takeoff => {
            if inputs.altitude >= scene.cruise_altitude - params.altitude_tolerance {
                s.k = 0;
                if inputs.target.is_some() {
                    s.enter(Phase::Track(0));
                } else {
                    s.searching_after_loss = false;
                    s.enter(Phase::Search(0));
                }
                hold()
            } else {
                cmd(VelocityCommand::body(0.0, 0.0, params.climb_rate, 0.0), CommandSource::Takeoff)
            }
        }
        Phase::Track(k) => {
            if let Some((kind, seq)) = triggering(inputs.avoid, s.last_avoid_seq, params) {
                s.last_avoid_seq = Some(seq);
                let maneuver = params.maneuver(kind);
                s.enter(Phase::AvoidLocked { k, maneuver, elapsed: 0.0 });
                cmd(maneuver.command_at(0.0), CommandSource::Avoid)
            } else if let Some(view) = inputs.target {
                s.lost_time = 0.0;
                if view.error_norm < params.eps_track {
                    s.consec_hits += 1;
                } else {
                    s.consec_hits = 0;
                }
                if s.consec_hits >= params.n_hold {
                    s.tags_tracked += 1;
                    let tag_id = scene.tags[k].id;
                    if scene.gate_for(tag_id).is_some() {
                        s.enter(Phase::CrossGate(k, GateLeg::Up));
                    } else {
                        advance(&mut s, k, n);
                    }
                    hold()
                } else {
                    cmd(view.servo.saturate(params.v_max, params.w_max), CommandSource::Servo)
                }
            } else {
                s.consec_hits = 0;
                s.lost_time += dt;
                if s.lost_time >= params.t_lost {
                    s.searching_after_loss = true;
                    s.enter(Phase::Search(k));
                }
                hold()
            }
        }
        Phase::CrossGate(k, leg) => {
            let gate = scene.gate_for(scene.tags[k].id).expect("gate crossing needs a gate");
            match leg {
                GateLeg::Up => {
                    if inputs.altitude >= gate.center.z - params.altitude_tolerance {
                        s.enter(Phase::CrossGate(k, GateLeg::Forward));
                        hold()
                    } else {
                        cmd(VelocityCommand::body(0.0, 0.0, params.climb_rate, 0.0), CommandSource::Gate)
                    }
                }
                GateLeg::Forward => {
                    let distance = params.z_star + gate.pass_clearance;
                    if s.leg_progress >= distance {
                        s.enter(Phase::CrossGate(k, GateLeg::Down));
                        hold()
                    } else {
                        s.leg_progress += params.gate_speed * dt;
                        cmd(VelocityCommand::body(params.gate_speed, 0.0, 0.0, 0.0), CommandSource::Gate)
                    }
                }
                GateLeg::Down => {
                    if inputs.altitude <= scene.cruise_altitude + params.altitude_tolerance {
                        s.gates_passed += 1;
                        advance(&mut s, k, n);
                        hold()
                    } else {
                        cmd(VelocityCommand::body(0.0, 0.0, -params.climb_rate, 0.0), CommandSource::Gate)
                    }
                }
            }
        }
        Phase::Search(k) => {
            if inputs.target.is_some() {
                s.searching_after_loss = false;
                s.enter(Phase::Track(k));
                hold()
            } else if s.search_elapsed >= params.search_budget() {
                let reason = if s.searching_after_loss {
                    FailReason::TargetLost
                } else {
                    FailReason::SearchTimeout
                };
                s.enter(Phase::Failed(reason));
                hold()
            } else {
                s.search_elapsed += dt;
                let hint = scene.tags[k].search_hint;
                let mut v = search_command(hint, params);
                if hint == SearchHint::Unknown && s.search_yaw_accum >= TAU {
                    v.wz = 0.0;
                }
                let alt = inputs.altitude;
                if (v.vz > 0.0 && alt >= params.search_alt_max) || (v.vz < 0.0 && alt <= params.search_alt_min) {
                    v.vz = 0.0;
                }
                s.search_yaw_accum = (s.search_yaw_accum + v.wz.abs() * dt).min(TAU + params.search_yaw_rate * dt);
                cmd(v, CommandSource::Search)
            }
        }
        Phase::AvoidLocked { k, maneuver, elapsed } => {
            let elapsed = elapsed + dt;
            if elapsed >= maneuver.duration {
                // Messages that arrived under lock are discarded on release.
                if let Some(m) = inputs.avoid {
                    s.last_avoid_seq = Some(s.last_avoid_seq.map_or(m.seq, |l| l.max(m.seq)));
                }
                s.enter(Phase::Track(k));
                hold()
            } else {
                s.phase = Phase::AvoidLocked { k, maneuver, elapsed };
                cmd(maneuver.command_at(elapsed), CommandSource::Avoid)
            }
        }
    };
    Ok((s, out))
}

fn advance(s: &mut MissionState, k: usize, n: usize) {
    if k < n {
        s.k = k + 1;
        s.searching_after_loss = false;
        s.enter(Phase::Search(k + 1));
    } else {
        s.enter(Phase::Done);
    }
}
