//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero if any fail.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{Rotation3, Vector2, Vector3, Vector4};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use servosim::features::{centered_moments, feature_vector, DesiredFeatures, MomentSet};
use servosim::link::{
    decode_command, decode_frame, encode_command, encode_frame, FrameKind, FrameMessage, LatestCommand,
};
use servosim::mission::{
    step_mission, CommandSource, FailReason, ManeuverKind, MissionInputs, MissionParams, MissionState, Phase, TargetView,
};
use servosim::percept::{align_depth, obstacle_mask, AvoidCommandMsg, Direction};
use servosim::report::{export_report, Outcome, EXPORT_FILES};
use servosim::servo::{camera_to_body, feature_error, ibvs_velocity, ServoGains, VelocityCommand};
use servosim::simcam::{camera_to_body_mount, level_camera_pose, observe_tag, CameraIntrinsics, DepthMap};
use servosim::vehicle::{mixer, step_dynamics, Allocation, FlightController, LoopGains, QuadParams, QuadState, RATE_LOOP_DT};
use servosim::world::{bundled_scenario, SearchHint, TagSpec};
use servosim::{run_mission, MissionReport, RunConfig, SimOptions};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Check = Result<(), String>;

/// Name, check and runtime limit.
type Criterion = (&'static str, fn() -> Check, Option<Duration>);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_points(rng: &mut ChaCha8Rng) -> Vec<Vector2<f64>> {
    let n = rng.random_range(3..=12);
    (0..n).map(|_| Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4))).collect()
}

fn fronto_tag(center: Vector3<f64>, side: f64) -> TagSpec {
    TagSpec { id: 0, center, normal: -Vector3::x(), side, search_hint: SearchHint::Unknown }
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let pts = random_points(&mut rng);
        let d = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let shifted: Vec<_> = pts.iter().map(|p| p + d).collect();
        let (a, b) = (centered_moments(&pts).unwrap(), centered_moments(&shifted).unwrap());
        let worst = (a.mu20 - b.mu20).abs().max((a.mu02 - b.mu02).abs()).max((a.mu11 - b.mu11).abs());
        ensure!(worst <= 1e-12, "set {i}: centered moments moved by {worst:e} under translation");

        let s: f64 = rng.random_range(0.2..5.0);
        let m = MomentSet::from_points(&pts).unwrap();
        let g = Vector2::new(m.xg, m.yg);
        let scaled: Vec<_> = pts.iter().map(|p| g + (p - g) * s).collect();
        let ms = MomentSet::from_points(&scaled).unwrap();
        ensure!(
            (ms.a - s * s * m.a).abs() <= 1e-12 * (1.0 + s * s * m.a),
            "set {i}: area {} after scaling by {s}, expected {}",
            ms.a,
            s * s * m.a
        );
    }
    let intr = CameraIntrinsics::default();
    for (z_star, side) in [(1.0, 0.3), (0.8, 0.2), (1.5, 0.3), (2.0, 0.5)] {
        let des = DesiredFeatures::calibrate(z_star, side, &intr).map_err(|e| e.to_string())?;
        let pose = level_camera_pose(&Vector3::new(0.0, 0.0, 1.0), 0.0);
        let obs = observe_tag(&pose, &fronto_tag(Vector3::new(z_star, 0.0, 1.0), side), &intr, &[])
            .ok_or("tag not visible at the desired pose")?;
        let q = feature_vector(&obs, &intr, &des);
        ensure!((q.an - z_star).abs() <= 1e-6, "a_n = {} at z* = {z_star}", q.an);
    }
    Ok(())
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

fn oracle_fit(d: &[f64], r: &[f64]) -> (f64, f64) {
    let n = BigRational::from_integer(BigInt::from(d.len()));
    let (mut sx, mut sxx, mut sy, mut sxy) = (BigRational::zero(), BigRational::zero(), BigRational::zero(), BigRational::zero());
    for (&x, &y) in d.iter().zip(r) {
        let (x, y) = (exact(x), exact(y));
        sxx += &x * &x;
        sxy += &x * &y;
        sx += &x;
        sy += y;
    }
    let det = &sxx * &n - &sx * &sx;
    let s = (&sxy * &n - &sx * &sy) / &det;
    let t = (&sxx * &sy - &sx * &sxy) / &det;
    (s.to_f64().unwrap(), t.to_f64().unwrap())
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..1000 {
        let n = rng.random_range(2..200);
        let (s_true, t_true) = (rng.random_range(0.2..3.0), rng.random_range(-200.0..200.0));
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1023.0)).collect();
        let r: Vec<f64> = d.iter().map(|x| s_true * x + t_true + rng.random_range(-20.0..20.0)).collect();
        let fit = align_depth(&d, &r).map_err(|e| e.to_string())?;
        let (s, t) = oracle_fit(&d, &r);
        ensure!(rel_close(fit.s, s, 1e-9) && rel_close(fit.t, t, 1e-9), "instance {i}: ({}, {}) vs ({s}, {t})", fit.s, fit.t);
    }
    let d = [0.0, 1.0, 2.0, 3.0, 10.0, 250.0, 513.0];
    let r: Vec<f64> = d.iter().map(|x| 2.0 * x + 1.0).collect();
    let fit = align_depth(&d, &r).map_err(|e| e.to_string())?;
    ensure!((fit.s, fit.t) == (2.0, 1.0), "noiseless fit gave ({}, {})", fit.s, fit.t);
    Ok(())
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tau = 900.0;
    let mut exact_hits = 0;
    for i in 0..100 {
        let values: Vec<f64> = (0..64 * 48)
            .map(|_| match rng.random_range(0..4) {
                0 => tau,
                1 => tau + rng.random_range(-1.0..1.0),
                _ => rng.random_range(0.0..1023.0),
            })
            .collect();
        let mask = obstacle_mask(&DepthMap::new(64, 48, values.clone()), tau);
        for (j, &v) in values.iter().enumerate() {
            ensure!(mask.bits[j] == (v > tau), "map {i} pixel {j}: value {v}, mask {}", mask.bits[j]);
            exact_hits += usize::from(v == tau);
        }
    }
    ensure!(exact_hits > 0, "no pixel exactly at the threshold");
    Ok(())
}

fn criterion_4() -> Check {
    let intr = CameraIntrinsics::default();
    let des = DesiredFeatures::calibrate(1.0, 0.3, &intr).map_err(|e| e.to_string())?;
    let gains = ServoGains::with_lambda(Vector4::repeat(0.5)).map_err(|e| e.to_string())?;
    let mount = camera_to_body_mount();
    let tag = fronto_tag(Vector3::new(4.0, 0.0, 1.0), 0.3);
    let dt = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for run in 0..20 {
        let mut p = Vector3::new(rng.random_range(1.0..2.5), rng.random_range(-0.4..0.4), rng.random_range(0.8..1.2));
        let mut yaw = rng.random_range(-0.15..0.15);
        let mut prev = f64::INFINITY;
        for step in 0..=(15.0 / dt) as usize {
            let obs = observe_tag(&level_camera_pose(&p, yaw), &tag, &intr, &[])
                .ok_or(format!("run {run}: tag left the view at step {step}"))?;
            let q = feature_vector(&obs, &intr, &des);
            let e = feature_error(&q, &des).norm();
            ensure!(e <= prev + 1e-12, "run {run}: error rose at step {step}: {prev} -> {e}");
            prev = e;
            let v: VelocityCommand = camera_to_body(&ibvs_velocity(&q, &des, &gains).unwrap(), &mount).unwrap();
            p += Rotation3::from_axis_angle(&Vector3::z_axis(), yaw) * v.linear() * dt;
            yaw += v.wz * dt;
        }
        ensure!(prev < 0.05, "run {run}: final error {prev}");
    }
    Ok(())
}

fn oracle_wrench(rotors: &Vector4<f64>, params: &QuadParams) -> (f64, Vector3<f64>) {
    let d = params.arm / 2f64.sqrt();
    let layout = [
        (Vector3::new(d, -d, 0.0), -1.0),
        (Vector3::new(-d, d, 0.0), -1.0),
        (Vector3::new(d, d, 0.0), 1.0),
        (Vector3::new(-d, -d, 0.0), 1.0),
    ];
    let mut torque = Vector3::zeros();
    for ((r, spin), f) in layout.iter().zip(rotors.iter()) {
        torque += r.cross(&Vector3::new(0.0, 0.0, *f)) + Vector3::z() * (spin * params.k_q * f);
    }
    (rotors.sum(), torque)
}

fn criterion_5() -> Check {
    let params = QuadParams::default();
    let alloc = Allocation::new(&params);

    let start = QuadState::at_rest(Vector3::new(1.0, -2.0, 1.0), 0.7);
    let mut s = start;
    s.rotor_thrusts = Vector4::repeat(params.hover_thrust() / 4.0);
    let mut fc = FlightController::new(params, LoopGains::default(), s.yaw());
    let mut drift: f64 = 0.0;
    for _ in 0..(10.0 / RATE_LOOP_DT).round() as usize {
        let rotors = fc.update(&s, &Vector3::zeros(), 0.0);
        s = step_dynamics(&s, &rotors, &params, fc.allocation(), RATE_LOOP_DT).map_err(|e| e.to_string())?;
        drift = drift.max((s.position - start.position).norm());
    }
    ensure!(drift < 0.05, "hover drift {drift} m");

    let z0 = 10.0;
    let mut s = QuadState::at_rest(Vector3::new(0.0, 0.0, z0), 0.0);
    for _ in 0..500 {
        s = step_dynamics(&s, &Vector4::zeros(), &params, &alloc, 1e-3).map_err(|e| e.to_string())?;
    }
    let expected = z0 - 0.5 * params.gravity * 0.25;
    ensure!((s.position.z - expected).abs() < 1e-4, "free fall z {} vs {expected}", s.position.z);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hover = params.hover_thrust();
    for _ in 0..1000 {
        let thrust = rng.random_range(0.8..1.5) * hover;
        let torque = Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.005..0.005));
        let rotors = mixer(thrust, &torque, &params);
        if rotors.iter().any(|&f| f <= 0.0 || f >= params.max_rotor_thrust()) {
            continue;
        }
        let (t, tau) = oracle_wrench(&rotors, &params);
        ensure!((t - thrust).abs() < 1e-9 && (tau - torque).norm() < 1e-9, "mixer off by {} N, {} N m", t - thrust, (tau - torque).norm());
    }
    Ok(())
}

fn fig3_config(seed: u64, avoidance: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.scenario = "paper_fig3".into();
    cfg.run.seed = seed;
    cfg.run.avoidance = avoidance;
    cfg
}

fn run(cfg: &RunConfig, opts: &SimOptions) -> Result<MissionReport, String> {
    run_mission(cfg, opts).map_err(|e| e.to_string())
}

fn criterion_6() -> Check {
    let scene = bundled_scenario("paper_fig3").map_err(|e| e.to_string())?;
    for seed in SEEDS {
        let cfg = fig3_config(seed, true);
        ensure!(cfg.percept.rate_hz == 4.0, "perception rate {}", cfg.percept.rate_hz);
        let r = run(&cfg, &SimOptions::default())?;
        ensure!(r.outcome == Outcome::Done, "seed {seed}: {}", r.outcome);
        ensure!(r.gates_passed == 1, "seed {seed}: gates_passed {}", r.gates_passed);
        ensure!(r.encounters.len() == scene.obstacles.len(), "seed {seed}: {} encounters", r.encounters.len());
        for e in &r.encounters {
            ensure!(
                e.passed && e.min_clearance > 0.0 && e.commands >= 1,
                "seed {seed}: obstacle {} passed {} clearance {} commands {}",
                e.obstacle,
                e.passed,
                e.min_clearance,
                e.commands
            );
        }
        ensure!(r.min_obstacle_clearance.is_some_and(|c| c > 0.0), "seed {seed}: clearance {:?}", r.min_obstacle_clearance);
    }
    Ok(())
}

fn criterion_7() -> Check {
    for seed in SEEDS {
        let r = run(&fig3_config(seed, false), &SimOptions::default())?;
        ensure!(
            matches!(r.outcome, Outcome::Collision | Outcome::Failed(FailReason::TargetLost)),
            "seed {seed}: {}",
            r.outcome
        );
    }
    Ok(())
}

fn criterion_8() -> Check {
    let scene = bundled_scenario("paper_fig3").map_err(|e| e.to_string())?;
    let p = MissionParams::default();
    let dt = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let view = TargetView {
        features: DesiredFeatures::new(1.0, 0.02).q_star,
        error_norm: 0.3,
        servo: VelocityCommand::body(0.3, 0.0, 0.0, 0.0),
    };
    for trace in 0..10_000 {
        let kind = if rng.random_bool(0.5) { ManeuverKind::RightTurnForward } else { ManeuverKind::LeftTurnForward };
        let maneuver = p.maneuver(kind);
        let k = rng.random_range(0..scene.tags.len());
        let mut state = MissionState {
            phase: Phase::AvoidLocked { k, maneuver, elapsed: rng.random_range(0.0..maneuver.duration) },
            k,
            last_avoid_seq: Some(rng.random_range(0..50)),
            ..MissionState::new()
        };
        loop {
            let avoid = rng.random_bool(0.8).then(|| AvoidCommandMsg {
                direction: [Direction::Left, Direction::Right, Direction::Center][rng.random_range(0..3)],
                seq: rng.random_range(0..200),
                white_fraction: rng.random_range(0.0..1.0),
            });
            let target = rng.random_bool(0.5).then_some(view);
            let inputs = MissionInputs { target, avoid, altitude: rng.random_range(0.0..3.0) };
            let (next, cmd) = step_mission(&state, &inputs, &scene, &p, dt).map_err(|e| e.to_string())?;
            match next.phase {
                Phase::AvoidLocked { maneuver: m, .. } => {
                    ensure!(m.kind == kind, "trace {trace}: maneuver changed from {kind:?} to {:?}", m.kind);
                    ensure!(cmd.source == CommandSource::Avoid, "trace {trace}: command from {:?}", cmd.source);
                    state = next;
                }
                Phase::Track(j) if j == k => break,
                other => return Err(format!("trace {trace}: lock released into {other:?}")),
            }
        }
    }
    Ok(())
}

fn criterion_9() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..10_000 {
        let (w, h) = (rng.random_range(0..24u16), rng.random_range(0..24u16));
        let frame = FrameMessage {
            seq: rng.next_u32(),
            timestamp_us: rng.next_u64(),
            width: w,
            height: h,
            kind: if rng.random_bool(0.5) { FrameKind::PseudoDepth } else { FrameKind::Reference },
            samples: (0..w as usize * h as usize).map(|_| rng.random()).collect(),
        };
        ensure!(decode_frame(&encode_frame(&frame)).ok().as_ref() == Some(&frame), "frame {i} did not round-trip");
        let cmd = AvoidCommandMsg {
            direction: [Direction::Left, Direction::Right, Direction::Center][rng.random_range(0..3)],
            seq: rng.next_u32(),
            white_fraction: rng.random_range(0..=10_000) as f64 / 10_000.0,
        };
        ensure!(decode_command(&encode_command(&cmd)).ok() == Some(cmd), "command {i} did not round-trip");
    }

    let msg = |seq| AvoidCommandMsg { direction: Direction::Left, seq, white_fraction: 0.1 };
    let mut slot = LatestCommand::new(0.6);
    slot.offer(msg(1), 0.0);
    slot.offer(msg(3), 0.1);
    ensure!(!slot.offer(msg(2), 0.2), "older command replaced a newer one");
    ensure!(slot.fresh(0.2).map(|m| m.seq) == Some(3), "latest-wins failed");
    ensure!(slot.fresh(0.7).is_some(), "command stale before 0.6 s");
    ensure!(slot.fresh(0.8).is_none(), "command still fresh after 0.6 s");

    let single = run(&fig3_config(1, true), &SimOptions::default())?;
    let mut cfg = fig3_config(1, true);
    cfg.run.two_process = true;
    let opts = SimOptions { perception_exe: Some(PathBuf::from(env!("CARGO_BIN_EXE_servosim-percept"))), frame_log: None };
    let double = run(&cfg, &opts)?;
    ensure!(single.summary() == double.summary(), "summaries differ:\n{}\n---\n{}", single.summary(), double.summary());
    Ok(())
}

fn criterion_10() -> Check {
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for dir in &dirs {
        let r = run(&fig3_config(1, true), &SimOptions::default())?;
        export_report(&r, dir.path()).map_err(|e| e.to_string())?;
    }
    for name in EXPORT_FILES.iter().filter(|n| n.ends_with(".csv")) {
        let a = std::fs::read(dirs[0].path().join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(name)).map_err(|e| e.to_string())?;
        ensure!(a == b, "{name} differs between runs");
    }
    Ok(())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("moments and features", criterion_1, Some(Duration::from_secs(5))),
        ("depth alignment oracle", criterion_2, Some(Duration::from_secs(5))),
        ("obstacle mask oracle", criterion_3, Some(Duration::from_secs(2))),
        ("kinematic IBVS convergence", criterion_4, Some(Duration::from_secs(10))),
        ("closed-loop dynamics", criterion_5, Some(Duration::from_secs(30))),
        ("fig3 scenario with avoidance", criterion_6, Some(Duration::from_secs(120))),
        ("fig3 scenario without avoidance", criterion_7, Some(Duration::from_secs(120))),
        ("avoidance lock", criterion_8, Some(Duration::from_secs(5))),
        ("protocol", criterion_9, Some(Duration::from_secs(60))),
        ("determinism", criterion_10, None),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let mut result = check();
        let took = start.elapsed();
        if let (Ok(()), Some(limit)) = (&result, limit) {
            if took > limit {
                result = Err(format!("took {took:.2?}, limit {limit:?}"));
            }
        }
        match result {
            Ok(()) => println!("PASS criterion {} ({name}) in {took:.2?}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} ({name}) in {took:.2?}: {why}", i + 1);
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
