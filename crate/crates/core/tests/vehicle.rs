use nalgebra::{UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use servosim::vehicle::{
    mixer, step_dynamics, Allocation, FlightController, LoopGains, QuadParams, QuadState, RATE_LOOP_DT,
};

/// Wrench from rotor thrusts built directly from rotor positions and spin
/// directions: torque = r x (0, 0, f) plus the drag reaction.
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

#[test]
fn mixer_reproduces_requested_wrench() {
    let params = QuadParams::default();
    let alloc = Allocation::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let hover = params.hover_thrust();
    let mut checked = 0;
    for _ in 0..2000 {
        let thrust = rng.random_range(0.5..2.0) * hover;
        let torque = Vector3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.05..0.05),
        );
        let raw = alloc.solve(thrust, &torque);
        let (t, tau) = oracle_wrench(&raw, &params);
        assert!((t - thrust).abs() < 1e-9 && (tau - torque).norm() < 1e-9);
        if raw.iter().all(|&f| f >= 0.0 && f <= params.max_rotor_thrust()) {
            let rotors = mixer(thrust, &torque, &params);
            let (t, tau) = oracle_wrench(&rotors, &params);
            assert!((t - thrust).abs() < 1e-9 && (tau - torque).norm() < 1e-9);
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

#[test]
fn saturated_mix_gives_up_yaw_first() {
    let params = QuadParams::default();
    let max = params.max_rotor_thrust();
    let rotors = mixer(params.max_total_thrust() * 0.95, &Vector3::new(0.0, 0.0, 0.3), &params);
    assert!(rotors.iter().all(|&f| (0.0..=max).contains(&f)));
    let (t, tau) = oracle_wrench(&rotors, &params);
    assert!((t - params.max_total_thrust() * 0.95).abs() < 1e-9);
    assert!(tau.x.abs() < 1e-9 && tau.y.abs() < 1e-9);
    assert!(tau.z > 0.0 && tau.z < 0.3);
}

#[test]
fn free_fall_matches_closed_form() {
    let params = QuadParams::default();
    let alloc = Allocation::new(&params);
    let z0 = 10.0;
    let mut s = QuadState::at_rest(Vector3::new(0.0, 0.0, z0), 0.0);
    for _ in 0..500 {
        s = step_dynamics(&s, &Vector4::zeros(), &params, &alloc, 1e-3).unwrap();
    }
    let t = 0.5;
    assert!((s.position.z - (z0 - 0.5 * params.gravity * t * t)).abs() < 1e-4);
    assert!((s.velocity.z + params.gravity * t).abs() < 1e-9);
}

#[test]
fn unpowered_flight_gains_no_energy() {
    let params = QuadParams::default();
    let alloc = Allocation::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for _ in 0..20 {
        let mut s = QuadState::at_rest(Vector3::new(0.0, 0.0, 50.0), rng.random_range(-3.0..3.0));
        s.velocity = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
        s.omega = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let mut e = s.energy(&params);
        for _ in 0..2000 {
            s = step_dynamics(&s, &Vector4::zeros(), &params, &alloc, 1e-3).unwrap();
            let next = s.energy(&params);
            assert!(next - e <= 1e-6, "energy rose by {}", next - e);
            e = next;
        }
    }
}

#[test]
fn attitude_stays_normalized_over_a_million_steps() {
    let params = QuadParams::default();
    let alloc = Allocation::new(&params);
    let mut s = QuadState::at_rest(Vector3::zeros(), 0.3);
    s.omega = Vector3::new(1.3, -0.7, 2.1);
    let hover = Vector4::repeat(params.hover_thrust() / 4.0);
    let mut worst: f64 = 0.0;
    for _ in 0..1_000_000 {
        s = step_dynamics(&s, &hover, &params, &alloc, 1e-3).unwrap();
        worst = worst.max((s.attitude.coords.norm() - 1.0).abs());
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn bad_inputs_are_rejected() {
    let params = QuadParams::default();
    let alloc = Allocation::new(&params);
    let s = QuadState::at_rest(Vector3::zeros(), 0.0);
    assert!(step_dynamics(&s, &Vector4::zeros(), &params, &alloc, 0.0).is_err());
    assert!(step_dynamics(&s, &Vector4::repeat(f64::NAN), &params, &alloc, 1e-3).is_err());
    assert!(QuadParams { mass: -1.0, ..params }.validate().is_err());
}

fn fly(v_ref: Vector3<f64>, yaw_rate: f64, seconds: f64, start: QuadState) -> Vec<QuadState> {
    let params = QuadParams::default();
    let mut fc = FlightController::new(params, LoopGains::default(), start.yaw());
    let mut s = start;
    let mut out = vec![s];
    for _ in 0..(seconds / RATE_LOOP_DT).round() as usize {
        let rotors = fc.update(&s, &v_ref, yaw_rate);
        s = step_dynamics(&s, &rotors, &params, fc.allocation(), RATE_LOOP_DT).unwrap();
        out.push(s);
    }
    out
}

#[test]
fn closed_loop_hover_holds_position() {
    let start = QuadState::at_rest(Vector3::new(1.0, -2.0, 1.0), 0.7);
    let mut s = start;
    s.rotor_thrusts = Vector4::repeat(QuadParams::default().hover_thrust() / 4.0);
    let trace = fly(Vector3::zeros(), 0.0, 10.0, s);
    let drift = trace.iter().map(|s| (s.position - start.position).norm()).fold(0.0, f64::max);
    assert!(drift < 0.05, "{drift}");
}

#[test]
fn closed_loop_tracks_velocity_and_yaw_rate() {
    let start = QuadState::at_rest(Vector3::new(0.0, 0.0, 1.0), 0.0);
    let v_ref = Vector3::new(0.8, -0.4, 0.2);
    let trace = fly(v_ref, 0.5, 4.0, start);
    let end = trace.last().unwrap();
    assert!((end.velocity - v_ref).norm() < 0.05, "{:?}", end.velocity);
    assert!((end.omega.z - 0.5).abs() < 0.05, "{}", end.omega.z);
    let (_, _, yaw) = end.attitude.euler_angles();
    assert!((UnitQuaternion::from_euler_angles(0.0, 0.0, yaw).angle_to(&UnitQuaternion::from_euler_angles(0.0, 0.0, 2.0))) < 0.1);
}
