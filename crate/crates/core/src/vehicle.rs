//! Quadrotor rigid-body model and the three cascaded control loops
//! (velocity -> attitude -> rate) with an X-configuration mixer.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error, PartialEq)]
pub enum VehicleError {
    #[error("time step {0} outside (0, 0.01] s")]
    BadTimeStep(f64),
    #[error("vehicle state is not finite")]
    NonFinite,
    #[error("vehicle parameter {0} must be positive")]
    BadParam(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadParams {
    pub mass: f64,
    pub arm: f64,
    pub thrust_to_weight: f64,
    /// Diagonal of the inertia tensor, kg m^2.
    pub inertia: Vector3<f64>,
    /// Rotor drag torque per unit thrust, m.
    pub k_q: f64,
    pub gravity: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 1.1485,
            arm: 0.155,
            thrust_to_weight: 4.0,
            inertia: Vector3::new(0.015, 0.015, 0.025),
            k_q: 0.016,
            gravity: GRAVITY,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let checks = [
            (self.mass, "mass"),
            (self.arm, "arm"),
            (self.thrust_to_weight, "thrust_to_weight"),
            (self.k_q, "k_q"),
            (self.gravity, "gravity"),
            (self.inertia.min(), "inertia"),
        ];
        for (v, name) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(VehicleError::BadParam(name));
            }
        }
        Ok(())
    }

    pub fn max_total_thrust(&self) -> f64 {
        self.thrust_to_weight * self.mass * self.gravity
    }

    pub fn max_rotor_thrust(&self) -> f64 {
        self.max_total_thrust() / 4.0
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
    /// Body angular rate, rad/s.
    pub omega: Vector3<f64>,
    pub rotor_thrusts: Vector4<f64>,
}

impl QuadState {
    pub fn at_rest(position: Vector3<f64>, yaw: f64) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            attitude: UnitQuaternion::from_euler_angles(0.0, 0.0, yaw),
            omega: Vector3::zeros(),
            rotor_thrusts: Vector4::zeros(),
        }
    }

    pub fn yaw(&self) -> f64 {
        self.attitude.euler_angles().2
    }

    fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.attitude.coords.iter().all(|v| v.is_finite())
            && self.omega.iter().all(|v| v.is_finite())
    }

    /// Kinetic plus potential energy, J.
    pub fn energy(&self, params: &QuadParams) -> f64 {
        let rot = 0.5 * self.omega.dot(&params.inertia.component_mul(&self.omega));
        0.5 * params.mass * self.velocity.norm_squared() + params.mass * params.gravity * self.position.z + rot
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopGains {
    pub vel_kp: Vector3<f64>,
    pub vel_ki: Vector3<f64>,
    /// Bound on the velocity integral state, per axis (m).
    pub vel_i_clamp: Vector3<f64>,
    pub att_kp: Vector3<f64>,
    pub rate_kp: Vector3<f64>,
    pub rate_ki: Vector3<f64>,
    pub rate_kd: Vector3<f64>,
    /// Bound on the rate integral state, per axis (rad).
    pub rate_i_clamp: Vector3<f64>,
}

impl Default for LoopGains {
    fn default() -> Self {
        Self {
            vel_kp: Vector3::new(2.5, 2.5, 3.0),
            vel_ki: Vector3::new(0.4, 0.4, 0.8),
            vel_i_clamp: Vector3::new(1.0, 1.0, 1.0),
            att_kp: Vector3::new(7.0, 7.0, 3.0),
            rate_kp: Vector3::new(0.25, 0.25, 0.2),
            rate_ki: Vector3::new(0.05, 0.05, 0.05),
            rate_kd: Vector3::new(0.002, 0.002, 0.0),
            rate_i_clamp: Vector3::new(0.5, 0.5, 0.5),
        }
    }
}

impl LoopGains {
    pub fn validate(&self) -> Result<(), VehicleError> {
        for (v, name) in [
            (self.vel_kp.min(), "vel_kp"),
            (self.att_kp.min(), "att_kp"),
            (self.rate_kp.min(), "rate_kp"),
        ] {
            if !(v > 0.0) {
                return Err(VehicleError::BadParam(name));
            }
        }
        let all_finite = [self.vel_ki, self.vel_i_clamp, self.rate_ki, self.rate_kd, self.rate_i_clamp]
            .iter()
            .all(|v| v.iter().all(|c| c.is_finite()));
        if !all_finite {
            return Err(VehicleError::BadParam("integral clamp"));
        }
        Ok(())
    }
}

/// Integrator state of the velocity PI loop.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PiState {
    pub integral: Vector3<f64>,
}

/// Integrator and derivative history of the rate PID loop.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PidState {
    pub integral: Vector3<f64>,
    pub prev_measurement: Option<Vector3<f64>>,
}

fn clamp_vec(v: Vector3<f64>, bound: &Vector3<f64>) -> Vector3<f64> {
    Vector3::from_fn(|i, _| v[i].clamp(-bound[i], bound[i]))
}

/// Velocity PI loop with gravity feedforward; returns the commanded
/// acceleration in world frame.
pub fn velocity_loop(
    v_ref: &Vector3<f64>,
    v: &Vector3<f64>,
    gains: &LoopGains,
    state: &mut PiState,
    dt: f64,
    gravity: f64,
) -> Vector3<f64> {
    let err = v_ref - v;
    state.integral = clamp_vec(state.integral + err * dt, &gains.vel_i_clamp);
    gains.vel_kp.component_mul(&err) + gains.vel_ki.component_mul(&state.integral) + Vector3::z() * gravity
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttitudeSetpoint {
    pub attitude: UnitQuaternion<f64>,
    pub thrust: f64,
}

/// Thrust magnitude and the attitude whose body z axis points along the
/// commanded acceleration with the requested heading. `None` when the
/// acceleration is too small to define a direction.
pub fn accel_to_attitude(accel: &Vector3<f64>, yaw_ref: f64, params: &QuadParams) -> Option<AttitudeSetpoint> {
    let norm = accel.norm();
    if !(norm > 0.1) {
        return None;
    }
    let b3 = accel / norm;
    let heading = Vector3::new(yaw_ref.cos(), yaw_ref.sin(), 0.0);
    let mut b2 = b3.cross(&heading);
    if b2.norm() < 1e-9 {
        // Thrust along the heading: fall back to the lateral axis.
        b2 = b3.cross(&Vector3::new(-yaw_ref.sin(), yaw_ref.cos(), 0.0)).cross(&b3);
    }
    let b2 = b2.normalize();
    let b1 = b2.cross(&b3);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[b1, b2, b3]));
    Some(AttitudeSetpoint {
        attitude: UnitQuaternion::from_rotation_matrix(&rot),
        thrust: (params.mass * norm).min(params.max_total_thrust()),
    })
}

/// Proportional attitude loop on the shortest-rotation error, plus the yaw
/// rate feedforward.
pub fn attitude_loop(
    q_cmd: &UnitQuaternion<f64>,
    q: &UnitQuaternion<f64>,
    yaw_rate_ff: f64,
    gains: &LoopGains,
) -> Vector3<f64> {
    let mut err = q.inverse() * q_cmd;
    if err.w < 0.0 {
        err = UnitQuaternion::new_unchecked(-err.into_inner());
    }
    gains.att_kp.component_mul(&err.scaled_axis()) + Vector3::z() * yaw_rate_ff
}

/// Rate PID with derivative on measurement. Returns body torque, N m.
pub fn rate_loop_pid(
    rate_cmd: &Vector3<f64>,
    omega: &Vector3<f64>,
    gains: &LoopGains,
    state: &mut PidState,
    dt: f64,
) -> Vector3<f64> {
    let err = rate_cmd - omega;
    state.integral = clamp_vec(state.integral + err * dt, &gains.rate_i_clamp);
    let deriv = state.prev_measurement.map_or(Vector3::zeros(), |prev| (omega - prev) / dt);
    state.prev_measurement = Some(*omega);
    gains.rate_kp.component_mul(&err) + gains.rate_ki.component_mul(&state.integral) - gains.rate_kd.component_mul(&deriv)
}

/// Maps rotor thrusts to (total thrust, roll, pitch, yaw torque).
///
/// Rotor layout, viewed from above with x forward:
///
/// ```text
///   2     0        0: front-right, CCW
///     \ /          1: rear-left,   CCW
///     / \          2: front-left,  CW
///   1     3        3: rear-right,  CW
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    forward: Matrix4<f64>,
    inverse: Matrix4<f64>,
    max_rotor: f64,
}

impl Allocation {
    pub fn new(params: &QuadParams) -> Self {
        let d = params.arm / std::f64::consts::SQRT_2;
        let k = params.k_q;
        #[rustfmt::skip]
        let forward = Matrix4::new(
            1.0, 1.0, 1.0, 1.0,
            -d,   d,   d,  -d,
            -d,   d,  -d,   d,
            -k,  -k,   k,   k,
        );
        let inverse = forward.try_inverse().expect("X allocation is invertible");
        Self {
            forward,
            inverse,
            max_rotor: params.max_rotor_thrust(),
        }
    }

    pub fn forward(&self, rotors: &Vector4<f64>) -> (f64, Vector3<f64>) {
        let w = self.forward * rotors;
        (w[0], Vector3::new(w[1], w[2], w[3]))
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.forward
    }

    /// Unclamped rotor thrusts for the requested wrench.
    pub fn solve(&self, thrust: f64, torque: &Vector3<f64>) -> Vector4<f64> {
        self.inverse * Vector4::new(thrust, torque.x, torque.y, torque.z)
    }

    fn feasible(&self, f: &Vector4<f64>) -> bool {
        f.iter().all(|&x| (-1e-12..=self.max_rotor + 1e-12).contains(&x))
    }

    /// Rotor thrusts within `[0, max]`. Yaw torque is given up first when the
    /// request cannot be met; remaining excess is clipped per rotor.
    pub fn mix(&self, thrust: f64, torque: &Vector3<f64>) -> Vector4<f64> {
        let full = self.solve(thrust, torque);
        if self.feasible(&full) {
            return full.map(|x| x.clamp(0.0, self.max_rotor));
        }
        let base = self.solve(thrust, &Vector3::new(torque.x, torque.y, 0.0));
        let yaw = full - base;
        let scale = if self.feasible(&base) {
            // Largest fraction of the yaw contribution that keeps every rotor in range.
            (0..4).fold(1.0f64, |s, i| {
                let y = yaw[i];
                let limit = if y > 0.0 {
                    (self.max_rotor - base[i]) / y
                } else if y < 0.0 {
                    -base[i] / y
                } else {
                    1.0
                };
                s.min(limit.max(0.0))
            })
        } else {
            0.0
        };
        (base + yaw * scale).map(|x| x.clamp(0.0, self.max_rotor))
    }
}

/// Allocation with the default rotor layout.
pub fn mixer(thrust: f64, torque: &Vector3<f64>, params: &QuadParams) -> Vector4<f64> {
    Allocation::new(params).mix(thrust, torque)
}

/// Advances the rigid body by `dt` under the given rotor thrusts.
///
/// Rates use semi-implicit Euler (rate first, then attitude with the new
/// rate). Velocity is updated first as well, but position advances with the
/// average of old and new velocity, which is exact under constant force.
pub fn step_dynamics(
    state: &QuadState,
    rotors: &Vector4<f64>,
    params: &QuadParams,
    alloc: &Allocation,
    dt: f64,
) -> Result<QuadState, VehicleError> {
    if !(dt > 0.0 && dt <= 0.01) {
        return Err(VehicleError::BadTimeStep(dt));
    }
    if !state.is_finite() || rotors.iter().any(|r| !r.is_finite()) {
        return Err(VehicleError::NonFinite);
    }
    let (thrust, torque) = alloc.forward(rotors);
    let accel = state.attitude * Vector3::new(0.0, 0.0, thrust / params.mass) - Vector3::z() * params.gravity;
    let velocity = state.velocity + accel * dt;
    let position = state.position + (state.velocity + velocity) * (0.5 * dt);

    let i = params.inertia;
    let gyro = state.omega.cross(&i.component_mul(&state.omega));
    let omega_dot = (torque - gyro).component_div(&i);
    let omega = state.omega + omega_dot * dt;
    let delta = UnitQuaternion::from_scaled_axis(omega * dt);
    let attitude = UnitQuaternion::new_normalize((state.attitude * delta).into_inner());

    let next = QuadState {
        position,
        velocity,
        attitude,
        omega,
        rotor_thrusts: *rotors,
    };
    if !next.is_finite() {
        return Err(VehicleError::NonFinite);
    }
    Ok(next)
}

/// Multi-rate cascade: velocity loop at 100 Hz, attitude at 500 Hz, rate
/// loop and mixer at 1 kHz, driven by a 1 kHz tick.
#[derive(Debug, Clone)]
pub struct FlightController {
    params: QuadParams,
    gains: LoopGains,
    alloc: Allocation,
    vel_state: PiState,
    rate_state: PidState,
    setpoint: AttitudeSetpoint,
    rate_cmd: Vector3<f64>,
    yaw_sp: f64,
    tick: u64,
}

pub const RATE_LOOP_DT: f64 = 1e-3;
const ATTITUDE_DIVIDER: u64 = 2;
const VELOCITY_DIVIDER: u64 = 10;

impl FlightController {
    pub fn new(params: QuadParams, gains: LoopGains, initial_yaw: f64) -> Self {
        Self {
            alloc: Allocation::new(&params),
            setpoint: AttitudeSetpoint {
                attitude: UnitQuaternion::from_euler_angles(0.0, 0.0, initial_yaw),
                thrust: params.hover_thrust(),
            },
            params,
            gains,
            vel_state: PiState::default(),
            rate_state: PidState::default(),
            rate_cmd: Vector3::zeros(),
            yaw_sp: initial_yaw,
            tick: 0,
        }
    }

    pub fn allocation(&self) -> &Allocation {
        &self.alloc
    }

    pub fn yaw_setpoint(&self) -> f64 {
        self.yaw_sp
    }

    /// One 1 kHz tick. `v_ref` is the world-frame velocity reference and
    /// `yaw_rate_ref` the commanded yaw rate (integrated into the heading
    /// setpoint and fed forward).
    pub fn update(&mut self, state: &QuadState, v_ref: &Vector3<f64>, yaw_rate_ref: f64) -> Vector4<f64> {
        let dt = RATE_LOOP_DT;
        if self.tick.is_multiple_of(VELOCITY_DIVIDER) {
            let vdt = dt * VELOCITY_DIVIDER as f64;
            self.yaw_sp = wrap_angle(self.yaw_sp + yaw_rate_ref * vdt);
            let accel = velocity_loop(v_ref, &state.velocity, &self.gains, &mut self.vel_state, vdt, self.params.gravity);
            if let Some(sp) = accel_to_attitude(&accel, self.yaw_sp, &self.params) {
                self.setpoint = sp;
            }
        }
        if self.tick.is_multiple_of(ATTITUDE_DIVIDER) {
            self.rate_cmd = attitude_loop(&self.setpoint.attitude, &state.attitude, yaw_rate_ref, &self.gains);
        }
        self.tick += 1;
        let torque = rate_loop_pid(&self.rate_cmd, &state.omega, &self.gains, &mut self.rate_state, dt);
        self.alloc.mix(self.setpoint.thrust, &torque)
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let t = (a + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU);
    t - std::f64::consts::PI
}
