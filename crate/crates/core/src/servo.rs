//! IBVS control law `v_c = -lambda * L^-1 * (q - q*)` and the camera-to-body
//! mapping of its output.
//!
//! Axis conventions: world x forward / y left / z up, body FLU, camera
//! optical (z forward, x right, y down).

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{DesiredFeatures, FeatureVec};

#[derive(Debug, Error, PartialEq)]
pub enum ServoError {
    #[error("interaction matrix estimate is singular (|det| = {0:e})")]
    SingularInteraction(f64),
    #[error("servo gains must be positive")]
    NonPositiveGain,
    #[error("saturation limits must be positive")]
    BadLimits,
    #[error("mount matrix is not a rotation")]
    NotRotation,
    #[error("command is not expressed in the camera frame")]
    WrongFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Camera,
    Body,
}

/// Linear velocity plus yaw rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityCommand {
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub wz: f64,
    pub frame: Frame,
}

impl VelocityCommand {
    pub fn zero(frame: Frame) -> Self {
        Self {
            vx: 0.0,
            vy: 0.0,
            vz: 0.0,
            wz: 0.0,
            frame,
        }
    }

    pub fn body(vx: f64, vy: f64, vz: f64, wz: f64) -> Self {
        Self {
            vx,
            vy,
            vz,
            wz,
            frame: Frame::Body,
        }
    }

    pub fn linear(&self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.vz)
    }

    /// Clamps each linear channel to `v_max` and the yaw rate to `w_max`.
    pub fn saturate(self, v_max: f64, w_max: f64) -> Self {
        Self {
            vx: self.vx.clamp(-v_max, v_max),
            vy: self.vy.clamp(-v_max, v_max),
            vz: self.vz.clamp(-v_max, v_max),
            wz: self.wz.clamp(-w_max, w_max),
            frame: self.frame,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServoGains {
    lambda: Vector4<f64>,
    l_hat: Matrix4<f64>,
    l_hat_inv: Matrix4<f64>,
    pub v_max: f64,
    pub w_max: f64,
}

impl ServoGains {
    pub fn new(lambda: Vector4<f64>, l_hat: Matrix4<f64>, v_max: f64, w_max: f64) -> Result<Self, ServoError> {
        if lambda.iter().any(|&l| !(l > 0.0)) {
            return Err(ServoError::NonPositiveGain);
        }
        if !(v_max > 0.0 && w_max > 0.0) {
            return Err(ServoError::BadLimits);
        }
        let det = l_hat.determinant();
        if !(det.abs() > 1e-9) {
            return Err(ServoError::SingularInteraction(det));
        }
        let l_hat_inv = l_hat.try_inverse().ok_or(ServoError::SingularInteraction(det))?;
        Ok(Self {
            lambda,
            l_hat,
            l_hat_inv,
            v_max,
            w_max,
        })
    }

    /// Per-channel gain with `L = -I` and the default 1 m/s, 1 rad/s limits.
    pub fn with_lambda(lambda: Vector4<f64>) -> Result<Self, ServoError> {
        Self::new(lambda, -Matrix4::identity(), 1.0, 1.0)
    }

    pub fn lambda(&self) -> &Vector4<f64> {
        &self.lambda
    }

    pub fn l_hat(&self) -> &Matrix4<f64> {
        &self.l_hat
    }
}

/// Feature error `q - q*`, with the yaw channel signed toward the side of the
/// image the target sits on.
pub fn feature_error(q: &FeatureVec, des: &DesiredFeatures) -> Vector4<f64> {
    let qs = &des.q_star;
    let side = if q.xn > 0.0 {
        1.0
    } else if q.xn < 0.0 {
        -1.0
    } else {
        0.0
    };
    Vector4::new(q.xn - qs.xn, q.yn - qs.yn, q.an - qs.an, (q.fyaw - qs.fyaw) * side)
}

/// Camera-frame velocity command, or `None` for invalid features.
pub fn ibvs_velocity(q: &FeatureVec, des: &DesiredFeatures, gains: &ServoGains) -> Option<VelocityCommand> {
    if !q.valid {
        return None;
    }
    let e = feature_error(q, des);
    let v = -(gains.l_hat_inv * e).component_mul(&gains.lambda);
    let cmd = VelocityCommand {
        vx: v[0],
        vy: v[1],
        vz: v[2],
        wz: v[3],
        frame: Frame::Camera,
    };
    Some(cmd.saturate(gains.v_max, gains.w_max))
}

fn is_rotation(m: &Matrix3<f64>) -> bool {
    (m.transpose() * m - Matrix3::identity()).abs().max() < 1e-9 && (m.determinant() - 1.0).abs() < 1e-9
}

/// Rotates the linear part of a camera-frame command into the body frame.
/// The yaw rate passes through unchanged.
pub fn camera_to_body(cmd: &VelocityCommand, mount: &Matrix3<f64>) -> Result<VelocityCommand, ServoError> {
    if cmd.frame != Frame::Camera {
        return Err(ServoError::WrongFrame);
    }
    if !is_rotation(mount) {
        return Err(ServoError::NotRotation);
    }
    let v = mount * cmd.linear();
    Ok(VelocityCommand {
        vx: v.x,
        vy: v.y,
        vz: v.z,
        wz: cmd.wz,
        frame: Frame::Body,
    })
}
