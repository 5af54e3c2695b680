//! Image moments and the four-channel visual feature `q = [x_n, y_n, a_n, f_yaw]`.
//!
//! Moments are taken over the tag's four corner points in normalized image
//! coordinates. `a = mu20 + mu02` shrinks with the square of distance, so
//! `a_n = z* * sqrt(a* / a)` behaves like a depth and `x_n = a_n * x_g`,
//! `y_n = a_n * y_g` like metric lateral offsets.

use nalgebra::{Isometry3, Vector2, Vector3};
use thiserror::Error;

use crate::simcam::{level_camera_pose, observe_tag, CameraIntrinsics, TagObservation};
use crate::world::{SearchHint, TagSpec};

/// Smallest centroid radius used in the yaw feature.
pub const RHO_MIN: f64 = 1e-3;
/// Below this spread the corners are treated as degenerate.
pub const A_MIN: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("moments of an empty point set are undefined")]
    EmptyPoints,
    #[error("desired pose does not produce a visible tag")]
    CalibrationFailed,
    #[error("desired distance {0} m outside the detectable range")]
    DesiredOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawMoments {
    pub m00: f64,
    pub m10: f64,
    pub m01: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenteredMoments {
    pub mu20: f64,
    pub mu02: f64,
    pub mu11: f64,
    pub xg: f64,
    pub yg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentSet {
    pub m00: f64,
    pub m10: f64,
    pub m01: f64,
    pub mu20: f64,
    pub mu02: f64,
    pub mu11: f64,
    pub xg: f64,
    pub yg: f64,
    pub a: f64,
}

impl MomentSet {
    pub fn from_points(points: &[Vector2<f64>]) -> Result<Self, FeatureError> {
        let raw = raw_moments(points)?;
        let c = centered_moments(points)?;
        Ok(Self {
            m00: raw.m00,
            m10: raw.m10,
            m01: raw.m01,
            mu20: c.mu20,
            mu02: c.mu02,
            mu11: c.mu11,
            xg: c.xg,
            yg: c.yg,
            a: c.mu20 + c.mu02,
        })
    }
}

pub fn raw_moments(points: &[Vector2<f64>]) -> Result<RawMoments, FeatureError> {
    if points.is_empty() {
        return Err(FeatureError::EmptyPoints);
    }
    let (m10, m01) = points.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    Ok(RawMoments {
        m00: points.len() as f64,
        m10,
        m01,
    })
}

pub fn centered_moments(points: &[Vector2<f64>]) -> Result<CenteredMoments, FeatureError> {
    let raw = raw_moments(points)?;
    let xg = raw.m10 / raw.m00;
    let yg = raw.m01 / raw.m00;
    let (mu20, mu02, mu11) = points.iter().fold((0.0, 0.0, 0.0), |(s20, s02, s11), p| {
        let dx = p.x - xg;
        let dy = p.y - yg;
        (s20 + dx * dx, s02 + dy * dy, s11 + dx * dy)
    });
    Ok(CenteredMoments {
        mu20,
        mu02,
        mu11,
        xg,
        yg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVec {
    pub xn: f64,
    pub yn: f64,
    pub an: f64,
    pub fyaw: f64,
    pub valid: bool,
}

impl FeatureVec {
    pub fn invalid() -> Self {
        Self {
            xn: 0.0,
            yn: 0.0,
            an: 0.0,
            fyaw: 0.0,
            valid: false,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.xn, self.yn, self.an, self.fyaw]
    }
}

/// Target feature values for one tag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesiredFeatures {
    pub z_star: f64,
    pub a_star: f64,
    pub q_star: FeatureVec,
}

impl DesiredFeatures {
    pub fn new(z_star: f64, a_star: f64) -> Self {
        Self {
            z_star,
            a_star,
            q_star: FeatureVec {
                xn: 0.0,
                yn: 0.0,
                an: z_star,
                fyaw: std::f64::consts::FRAC_PI_2,
                valid: true,
            },
        }
    }

    /// Measures `a*` by projecting a tag of the given side fronto-parallel and
    /// centered at distance `z_star` through the same camera model used at
    /// run time.
    pub fn calibrate(z_star: f64, tag_side: f64, intr: &CameraIntrinsics) -> Result<Self, FeatureError> {
        if !(crate::simcam::MIN_TAG_RANGE..=crate::simcam::MAX_TAG_RANGE).contains(&z_star) {
            return Err(FeatureError::DesiredOutOfRange(z_star));
        }
        let tag = TagSpec {
            id: 0,
            center: Vector3::new(z_star, 0.0, 0.0),
            normal: -Vector3::x(),
            side: tag_side,
            search_hint: SearchHint::Unknown,
        };
        let pose: Isometry3<f64> = level_camera_pose(&Vector3::zeros(), 0.0);
        let obs = observe_tag(&pose, &tag, intr, &[]).ok_or(FeatureError::CalibrationFailed)?;
        let points = normalized_corners(&obs, intr);
        let c = centered_moments(&points).expect("four corners");
        Ok(Self::new(z_star, c.mu20 + c.mu02))
    }
}

fn normalized_corners(obs: &TagObservation, intr: &CameraIntrinsics) -> [Vector2<f64>; 4] {
    obs.corners.map(|px| intr.normalize(&px))
}

/// Yaw feature `arctan(1 / rho)` with the centroid radius floored at [`RHO_MIN`].
pub fn yaw_feature(xg: f64, yg: f64) -> f64 {
    let rho = (xg * xg + yg * yg).sqrt().max(RHO_MIN);
    (1.0 / rho).atan()
}

pub fn feature_vector(obs: &TagObservation, intr: &CameraIntrinsics, des: &DesiredFeatures) -> FeatureVec {
    let points = normalized_corners(obs, intr);
    let c = centered_moments(&points).expect("four corners");
    let a = c.mu20 + c.mu02;
    if a <= A_MIN || !a.is_finite() {
        return FeatureVec::invalid();
    }
    let an = des.z_star * (des.a_star / a).sqrt();
    FeatureVec {
        xn: an * c.xg,
        yn: an * c.yg,
        an,
        fyaw: yaw_feature(c.xg, c.yg),
        valid: true,
    }
}
