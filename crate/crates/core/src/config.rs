//! Run configuration: one TOML document with a table per subsystem.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{DesiredFeatures, FeatureError};
use crate::link::DEFAULT_STALENESS;
use crate::mission::{MissionError, MissionParams};
use crate::percept::PerceptParams;
use crate::servo::{ServoError, ServoGains};
use crate::simcam::{CameraIntrinsics, DepthAffine};
use crate::vehicle::{LoopGains, QuadParams, VehicleError};
use crate::world::{ScenarioError, WorldScene};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Mission(#[from] MissionError),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Scenario file, or the name of a bundled scenario.
    pub scenario: String,
    pub seed: u64,
    /// Simulated time limit, s.
    pub duration: f64,
    pub avoidance: bool,
    pub two_process: bool,
    pub out: Option<PathBuf>,
    /// Keep every perception frame in `frames.bin` for later replay.
    pub record_frames: bool,
    /// Wall-clock limit on waiting for one perception reply, s.
    pub perception_timeout: f64,
    /// Random offset applied to the start position per seed, m.
    pub start_jitter: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            scenario: "paper_fig3".into(),
            seed: 1,
            duration: 90.0,
            avoidance: true,
            two_process: false,
            out: None,
            record_frames: false,
            perception_timeout: 30.0,
            start_jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthSection {
    pub scale: f64,
    pub shift: f64,
    pub noise_sigma: f64,
}

impl Default for DepthSection {
    fn default() -> Self {
        Self {
            scale: 1.0,
            shift: 0.0,
            noise_sigma: 4.0,
        }
    }
}

impl DepthSection {
    pub fn affine(&self) -> DepthAffine {
        DepthAffine {
            scale: self.scale,
            shift: self.shift,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoSection {
    pub lambda: [f64; 4],
    /// Row-major interaction matrix estimate; `-I` when absent.
    pub l_hat: Option<[f64; 16]>,
    pub v_max: f64,
    pub w_max: f64,
}

impl Default for ServoSection {
    fn default() -> Self {
        Self {
            lambda: [0.6, 0.5, 0.24, 0.59],
            l_hat: None,
            v_max: 1.0,
            w_max: 1.0,
        }
    }
}

impl ServoSection {
    pub fn gains(&self) -> Result<ServoGains, ServoError> {
        let l_hat = self
            .l_hat
            .map(|m| Matrix4::from_row_slice(&m))
            .unwrap_or_else(|| -Matrix4::identity());
        ServoGains::new(Vector4::from(self.lambda), l_hat, self.v_max, self.w_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSection {
    pub staleness: f64,
}

impl Default for LinkSection {
    fn default() -> Self {
        Self {
            staleness: DEFAULT_STALENESS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub camera: CameraIntrinsics,
    pub depth: DepthSection,
    pub servo: ServoSection,
    pub mission: MissionParams,
    pub percept: PerceptParams,
    pub vehicle: QuadParams,
    pub gains: LoopGains,
    pub link: LinkSection,
}

impl RunConfig {
    pub fn from_toml(doc: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let doc = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&doc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.run.duration > 0.0 && self.run.duration.is_finite()) {
            return Err(ConfigError::Invalid(format!("duration must be positive, got {}", self.run.duration)));
        }
        if !(self.percept.rate_hz > 0.0 && self.percept.rate_hz.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "perception rate must be positive, got {}",
                self.percept.rate_hz
            )));
        }
        if !(self.percept.latency >= 0.0) {
            return Err(ConfigError::Invalid("perception latency must be non-negative".into()));
        }
        if !(self.link.staleness > 0.0) {
            return Err(ConfigError::Invalid("staleness window must be positive".into()));
        }
        if !(self.run.perception_timeout > 0.0) {
            return Err(ConfigError::Invalid("perception timeout must be positive".into()));
        }
        if !(self.run.start_jitter >= 0.0) {
            return Err(ConfigError::Invalid("start jitter must be non-negative".into()));
        }
        if !self.camera.is_valid() {
            return Err(ConfigError::Invalid("camera intrinsics are invalid".into()));
        }
        if !(self.depth.scale > 0.0 && self.depth.shift.is_finite() && self.depth.noise_sigma >= 0.0) {
            return Err(ConfigError::Invalid("depth model needs scale > 0 and sigma >= 0".into()));
        }
        self.servo.gains()?;
        self.mission.validate()?;
        self.vehicle.validate()?;
        self.gains.validate()?;
        Ok(())
    }

    /// Loads the configured scenario, from disk or from the bundled set.
    pub fn scene(&self) -> Result<WorldScene, ConfigError> {
        let name = &self.run.scenario;
        let path = Path::new(name);
        if path.exists() {
            let doc = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.to_owned(),
                source,
            })?;
            Ok(crate::world::load_scenario(&doc)?)
        } else {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(name);
            Ok(crate::world::bundled_scenario(stem)?)
        }
    }

    /// Desired features for a scene whose tags share one side length.
    pub fn desired_features(&self, tag_side: f64) -> Result<DesiredFeatures, FeatureError> {
        DesiredFeatures::calibrate(self.mission.z_star, tag_side, &self.camera)
    }
}
