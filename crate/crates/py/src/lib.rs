//! Python bindings for the servosim core.

use std::path::PathBuf;

use nalgebra::{Vector2, Vector4};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use servosim::features::{centered_moments as core_centered_moments, DesiredFeatures, FeatureVec};
use servosim::link::{decode_command as core_decode_command, encode_command as core_encode_command};
use servosim::percept::{
    align_depth as core_align_depth, obstacle_mask as core_obstacle_mask, process_frame, AvoidCommandMsg, Direction,
    PerceptParams,
};
use servosim::servo::{ibvs_velocity as core_ibvs_velocity, ServoGains};
use servosim::simcam::DepthMap;
use servosim::world::{bundled_names, bundled_scenario, load_scenario, validate_spacing, WorldScene};
use servosim::{export_report, run_mission, MissionReport, RunConfig, SimOptions};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn depth_map(values: Vec<f64>, width: usize, height: usize) -> PyResult<DepthMap> {
    if values.len() != width * height {
        return Err(value_err(format!("{} values for a {width}x{height} map", values.len())));
    }
    Ok(DepthMap::new(width, height, values))
}

fn direction(token: &str) -> PyResult<Direction> {
    Direction::from_token(token).ok_or_else(|| value_err(format!("unknown direction {token:?}")))
}

/// A loaded world: tags, gates and obstacles.
#[pyclass(name = "Scenario", frozen)]
struct PyScenario {
    scene: WorldScene,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn bundled(name: &str) -> PyResult<Self> {
        Ok(Self { scene: bundled_scenario(name).map_err(value_err)? })
    }

    #[staticmethod]
    fn from_toml(doc: &str) -> PyResult<Self> {
        Ok(Self { scene: load_scenario(doc).map_err(value_err)? })
    }

    #[staticmethod]
    fn bundled_names() -> Vec<&'static str> {
        bundled_names().to_vec()
    }

    fn to_toml(&self) -> String {
        self.scene.to_document()
    }

    #[getter]
    fn tag_ids(&self) -> Vec<u32> {
        self.scene.tags.iter().map(|t| t.id).collect()
    }

    #[getter]
    fn gate_count(&self) -> usize {
        self.scene.gates.len()
    }

    #[getter]
    fn obstacle_count(&self) -> usize {
        self.scene.obstacles.len()
    }

    /// Consecutive tag pairs that are too far apart, as `(from, to, distance)`.
    fn spacing_warnings(&self) -> Vec<(u32, u32, f64)> {
        validate_spacing(&self.scene).iter().map(|w| (w.from_id, w.to_id, w.distance)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(tags={}, gates={}, obstacles={})",
            self.scene.tags.len(),
            self.scene.gates.len(),
            self.scene.obstacles.len()
        )
    }
}

/// Outcome and logs of one simulated mission.
#[pyclass(name = "Report", frozen)]
struct PyReport {
    report: MissionReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn outcome(&self) -> String {
        self.report.outcome.to_string()
    }

    #[getter]
    fn exit_code(&self) -> i32 {
        self.report.outcome.exit_code()
    }

    #[getter]
    fn end_time(&self) -> f64 {
        self.report.end_time
    }

    #[getter]
    fn gates_passed(&self) -> u32 {
        self.report.gates_passed
    }

    #[getter]
    fn tags_tracked(&self) -> u32 {
        self.report.tags_tracked
    }

    #[getter]
    fn min_obstacle_clearance(&self) -> Option<f64> {
        self.report.min_obstacle_clearance
    }

    /// `(obstacle, min_clearance, passed, commands)` per obstacle.
    #[getter]
    fn encounters(&self) -> Vec<(usize, f64, bool, u32)> {
        self.report.encounters.iter().map(|e| (e.obstacle, e.min_clearance, e.passed, e.commands)).collect()
    }

    /// `(t, x, y, z)` rows.
    #[getter]
    fn trajectory(&self) -> Vec<(f64, f64, f64, f64)> {
        self.report.trajectory.iter().map(|r| (r.t, r.x, r.y, r.z)).collect()
    }

    /// `(t, seq, direction, white_fraction)` rows.
    #[getter]
    fn commands(&self) -> Vec<(f64, u32, &'static str, f64)> {
        self.report.commands.iter().map(|c| (c.t, c.seq, c.direction.token(), c.white_fraction)).collect()
    }

    /// `(t, phase)` for every phase change.
    #[getter]
    fn phases(&self) -> Vec<(f64, String)> {
        self.report.phases.iter().map(|p| (p.t, p.phase.clone())).collect()
    }

    fn summary(&self) -> String {
        self.report.summary()
    }

    fn to_json(&self) -> String {
        self.report.to_json()
    }

    /// Writes the CSV logs and summary into `directory`; returns the paths.
    fn export(&self, directory: PathBuf) -> PyResult<Vec<PathBuf>> {
        export_report(&self.report, &directory).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("Report(outcome={}, end_time={})", self.report.outcome, self.report.end_time)
    }
}

/// Runs one mission in-process. `config` is an optional TOML document; the
/// keyword arguments override its `[run]` section.
#[pyfunction]
#[pyo3(signature = (scenario=None, seed=None, avoidance=None, duration=None, config=None))]
fn run(
    py: Python<'_>,
    scenario: Option<String>,
    seed: Option<u64>,
    avoidance: Option<bool>,
    duration: Option<f64>,
    config: Option<&str>,
) -> PyResult<PyReport> {
    let mut cfg = match config {
        Some(doc) => RunConfig::from_toml(doc).map_err(value_err)?,
        None => RunConfig::default(),
    };
    if let Some(s) = scenario {
        cfg.run.scenario = s;
    }
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if let Some(a) = avoidance {
        cfg.run.avoidance = a;
    }
    if let Some(d) = duration {
        cfg.run.duration = d;
    }
    cfg.run.two_process = false;
    cfg.validate().map_err(value_err)?;
    let report = py.detach(|| run_mission(&cfg, &SimOptions::default())).map_err(value_err)?;
    Ok(PyReport { report })
}

/// `(xg, yg, mu20, mu02, mu11)` of a point set.
#[pyfunction]
fn centered_moments(points: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64, f64, f64)> {
    let pts: Vec<_> = points.into_iter().map(|(x, y)| Vector2::new(x, y)).collect();
    let c = core_centered_moments(&pts).map_err(value_err)?;
    Ok((c.xg, c.yg, c.mu20, c.mu02, c.mu11))
}

/// Least-squares `(s, t)` with `s * d + t ~ r`.
#[pyfunction]
fn align_depth(d: Vec<f64>, r: Vec<f64>) -> PyResult<(f64, f64)> {
    let fit = core_align_depth(&d, &r).map_err(value_err)?;
    Ok((fit.s, fit.t))
}

/// Row-major obstacle mask of a pseudo-depth map: `value > tau`.
#[pyfunction]
fn obstacle_mask(values: Vec<f64>, width: usize, height: usize, tau: f64) -> PyResult<Vec<bool>> {
    Ok(core_obstacle_mask(&depth_map(values, width, height)?, tau).bits)
}

/// Avoidance decision for one frame with default parameters:
/// `(direction, white_fraction)`.
#[pyfunction]
fn decide(values: Vec<f64>, width: usize, height: usize) -> PyResult<(&'static str, f64)> {
    let d = process_frame(&depth_map(values, width, height)?, None, &PerceptParams::default()).map_err(value_err)?;
    Ok((d.direction.token(), d.stats.white_fraction))
}

/// Camera-frame `(vx, vy, vz, wz)` from features `(xn, yn, an, fyaw)`.
#[pyfunction]
#[pyo3(signature = (features, z_star, a_star, gains=(0.5, 0.5, 0.5, 0.5)))]
fn ibvs_velocity(
    features: (f64, f64, f64, f64),
    z_star: f64,
    a_star: f64,
    gains: (f64, f64, f64, f64),
) -> PyResult<(f64, f64, f64, f64)> {
    let des = DesiredFeatures::new(z_star, a_star);
    let gains = ServoGains::with_lambda(Vector4::new(gains.0, gains.1, gains.2, gains.3)).map_err(value_err)?;
    let q = FeatureVec { xn: features.0, yn: features.1, an: features.2, fyaw: features.3, valid: true };
    let v = core_ibvs_velocity(&q, &des, &gains).ok_or_else(|| value_err("features are not valid"))?;
    Ok((v.vx, v.vy, v.vz, v.wz))
}

#[pyfunction]
fn encode_command<'py>(py: Python<'py>, direction_token: &str, seq: u32, white_fraction: f64) -> PyResult<Bound<'py, PyBytes>> {
    let msg = AvoidCommandMsg { direction: direction(direction_token)?, seq, white_fraction };
    Ok(PyBytes::new(py, &core_encode_command(&msg)))
}

/// `(direction, seq, white_fraction)` from a command datagram.
#[pyfunction]
fn decode_command(data: &[u8]) -> PyResult<(&'static str, u32, f64)> {
    let m = core_decode_command(data).map_err(value_err)?;
    Ok((m.direction.token(), m.seq, m.white_fraction))
}

#[pymodule]
fn pyservosim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(centered_moments, m)?)?;
    m.add_function(wrap_pyfunction!(align_depth, m)?)?;
    m.add_function(wrap_pyfunction!(obstacle_mask, m)?)?;
    m.add_function(wrap_pyfunction!(decide, m)?)?;
    m.add_function(wrap_pyfunction!(ibvs_velocity, m)?)?;
    m.add_function(wrap_pyfunction!(encode_command, m)?)?;
    m.add_function(wrap_pyfunction!(decode_command, m)?)?;
    Ok(())
}
