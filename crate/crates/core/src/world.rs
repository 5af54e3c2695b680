//! Static scene description: fiducial tags, gates, cylindrical obstacles and
//! the scenario document format they are loaded from.
//!
//! Scenario documents are TOML with one `[world]` table and repeated
//! `[[tag]]`, `[[gate]]` and `[[obstacle]]` sections. Tags are visited in the
//! order they appear in the document.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum spacing between consecutive tags before the camera may lose the
/// next one (meters).
pub const MAX_TAG_SPACING: f64 = 4.0;
pub const DEFAULT_CRUISE_ALTITUDE: f64 = 1.0;
pub const DEFAULT_PASS_CLEARANCE: f64 = 1.5;

const UNIT_TOLERANCE: f64 = 1e-9;

const PAPER_FIG3: &str = include_str!("../scenarios/paper_fig3.toml");
const SINGLE_TAG: &str = include_str!("../scenarios/single_tag.toml");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("malformed scenario document: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario has no tags")]
    NoTags,
    #[error("duplicate tag id {0}")]
    DuplicateTag(u32),
    #[error("tag {0}: normal is not a unit vector")]
    NonUnitNormal(u32),
    #[error("{what} must be positive (got {value})")]
    NonPositive { what: String, value: f64 },
    #[error("gate references unknown tag id {0}")]
    DanglingGate(u32),
    #[error("{0} lies outside the world bounds")]
    OutOfBounds(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unknown bundled scenario {0:?}")]
    UnknownBundled(String),
}

/// Which way to look for a tag that is not in view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum SearchHint {
    Left,
    Right,
    Up,
    Down,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagSpec {
    pub id: u32,
    pub center: Vector3<f64>,
    /// Direction the printed face points to.
    pub normal: Vector3<f64>,
    pub side: f64,
    #[serde(default)]
    pub search_hint: SearchHint,
}

impl TagSpec {
    /// In-plane (right, up) axes as seen by a viewer looking at the tag face.
    pub fn face_axes(&self) -> (Vector3<f64>, Vector3<f64>) {
        face_axes(&self.normal)
    }

    /// Corner positions in world coordinates, counter-clockwise in the image
    /// starting bottom-left.
    pub fn corners(&self) -> [Vector3<f64>; 4] {
        let (right, up) = self.face_axes();
        let h = 0.5 * self.side;
        [
            self.center - right * h - up * h,
            self.center + right * h - up * h,
            self.center + right * h + up * h,
            self.center - right * h + up * h,
        ]
    }
}

/// Viewer-relative (right, up) basis for a planar element with the given
/// outward normal. Falls back to world x as "up" for horizontal planes.
pub fn face_axes(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let forward = -normal.normalize();
    let mut up_ref = Vector3::z();
    if forward.cross(&up_ref).norm() < 1e-6 {
        up_ref = Vector3::x();
    }
    let right = forward.cross(&up_ref).normalize();
    let up = right.cross(&forward).normalize();
    (right, up)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub tag_id: u32,
    pub center: Vector3<f64>,
    pub width: f64,
    pub height: f64,
    /// Distance to keep flying past the gate plane when crossing.
    #[serde(default = "default_pass_clearance")]
    pub pass_clearance: f64,
}

fn default_pass_clearance() -> f64 {
    DEFAULT_PASS_CLEARANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CylinderObstacle {
    pub base_center: Vector3<f64>,
    pub radius: f64,
    pub height: f64,
}

impl CylinderObstacle {
    /// Euclidean distance from `p` to the cylinder surface; zero inside.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let radial = (p.xy() - self.base_center.xy()).norm() - self.radius;
        let top = self.base_center.z + self.height;
        let vertical = (self.base_center.z - p.z).max(p.z - top);
        let r = radial.max(0.0);
        let v = vertical.max(0.0);
        (r * r + v * v).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldScene {
    /// Mission order: tags[0] is the start target, the last tag the destination.
    pub tags: Vec<TagSpec>,
    pub gates: Vec<GateSpec>,
    pub obstacles: Vec<CylinderObstacle>,
    pub cruise_altitude: f64,
    /// Arena walls. When absent, rays that miss everything see the far plane.
    pub bounds: Option<Aabb>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpacingWarning {
    pub from_id: u32,
    pub to_id: u32,
    pub distance: f64,
}

impl std::fmt::Display for SpacingWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "tags {} -> {} are {:.3} m apart (limit {:.1} m)",
            self.from_id, self.to_id, self.distance, MAX_TAG_SPACING
        )
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldSection {
    #[serde(default = "default_cruise_altitude")]
    cruise_altitude: f64,
    #[serde(default)]
    bounds: Option<Aabb>,
}

fn default_cruise_altitude() -> f64 {
    DEFAULT_CRUISE_ALTITUDE
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    #[serde(default)]
    world: Option<WorldSection>,
    #[serde(default)]
    tag: Vec<TagSpec>,
    #[serde(default)]
    gate: Vec<GateSpec>,
    #[serde(default)]
    obstacle: Vec<CylinderObstacle>,
}

/// Parses and validates a scenario document.
pub fn load_scenario(doc: &str) -> Result<WorldScene, ScenarioError> {
    let doc: ScenarioDoc = toml::from_str(doc)?;
    let world = doc.world.unwrap_or(WorldSection {
        cruise_altitude: DEFAULT_CRUISE_ALTITUDE,
        bounds: None,
    });
    let scene = WorldScene {
        tags: doc.tag,
        gates: doc.gate,
        obstacles: doc.obstacle,
        cruise_altitude: world.cruise_altitude,
        bounds: world.bounds,
    };
    scene.validate()?;
    Ok(scene)
}

/// Loads one of the scenarios shipped with the crate.
pub fn bundled_scenario(name: &str) -> Result<WorldScene, ScenarioError> {
    let doc = bundled_document(name).ok_or_else(|| ScenarioError::UnknownBundled(name.into()))?;
    load_scenario(doc)
}

pub fn bundled_document(name: &str) -> Option<&'static str> {
    match name {
        "paper_fig3" => Some(PAPER_FIG3),
        "single_tag" => Some(SINGLE_TAG),
        _ => None,
    }
}

pub fn bundled_names() -> &'static [&'static str] {
    &["paper_fig3", "single_tag"]
}

fn positive(what: impl Into<String>, value: f64) -> Result<(), ScenarioError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ScenarioError::NonPositive {
            what: what.into(),
            value,
        })
    }
}

fn finite(what: impl Into<String>, v: &Vector3<f64>) -> Result<(), ScenarioError> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(ScenarioError::NonFinite(what.into()))
    }
}

impl WorldScene {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.tags.is_empty() {
            return Err(ScenarioError::NoTags);
        }
        positive("cruise_altitude", self.cruise_altitude)?;
        let mut seen = std::collections::HashSet::new();
        for tag in &self.tags {
            if !seen.insert(tag.id) {
                return Err(ScenarioError::DuplicateTag(tag.id));
            }
            finite(format!("tag {} center", tag.id), &tag.center)?;
            finite(format!("tag {} normal", tag.id), &tag.normal)?;
            if (tag.normal.norm() - 1.0).abs() > UNIT_TOLERANCE {
                return Err(ScenarioError::NonUnitNormal(tag.id));
            }
            positive(format!("tag {} side", tag.id), tag.side)?;
        }
        for gate in &self.gates {
            if !seen.contains(&gate.tag_id) {
                return Err(ScenarioError::DanglingGate(gate.tag_id));
            }
            finite(format!("gate {} center", gate.tag_id), &gate.center)?;
            positive(format!("gate {} width", gate.tag_id), gate.width)?;
            positive(format!("gate {} height", gate.tag_id), gate.height)?;
            positive(format!("gate {} pass_clearance", gate.tag_id), gate.pass_clearance)?;
        }
        for (i, obs) in self.obstacles.iter().enumerate() {
            finite(format!("obstacle {i} base_center"), &obs.base_center)?;
            positive(format!("obstacle {i} radius"), obs.radius)?;
            positive(format!("obstacle {i} height"), obs.height)?;
        }
        if let Some(b) = &self.bounds {
            finite("bounds.min", &b.min)?;
            finite("bounds.max", &b.max)?;
            for i in 0..3 {
                if b.max[i] <= b.min[i] {
                    return Err(ScenarioError::NonPositive {
                        what: format!("bounds extent along axis {i}"),
                        value: b.max[i] - b.min[i],
                    });
                }
            }
            for tag in &self.tags {
                for (c, corner) in tag.corners().iter().enumerate() {
                    if !b.contains(corner) {
                        return Err(ScenarioError::OutOfBounds(format!("tag {} corner {c}", tag.id)));
                    }
                }
            }
            for gate in &self.gates {
                if !b.contains(&gate.center) {
                    return Err(ScenarioError::OutOfBounds(format!("gate {}", gate.tag_id)));
                }
            }
            for (i, obs) in self.obstacles.iter().enumerate() {
                let r = Vector3::new(obs.radius, obs.radius, 0.0);
                let lo = obs.base_center - r;
                let hi = obs.base_center + r + Vector3::z() * obs.height;
                if !b.contains(&lo) || !b.contains(&hi) {
                    return Err(ScenarioError::OutOfBounds(format!("obstacle {i}")));
                }
            }
        }
        Ok(())
    }

    pub fn tag(&self, id: u32) -> Option<&TagSpec> {
        self.tags.iter().find(|t| t.id == id)
    }

    pub fn gate_for(&self, tag_id: u32) -> Option<&GateSpec> {
        self.gates.iter().find(|g| g.tag_id == tag_id)
    }

    /// Index of the last tag in mission order.
    pub fn last_index(&self) -> usize {
        self.tags.len() - 1
    }

    /// Distance from `p` to the closest obstacle surface, with its index.
    pub fn nearest_obstacle(&self, p: &Vector3<f64>) -> Option<(usize, f64)> {
        self.obstacles
            .iter()
            .enumerate()
            .map(|(i, o)| (i, o.surface_distance(p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Serializes back into the scenario document format.
    pub fn to_document(&self) -> String {
        let doc = ScenarioDoc {
            world: Some(WorldSection {
                cruise_altitude: self.cruise_altitude,
                bounds: self.bounds,
            }),
            tag: self.tags.clone(),
            gate: self.gates.clone(),
            obstacle: self.obstacles.clone(),
        };
        toml::to_string(&doc).expect("scene serializes to TOML")
    }
}

/// One warning per consecutive tag pair whose centers are at least
/// [`MAX_TAG_SPACING`] apart.
pub fn validate_spacing(scene: &WorldScene) -> Vec<SpacingWarning> {
    scene
        .tags
        .windows(2)
        .filter_map(|pair| {
            let distance = (pair[1].center - pair[0].center).norm();
            (distance >= MAX_TAG_SPACING).then_some(SpacingWarning {
                from_id: pair[0].id,
                to_id: pair[1].id,
                distance,
            })
        })
        .collect()
}
