//! Simulated RGB-D sensor.
//!
//! Two outputs: tag observations (projected corners of a known fiducial,
//! gated by the sensor's usable range) and pseudo-inverse-depth frames that
//! stand in for a monocular depth network. The depth frames are ray-cast
//! nearness distorted by a hidden affine map and Gaussian noise, so they carry
//! the same unknown scale/shift a learned predictor would.

use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector2, Vector3};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{face_axes, CylinderObstacle, TagSpec, WorldScene};

pub const MIN_TAG_RANGE: f64 = 0.3;
pub const MAX_TAG_RANGE: f64 = 4.0;
/// Tags viewed more than this far off their normal are not detected.
pub const MAX_VIEW_ANGLE: f64 = 75.0 * std::f64::consts::PI / 180.0;
/// Distance assigned to rays that hit nothing.
pub const FAR_PLANE: f64 = 20.0;
/// Nearness constant: a surface at 1 m maps to 1000 raw units before the affine map.
pub const NEARNESS_K: f64 = 1000.0;
pub const RAW_MAX: f64 = 1023.0;
/// Thickness of gate frame bars, meters.
pub const GATE_BAR: f64 = 0.08;

const RAY_EPS: f64 = 1e-9;

/// Camera-to-body rotation for the forward-looking mount: optical z maps to
/// body forward, image right to body right (-y), image down to body down (-z).
pub fn camera_to_body_mount() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

/// World-to-camera transform for a camera at `position` whose body has the
/// given heading. Roll and pitch are compensated, so the optical axis stays
/// horizontal.
pub fn level_camera_pose(position: &Vector3<f64>, yaw: f64) -> Isometry3<f64> {
    let r_wb = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
    let r_bc = Rotation3::from_matrix_unchecked(camera_to_body_mount());
    let r_wc = r_wb * r_bc;
    let cam_to_world = Isometry3::from_parts(
        Translation3::from(*position),
        UnitQuaternion::from_rotation_matrix(&r_wc),
    );
    cam_to_world.inverse()
}

#[derive(Debug, Error, PartialEq)]
pub enum SimCamError {
    #[error("camera pose is not finite")]
    NonFinitePose,
    #[error("depth scale must be positive and noise non-negative")]
    BadDepthModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 460.0,
            fy: 460.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn hfov(&self) -> f64 {
        2.0 * (0.5 * self.width as f64 / self.fx).atan()
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
    }

    /// Pixel coordinates of a camera-frame point, or `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        (p.z > RAY_EPS).then(|| Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.x < self.width as f64 && px.y >= 0.0 && px.y < self.height as f64
    }

    /// Normalized image coordinates of a pixel.
    pub fn normalize(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagObservation {
    pub tag_id: u32,
    /// Pixel corners, counter-clockwise starting bottom-left of the tag.
    pub corners: [Vector2<f64>; 4],
    /// Camera-to-center distance. Used for gating only.
    pub range: f64,
}

/// Row-major pseudo-inverse-depth frame in raw units `[0, 1023]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "depth map size mismatch");
        Self { width, height, values }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Hidden distortion applied to true nearness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthAffine {
    pub scale: f64,
    pub shift: f64,
}

impl Default for DepthAffine {
    fn default() -> Self {
        Self { scale: 1.0, shift: 0.0 }
    }
}

fn pose_is_finite(pose: &Isometry3<f64>) -> bool {
    pose.translation.vector.iter().all(|v| v.is_finite()) && pose.rotation.coords.iter().all(|v| v.is_finite())
}

/// Projects a tag's corners if the sensor would detect it from this pose:
/// within range, facing the camera, fully in frame and with an unobstructed
/// line of sight to its center.
pub fn observe_tag(
    world_to_cam: &Isometry3<f64>,
    tag: &TagSpec,
    intr: &CameraIntrinsics,
    occluders: &[CylinderObstacle],
) -> Option<TagObservation> {
    let center_cam = world_to_cam.transform_point(&Point3::from(tag.center));
    let range = center_cam.coords.norm();
    if !(MIN_TAG_RANGE..=MAX_TAG_RANGE).contains(&range) {
        return None;
    }
    let cam_origin = world_to_cam.inverse_transform_point(&Point3::origin()).coords;
    let view_dir = (tag.center - cam_origin) / range;
    if tag.normal.dot(&view_dir) >= -MAX_VIEW_ANGLE.cos() {
        return None;
    }
    let mut corners = [Vector2::zeros(); 4];
    for (out, corner) in corners.iter_mut().zip(tag.corners()) {
        let p = world_to_cam.transform_point(&Point3::from(corner)).coords;
        let px = intr.project(&p)?;
        if !intr.contains(&px) {
            return None;
        }
        *out = px;
    }
    let segment = tag.center - cam_origin;
    let blocked = occluders
        .iter()
        .filter_map(|c| ray_cylinder(&cam_origin, &segment, c))
        .any(|t| t < 1.0);
    if blocked {
        return None;
    }
    Some(TagObservation {
        tag_id: tag.id,
        corners,
        range,
    })
}

/// Smallest positive ray parameter `t` at which `origin + t * dir` meets the
/// cylinder (side wall or caps).
pub fn ray_cylinder(origin: &Vector3<f64>, dir: &Vector3<f64>, cyl: &CylinderObstacle) -> Option<f64> {
    let base = cyl.base_center;
    let top = base.z + cyl.height;
    let r2 = cyl.radius * cyl.radius;
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > RAY_EPS && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };

    let ox = origin.x - base.x;
    let oy = origin.y - base.y;
    let a = dir.x * dir.x + dir.y * dir.y;
    if a > 1e-18 {
        let b = 2.0 * (ox * dir.x + oy * dir.y);
        let c = ox * ox + oy * oy - r2;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                let z = origin.z + t * dir.z;
                if z >= base.z && z <= top {
                    consider(t);
                }
            }
        }
    }
    if dir.z.abs() > 1e-18 {
        for plane_z in [base.z, top] {
            let t = (plane_z - origin.z) / dir.z;
            let x = ox + t * dir.x;
            let y = oy + t * dir.y;
            if x * x + y * y <= r2 {
                consider(t);
            }
        }
    }
    best
}

/// A planar rectangle (or rectangular ring) with its in-plane axes.
struct PlanarPatch {
    center: Vector3<f64>,
    normal: Vector3<f64>,
    right: Vector3<f64>,
    up: Vector3<f64>,
    half_extent: (f64, f64),
    /// Half extent of the hole for ring-shaped patches.
    opening: Option<(f64, f64)>,
}

impl PlanarPatch {
    fn new(center: Vector3<f64>, normal: Vector3<f64>, half_extent: (f64, f64), opening: Option<(f64, f64)>) -> Self {
        let (right, up) = face_axes(&normal);
        Self {
            center,
            normal,
            right,
            up,
            half_extent,
            opening,
        }
    }

    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-15 {
            return None;
        }
        let t = self.normal.dot(&(self.center - origin)) / denom;
        if t <= RAY_EPS {
            return None;
        }
        let local = origin + dir * t - self.center;
        let (x, y) = (local.dot(&self.right).abs(), local.dot(&self.up).abs());
        let inside = x <= self.half_extent.0 && y <= self.half_extent.1;
        let in_hole = self.opening.is_some_and(|(hx, hy)| x < hx && y < hy);
        (inside && !in_hole).then_some(t)
    }
}

fn ray_box_interior(origin: &Vector3<f64>, dir: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..3 {
        if dir[i].abs() < 1e-15 {
            continue;
        }
        let wall = if dir[i] > 0.0 { max[i] } else { min[i] };
        let t = (wall - origin[i]) / dir[i];
        if t > RAY_EPS && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    }
    best
}

/// Scene surfaces in ray-casting form.
struct RenderScene<'a> {
    scene: &'a WorldScene,
    patches: Vec<PlanarPatch>,
}

impl<'a> RenderScene<'a> {
    fn new(scene: &'a WorldScene) -> Self {
        let mut patches = Vec::new();
        for tag in &scene.tags {
            let h = 0.5 * tag.side;
            patches.push(PlanarPatch::new(tag.center, tag.normal, (h, h), None));
        }
        for gate in &scene.gates {
            let normal = scene.tag(gate.tag_id).map(|t| t.normal).unwrap_or(-Vector3::x());
            let (hw, hh) = (0.5 * gate.width, 0.5 * gate.height);
            patches.push(PlanarPatch::new(gate.center, normal, (hw + GATE_BAR, hh + GATE_BAR), Some((hw, hh))));
        }
        Self { scene, patches }
    }

    /// Nearest hit parameter along `dir` against every surface in the scene,
    /// with the obstacle index when the hit is an obstacle.
    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Option<usize>)> {
        let mut best: Option<(f64, Option<usize>)> = None;
        let mut keep = |t: Option<f64>, label: Option<usize>| {
            if let Some(t) = t {
                if best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, label));
                }
            }
        };
        for (i, cyl) in self.scene.obstacles.iter().enumerate() {
            keep(ray_cylinder(origin, dir, cyl), Some(i));
        }
        for patch in &self.patches {
            keep(patch.hit(origin, dir), None);
        }
        if let Some(b) = &self.scene.bounds {
            keep(ray_box_interior(origin, dir, &b.min, &b.max), None);
        }
        best
    }
}

/// Two independent standard normal samples from two 64-bit draws
/// (Box-Muller).
fn gaussian_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let r = (-2.0 * u1.ln()).sqrt();
    let (sin, cos) = (std::f64::consts::TAU * u2).sin_cos();
    (r * cos, r * sin)
}

/// Renders a pseudo-inverse-depth frame:
/// `raw = clamp(scale * K / z + shift + N(0, sigma), 0, 1023)` with `z` the
/// optical-axis depth of the nearest surface.
///
/// Noise is drawn from a ChaCha stream selected by `(seed, frame_index)`; each
/// pair of horizontally adjacent pixels owns a fixed window of that stream so
/// rows render independently.
pub fn render_pseudo_depth(
    world_to_cam: &Isometry3<f64>,
    scene: &WorldScene,
    intr: &CameraIntrinsics,
    affine: DepthAffine,
    noise_sigma: f64,
    seed: u64,
    frame_index: u64,
) -> Result<DepthMap, SimCamError> {
    if !pose_is_finite(world_to_cam) {
        return Err(SimCamError::NonFinitePose);
    }
    if !(affine.scale > 0.0) || !(noise_sigma >= 0.0) {
        return Err(SimCamError::BadDepthModel);
    }
    let (w, h) = (intr.width as usize, intr.height as usize);
    let cam_to_world = world_to_cam.inverse();
    let origin = cam_to_world.translation.vector;
    let rot = cam_to_world.rotation.to_rotation_matrix();
    let mut values = vec![0.0; w * h];
    let surfaces = RenderScene::new(scene);

    values.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        let mut rng = (noise_sigma > 0.0).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(frame_index);
            // Each pixel pair consumes two u64 draws, i.e. four 32-bit words.
            rng.set_word_pos((row * w.div_ceil(2) * 4) as u128);
            rng
        });
        let y = (row as f64 - intr.cy) / intr.fy;
        let mut spare = None;
        for (col, v) in out.iter_mut().enumerate() {
            let x = (col as f64 - intr.cx) / intr.fx;
            // Unnormalized ray with unit optical-axis component, so the hit
            // parameter is the depth along the optical axis.
            let dir = rot * Vector3::new(x, y, 1.0);
            let z = surfaces.cast(&origin, &dir).map_or(FAR_PLANE, |(t, _)| t).min(FAR_PLANE);
            let noise = match rng.as_mut() {
                None => 0.0,
                Some(r) => {
                    let g = spare.take().unwrap_or_else(|| {
                        let (a, b) = gaussian_pair(r);
                        spare = Some(b);
                        a
                    });
                    noise_sigma * g
                }
            };
            *v = (affine.scale * NEARNESS_K / z + affine.shift + noise).clamp(0.0, RAW_MAX);
        }
    });
    Ok(DepthMap::new(w, h, values))
}

/// Pixels per obstacle whose nearest surface is that obstacle and lies
/// closer than `max_depth` along the optical axis. Samples every `stride`-th
/// pixel in each direction.
pub fn obstacle_coverage(
    world_to_cam: &Isometry3<f64>,
    scene: &WorldScene,
    intr: &CameraIntrinsics,
    max_depth: f64,
    stride: usize,
) -> Vec<usize> {
    let stride = stride.max(1);
    let cam_to_world = world_to_cam.inverse();
    let origin = cam_to_world.translation.vector;
    let rot = cam_to_world.rotation.to_rotation_matrix();
    let surfaces = RenderScene::new(scene);
    let mut counts = vec![0; scene.obstacles.len()];
    for row in (0..intr.height as usize).step_by(stride) {
        let y = (row as f64 - intr.cy) / intr.fy;
        for col in (0..intr.width as usize).step_by(stride) {
            let x = (col as f64 - intr.cx) / intr.fx;
            let dir = rot * Vector3::new(x, y, 1.0);
            if let Some((t, Some(i))) = surfaces.cast(&origin, &dir) {
                if t < max_depth {
                    counts[i] += 1;
                }
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{load_scenario, SearchHint};

    fn tag_at(center: Vector3<f64>) -> TagSpec {
        TagSpec {
            id: 3,
            center,
            normal: -Vector3::x(),
            side: 0.3,
            search_hint: SearchHint::Unknown,
        }
    }

    fn empty_scene() -> WorldScene {
        WorldScene {
            tags: vec![tag_at(Vector3::new(100.0, 0.0, 1.0))],
            gates: vec![],
            obstacles: vec![],
            cruise_altitude: 1.0,
            bounds: None,
        }
    }

    fn origin_pose() -> Isometry3<f64> {
        level_camera_pose(&Vector3::new(0.0, 0.0, 1.0), 0.0)
    }

    #[test]
    fn level_pose_axes() {
        let pose = origin_pose();
        // A point 2 m ahead of the drone lies on the optical axis.
        let p = pose.transform_point(&Point3::new(2.0, 0.0, 1.0));
        assert!((p.coords - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        // Left of the drone is image-left (negative x); above is image-up.
        let p = pose.transform_point(&Point3::new(2.0, 1.0, 2.0));
        assert!(p.x < 0.0 && p.y < 0.0);
    }

    #[test]
    fn centered_tag_projects_symmetrically() {
        let intr = CameraIntrinsics::default();
        let obs = observe_tag(&origin_pose(), &tag_at(Vector3::new(2.0, 0.0, 1.0)), &intr, &[]).unwrap();
        let mean = obs.corners.iter().fold(Vector2::zeros(), |a, c| a + c) / 4.0;
        assert!((mean - Vector2::new(intr.cx, intr.cy)).norm() < 1e-9);
        let half = intr.fx * 0.15 / 2.0;
        assert!((obs.corners[0] - Vector2::new(intr.cx - half, intr.cy + half)).norm() < 1e-9);
        assert!((obs.corners[2] - Vector2::new(intr.cx + half, intr.cy - half)).norm() < 1e-9);
        assert!((obs.range - 2.0).abs() < 1e-12);
    }

    #[test]
    fn too_close_tag_is_not_detected() {
        let intr = CameraIntrinsics { fx: 100.0, fy: 100.0, ..Default::default() };
        assert!(observe_tag(&origin_pose(), &tag_at(Vector3::new(0.25, 0.0, 1.0)), &intr, &[]).is_none());
    }

    #[test]
    fn far_and_oblique_tags_are_not_detected() {
        let intr = CameraIntrinsics::default();
        assert!(observe_tag(&origin_pose(), &tag_at(Vector3::new(4.1, 0.0, 1.0)), &intr, &[]).is_none());
        let mut side_on = tag_at(Vector3::new(2.0, 0.0, 1.0));
        side_on.normal = Vector3::new(-0.2, 1.0, 0.0).normalize();
        assert!(observe_tag(&origin_pose(), &side_on, &intr, &[]).is_none());
        let mut back = tag_at(Vector3::new(2.0, 0.0, 1.0));
        back.normal = Vector3::x();
        assert!(observe_tag(&origin_pose(), &back, &intr, &[]).is_none());
    }

    #[test]
    fn cylinder_on_line_of_sight_occludes() {
        let blocker = CylinderObstacle {
            base_center: Vector3::new(1.0, 0.0, 0.0),
            radius: 0.3,
            height: 2.0,
        };
        // Analytic entry point along the x axis: 1.0 - 0.3.
        let t = ray_cylinder(&Vector3::new(0.0, 0.0, 1.0), &Vector3::new(2.0, 0.0, 0.0), &blocker).unwrap();
        assert!((2.0 * t - 0.7).abs() < 1e-12);
        let intr = CameraIntrinsics::default();
        let tag = tag_at(Vector3::new(2.0, 0.0, 1.0));
        assert!(observe_tag(&origin_pose(), &tag, &intr, &[]).is_some());
        assert!(observe_tag(&origin_pose(), &tag, &intr, &[blocker]).is_none());
    }

    #[test]
    fn cylinder_caps_are_hit() {
        let c = CylinderObstacle {
            base_center: Vector3::zeros(),
            radius: 0.5,
            height: 1.0,
        };
        let t = ray_cylinder(&Vector3::new(0.1, 0.0, 3.0), &Vector3::new(0.0, 0.0, -1.0), &c).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_scene_renders_far_plane() {
        let intr = CameraIntrinsics { width: 32, height: 24, cx: 16.0, cy: 12.0, fx: 23.0, fy: 23.0 };
        let map = render_pseudo_depth(&origin_pose(), &empty_scene(), &intr, DepthAffine::default(), 0.0, 9, 0).unwrap();
        assert!(map.values.iter().all(|&v| v == 50.0));
    }

    #[test]
    fn cylinder_face_nearness_and_affine() {
        let intr = CameraIntrinsics { width: 32, height: 24, cx: 16.0, cy: 12.0, fx: 23.0, fy: 23.0 };
        let mut scene = empty_scene();
        // Front face of the cylinder is exactly 1.0 m ahead on the optical axis.
        scene.obstacles.push(CylinderObstacle {
            base_center: Vector3::new(1.3, 0.0, 0.0),
            radius: 0.3,
            height: 2.0,
        });
        let map = render_pseudo_depth(&origin_pose(), &scene, &intr, DepthAffine::default(), 0.0, 0, 0).unwrap();
        assert!((map.at(16, 12) - 1000.0).abs() < 1e-9);
        let skewed = DepthAffine { scale: 0.9, shift: 50.0 };
        let map = render_pseudo_depth(&origin_pose(), &scene, &intr, skewed, 0.0, 0, 0).unwrap();
        assert!((map.at(16, 12) - 950.0).abs() < 1e-9);
    }

    #[test]
    fn noiseless_render_ignores_seed_and_noisy_render_is_reproducible() {
        let scene = load_scenario(crate::world::bundled_document("paper_fig3").unwrap()).unwrap();
        let intr = CameraIntrinsics { width: 64, height: 48, cx: 32.0, cy: 24.0, fx: 46.0, fy: 46.0 };
        let pose = origin_pose();
        let a = render_pseudo_depth(&pose, &scene, &intr, DepthAffine::default(), 0.0, 1, 0).unwrap();
        let b = render_pseudo_depth(&pose, &scene, &intr, DepthAffine::default(), 0.0, 2, 5).unwrap();
        assert_eq!(a, b);
        let n1 = render_pseudo_depth(&pose, &scene, &intr, DepthAffine::default(), 5.0, 1, 3).unwrap();
        let n2 = render_pseudo_depth(&pose, &scene, &intr, DepthAffine::default(), 5.0, 1, 3).unwrap();
        let n3 = render_pseudo_depth(&pose, &scene, &intr, DepthAffine::default(), 5.0, 1, 4).unwrap();
        assert_eq!(n1, n2);
        assert_ne!(n1, n3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let intr = CameraIntrinsics::default();
        let bad = Isometry3::translation(f64::NAN, 0.0, 0.0);
        assert_eq!(
            render_pseudo_depth(&bad, &empty_scene(), &intr, DepthAffine::default(), 0.0, 0, 0),
            Err(SimCamError::NonFinitePose)
        );
        let neg = DepthAffine { scale: -1.0, shift: 0.0 };
        assert_eq!(
            render_pseudo_depth(&origin_pose(), &empty_scene(), &intr, neg, 0.0, 0, 0),
            Err(SimCamError::BadDepthModel)
        );
    }

    #[test]
    fn hfov_from_focal_length() {
        let intr = CameraIntrinsics { fx: 320.0, ..Default::default() };
        assert!((intr.hfov() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}
