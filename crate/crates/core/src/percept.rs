//! Obstacle perception: affine alignment of pseudo-depth, thresholding into a
//! binary near-field mask, mask statistics and the LEFT/RIGHT/CENTER decision.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcam::DepthMap;

#[derive(Debug, Error, PartialEq)]
pub enum PerceptError {
    #[error("need at least two samples of equal length (got {0} and {1})")]
    BadSamples(usize, usize),
    #[error("predicted disparities are constant; scale is unobservable")]
    Unobservable,
    #[error("reference map does not match the frame")]
    ReferenceMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "LEFT")]
    Left,
    #[serde(rename = "RIGHT")]
    Right,
    #[serde(rename = "CENTER")]
    Center,
}

impl Direction {
    pub fn token(self) -> &'static str {
        match self {
            Direction::Left => "LEFT",
            Direction::Right => "RIGHT",
            Direction::Center => "CENTER",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        match s {
            "LEFT" => Some(Direction::Left),
            "RIGHT" => Some(Direction::Right),
            "CENTER" => Some(Direction::Center),
            _ => None,
        }
    }

    pub fn mirrored(self) -> Self {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::Center => Direction::Center,
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

/// One avoidance decision as sent to the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvoidCommandMsg {
    pub direction: Direction,
    pub seq: u32,
    pub white_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub s: f64,
    pub t: f64,
}

impl AffineFit {
    pub fn apply(&self, d: f64) -> f64 {
        self.s * d + self.t
    }
}

/// Least-squares scale and shift mapping predicted disparities onto the
/// reference ones: `argmin_{s,t} sum (s d_i + t - d*_i)^2`.
///
/// Solves the 2x2 normal equations in centered form, which eliminates `t`
/// and keeps the scale estimate well conditioned for large offsets.
pub fn align_depth(d: &[f64], d_star: &[f64]) -> Result<AffineFit, PerceptError> {
    if d.len() != d_star.len() || d.len() < 2 {
        return Err(PerceptError::BadSamples(d.len(), d_star.len()));
    }
    let n = d.len() as f64;
    let mean_d = d.iter().sum::<f64>() / n;
    let mean_r = d_star.iter().sum::<f64>() / n;
    let (sxx, sxy) = d.iter().zip(d_star).fold((0.0, 0.0), |(sxx, sxy), (&x, &y)| {
        let dx = x - mean_d;
        (sxx + dx * dx, sxy + dx * (y - mean_r))
    });
    if !(sxx / n > 1e-12) {
        return Err(PerceptError::Unobservable);
    }
    let s = sxy / sxx;
    Ok(AffineFit { s, t: mean_r - s * mean_d })
}

/// Binary near-field mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObstacleMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl ObstacleMask {
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Left-right mirror image.
    pub fn mirrored(&self) -> Self {
        let mut bits = Vec::with_capacity(self.bits.len());
        for row in self.bits.chunks(self.width) {
            bits.extend(row.iter().rev());
        }
        Self {
            width: self.width,
            height: self.height,
            bits,
        }
    }
}

/// Marks pixels strictly above the threshold.
pub fn obstacle_mask(depth: &DepthMap, tau: f64) -> ObstacleMask {
    ObstacleMask {
        width: depth.width,
        height: depth.height,
        bits: depth.values.iter().map(|&v| v > tau).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskStats {
    pub white_count: usize,
    pub white_fraction: f64,
    /// Mean pixel position of set pixels; `None` for an empty mask.
    pub centroid: Option<(f64, f64)>,
}

pub fn mask_stats(mask: &ObstacleMask) -> MaskStats {
    let mut count = 0usize;
    let (mut sx, mut sy) = (0.0, 0.0);
    for (i, &set) in mask.bits.iter().enumerate() {
        if set {
            count += 1;
            sx += (i % mask.width) as f64;
            sy += (i / mask.width) as f64;
        }
    }
    let total = mask.width * mask.height;
    MaskStats {
        white_count: count,
        white_fraction: if total == 0 { 0.0 } else { count as f64 / total as f64 },
        centroid: (count > 0).then(|| (sx / count as f64, sy / count as f64)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionParams {
    /// Raw pseudo-depth threshold.
    pub tau: f64,
    /// Minimum white fraction to count as an obstacle.
    pub area_min: f64,
    /// Left/center boundary as a fraction of the image width.
    pub left_bound: f64,
    /// Center/right boundary as a fraction of the image width.
    pub right_bound: f64,
}

impl Default for DecisionParams {
    fn default() -> Self {
        Self {
            tau: 900.0,
            area_min: 0.05,
            left_bound: 1.0 / 3.0,
            right_bound: 2.0 / 3.0,
        }
    }
}

pub fn decide_command(stats: &MaskStats, width: usize, params: &DecisionParams) -> Direction {
    let Some((cx, _)) = stats.centroid else {
        return Direction::Center;
    };
    if stats.white_fraction < params.area_min {
        return Direction::Center;
    }
    let w = width as f64;
    // Pixel centers sit at half-integer positions.
    let cx = cx + 0.5;
    if cx < params.left_bound * w {
        Direction::Left
    } else if cx > params.right_bound * w {
        Direction::Right
    } else {
        Direction::Center
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptParams {
    #[serde(flatten)]
    pub decision: DecisionParams,
    /// Processing rate; frames closer together are dropped.
    pub rate_hz: f64,
    /// Time from frame capture until the decision reaches the controller, s.
    pub latency: f64,
    /// Align predictions to a reference map before thresholding.
    pub align: bool,
    /// Number of pixels sampled for alignment.
    pub align_samples: usize,
}

impl Default for PerceptParams {
    fn default() -> Self {
        Self {
            decision: DecisionParams::default(),
            rate_hz: 4.0,
            latency: 0.25,
            align: false,
            align_samples: 64,
        }
    }
}

/// Outcome of processing one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub direction: Direction,
    pub stats: MaskStats,
    pub fit: Option<AffineFit>,
}

/// Evenly strided sample indices over a frame.
fn sample_indices(len: usize, count: usize) -> impl Iterator<Item = usize> {
    let count = count.clamp(2, len.max(2));
    let stride = (len / count).max(1);
    // Offset by half a stride so samples avoid the first row and column.
    (0..count).map(move |i| (i * stride + stride / 2).min(len.saturating_sub(1)))
}

/// Full perception step on one frame. With alignment enabled, `reference`
/// supplies the disparities the prediction is fitted to.
pub fn process_frame(
    depth: &DepthMap,
    reference: Option<&DepthMap>,
    params: &PerceptParams,
) -> Result<Decision, PerceptError> {
    let mut fit = None;
    let mask = match (params.align, reference) {
        (true, Some(reference)) => {
            if reference.width != depth.width || reference.height != depth.height {
                return Err(PerceptError::ReferenceMismatch);
            }
            let idx: Vec<usize> = sample_indices(depth.values.len(), params.align_samples).collect();
            let d: Vec<f64> = idx.iter().map(|&i| depth.values[i]).collect();
            let r: Vec<f64> = idx.iter().map(|&i| reference.values[i]).collect();
            let f = align_depth(&d, &r)?;
            fit = Some(f);
            let aligned = DepthMap::new(depth.width, depth.height, depth.values.iter().map(|&v| f.apply(v)).collect());
            obstacle_mask(&aligned, params.decision.tau)
        }
        _ => obstacle_mask(depth, params.decision.tau),
    };
    let stats = mask_stats(&mask);
    Ok(Decision {
        direction: decide_command(&stats, depth.width, &params.decision),
        stats,
        fit,
    })
}
