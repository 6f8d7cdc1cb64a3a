//! Hidden point removal with spherical shell compression.
//!
//! The cloud is moved to camera-centered coordinates, its radii are squeezed
//! linearly into a thin shell `[s_min, s_max]`, then every point is flipped
//! through a sphere of radius `flip_radius_factor * s_max`. Points whose flipped
//! image lies on the convex hull of the flipped set (plus the origin) are
//! visible. Squeezing first makes the result independent of absolute scene
//! size, so one flip radius works for a corridor and for a campus.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point3, Pose, Vec3};
use crate::hull::{self, HullError};

pub const EPSILON_RADIUS: f64 = 1e-6;
pub const EPSILON_ORIGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HprError {
    #[error("invalid shell parameters: s_min={s_min}, s_max={s_max}")]
    InvalidShell { s_min: f64, s_max: f64 },
    #[error("flip radius factor must be > 1, got {0}")]
    InvalidFlipFactor(f64),
    #[error("degenerate cloud: {0}")]
    DegenerateCloud(String),
    #[error(transparent)]
    Hull(#[from] HullError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShellParams {
    pub s_min: f64,
    pub s_max: f64,
}

impl Default for ShellParams {
    fn default() -> Self {
        Self { s_min: 0.9, s_max: 1.0 }
    }
}

impl ShellParams {
    pub fn new(s_min: f64, s_max: f64) -> Result<Self, HprError> {
        let p = Self { s_min, s_max };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), HprError> {
        if self.s_min > 0.0 && self.s_min < self.s_max && self.s_max.is_finite() {
            Ok(())
        } else {
            Err(HprError::InvalidShell {
                s_min: self.s_min,
                s_max: self.s_max,
            })
        }
    }

    /// Shell thickness.
    pub fn t(&self) -> f64 {
        self.s_max - self.s_min
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HprConfig {
    pub shell: ShellParams,
    pub flip_radius_factor: f64,
    /// Points further than this from the camera are reported hidden and skipped.
    pub max_range: Option<f64>,
    pub hull_tolerance: f64,
}

impl Default for HprConfig {
    fn default() -> Self {
        Self {
            shell: ShellParams::default(),
            flip_radius_factor: 10.0,
            max_range: None,
            hull_tolerance: hull::DEFAULT_TOLERANCE,
        }
    }
}

impl HprConfig {
    pub fn validate(&self) -> Result<(), HprError> {
        self.shell.validate()?;
        if !(self.flip_radius_factor > 1.0 && self.flip_radius_factor.is_finite()) {
            return Err(HprError::InvalidFlipFactor(self.flip_radius_factor));
        }
        Ok(())
    }
}

/// Radially remaps camera-centered points into the shell. The nearest point lands
/// on `s_min`, the farthest on `s_max`, and directions are unchanged.
pub fn shell_compress(points: &[Vec3], params: &ShellParams) -> Result<Vec<Vec3>, HprError> {
    params.validate()?;
    let radii: Vec<f64> = points.iter().map(|p| p.norm()).collect();
    if let Some(i) = radii.iter().position(|&r| r < EPSILON_ORIGIN) {
        return Err(HprError::DegenerateCloud(format!("point {i} coincides with the camera center")));
    }
    let p_min = radii.iter().copied().fold(f64::INFINITY, f64::min);
    let p_max = radii.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(p_max - p_min >= EPSILON_RADIUS) {
        return Err(HprError::DegenerateCloud(format!(
            "radius spread {} is below {EPSILON_RADIUS}",
            p_max - p_min
        )));
    }
    let span = p_max - p_min;
    let t = params.t();
    Ok(points
        .iter()
        .zip(&radii)
        .map(|(p, &r)| {
            let comp = (r - p_min) / span * t + params.s_min;
            p * (comp / r)
        })
        .collect())
}

/// Reflects each point through the sphere of the given radius, preserving direction.
pub fn spherical_flip(points: &[Vec3], radius: f64) -> Vec<Vec3> {
    points
        .iter()
        .map(|q| {
            let r = q.norm();
            q + q * (2.0 * (radius - r) / r)
        })
        .collect()
}

/// Visibility of every cloud point from the camera center of `pose`.
pub fn hidden_point_removal(cloud: &[Point3], pose: &Pose, config: &HprConfig) -> Result<Vec<bool>, HprError> {
    config.validate()?;
    let center = pose.center();
    let mut ids = Vec::with_capacity(cloud.len());
    let mut local = Vec::with_capacity(cloud.len() + 1);
    for (i, p) in cloud.iter().enumerate() {
        let d = p - center;
        if config.max_range.map_or(true, |r| d.norm() <= r) {
            ids.push(i);
            local.push(d);
        }
    }
    let mut mask = vec![false; cloud.len()];
    if local.is_empty() {
        return Ok(mask);
    }
    let compressed = shell_compress(&local, &config.shell)?;
    let mut flipped = spherical_flip(&compressed, config.flip_radius_factor * config.shell.s_max);
    flipped.push(Vec3::zeros());
    let hull = hull::quickhull(&flipped, config.hull_tolerance)?;
    let member = hull.membership(flipped.len(), true);
    for (k, &i) in ids.iter().enumerate() {
        mask[i] = member[k];
    }
    Ok(mask)
}
