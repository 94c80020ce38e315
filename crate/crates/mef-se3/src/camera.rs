//! Pinhole observation model.
//!
//! Scene points are stored as normalized image coordinates plus depth and
//! expanded to the homogeneous form `g = (d·x₁, d·x₂, d, 1)` on demand.
//! Observing a point under an incremental motion `E` projects `E⁻¹g` through
//! the first three homogeneous rows; intrinsics are assumed to be applied
//! upstream, so none appear here.

use crate::liegroup::{PoseSE3, Twist};
use nalgebra::{Vector3, Vector4};
use thiserror::Error;

/// Guard on the projective depth `κ`; points with `|κ|` at or below this are
/// treated as being on the camera plane.
pub const CHEIRALITY_EPS: f64 = 1e-9;

/// Guard on the third component in [`project`].
const PROJECT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Error)]
pub enum CameraError {
    #[error("point at or behind the camera plane (kappa = {kappa:.3e})")]
    Cheirality { kappa: f64 },
    #[error("depth must be positive and finite, got {depth}")]
    InvalidDepth { depth: f64 },
}

/// A scene point: normalized image coordinates `(x₁, x₂)` (third coordinate
/// 1) and depth `d > 0` in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePoint {
    x1: f64,
    x2: f64,
    depth: f64,
}

impl ScenePoint {
    pub fn new(x1: f64, x2: f64, depth: f64) -> Result<Self, CameraError> {
        if !(depth.is_finite() && depth > 0.0) {
            return Err(CameraError::InvalidDepth { depth });
        }
        Ok(ScenePoint { x1, x2, depth })
    }

    pub fn image_point(&self) -> Vector3<f64> {
        Vector3::new(self.x1, self.x2, 1.0)
    }

    pub fn depth(&self) -> f64 {
        self.depth
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    /// Homogeneous form `(d·x₁, d·x₂, d, 1)`; the fourth coordinate is
    /// exactly 1 and the third recovers the depth.
    pub fn homogeneous(&self) -> Vector4<f64> {
        Vector4::new(
            self.depth * self.x1,
            self.depth * self.x2,
            self.depth,
            1.0,
        )
    }
}

/// An observed projective flow endpoint; the third coordinate is exactly 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    y: Vector3<f64>,
}

impl Observation {
    pub fn new(y1: f64, y2: f64) -> Self {
        Observation {
            y: Vector3::new(y1, y2, 1.0),
        }
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.y
    }
}

/// Perspective projection `p ↦ p/p₃`; the third component of the result is
/// exactly 1.
pub fn project(p: &Vector3<f64>) -> Result<Vector3<f64>, CameraError> {
    if p[2].abs() <= PROJECT_EPS {
        return Err(CameraError::Cheirality { kappa: p[2] });
    }
    Ok(Vector3::new(p[0] / p[2], p[1] / p[2], 1.0))
}

/// Projective depth of `g` seen through `E`: the third component of `Î E⁻¹ g`.
/// At the identity this is the stored depth.
pub fn kappa(e: &PoseSE3, g: &ScenePoint) -> f64 {
    (e.inverse().matrix() * g.homogeneous())[2]
}

/// The observation map `h(E) = P_C(Î E⁻¹ g)`.
pub fn observe(e: &PoseSE3, g: &ScenePoint) -> Result<Vector3<f64>, CameraError> {
    let p = e.inverse().matrix() * g.homogeneous();
    let k = p[2];
    if k.abs() <= CHEIRALITY_EPS {
        return Err(CameraError::Cheirality { kappa: k });
    }
    Ok(Vector3::new(p[0] / k, p[1] / k, 1.0))
}

/// Directional derivative of the observation map along `E·exp(tΩ)`:
/// `Dh(E)[EΩ] = −κ⁻¹ Î Ω E⁻¹ g + κ⁻² (e₃ᵀ Î Ω E⁻¹ g) Î E⁻¹ g`.
/// The third component is 0 by construction.
pub fn dh(e: &PoseSE3, g: &ScenePoint, omega: &Twist) -> Result<Vector3<f64>, CameraError> {
    let p = e.inverse().matrix() * g.homogeneous();
    let k = p[2];
    if k.abs() <= CHEIRALITY_EPS {
        return Err(CameraError::Cheirality { kappa: k });
    }
    let op = omega.matrix() * p;
    let s = op[2];
    let k2 = k * k;
    Ok(Vector3::new(
        -op[0] / k + s * p[0] / k2,
        -op[1] / k + s * p[1] / k2,
        0.0,
    ))
}
