//! Synthetic ground truth and pose error metrics.
//!
//! A scene is a fixed set of image points with depths; a trajectory is a
//! piecewise-constant twist schedule. Per frame the generator emits the true
//! pose increment and the exact (or multiplicatively noise-corrupted)
//! observations of every visible point. Everything is deterministic in
//! `(seed, schedule, σ)`.

use crate::camera::{kappa, observe, Observation, ScenePoint, CHEIRALITY_EPS};
use crate::filter::ObservationBatch;
use crate::liegroup::{exp_se3, PoseSE3, Twist};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum SynthError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("sigma must be >= 0, got {0}")]
    InvalidSigma(f64),
    #[error("need at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("degenerate range: {0}")]
    DegenerateRange(String),
    #[error("frame {frame}: no scene point is visible under the true motion")]
    NoVisiblePoints { frame: u32 },
}

/// Piecewise-constant twist trajectory: each segment starts at `start_frame`
/// (strictly increasing, first segment at frame 1).
#[derive(Debug, Clone)]
pub struct TwistSchedule {
    segments: Vec<(u32, Twist)>,
}

impl TwistSchedule {
    pub fn new(segments: Vec<(u32, Twist)>) -> Result<Self, SynthError> {
        if segments.is_empty() {
            return Err(SynthError::InvalidSchedule("no segments".to_string()));
        }
        if segments[0].0 != 1 {
            return Err(SynthError::InvalidSchedule(format!(
                "first segment must start at frame 1, got {}",
                segments[0].0
            )));
        }
        for pair in segments.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(SynthError::InvalidSchedule(format!(
                    "start frames must be strictly increasing ({} then {})",
                    pair[0].0, pair[1].0
                )));
            }
        }
        Ok(TwistSchedule { segments })
    }

    pub fn constant(twist: Twist) -> Self {
        TwistSchedule {
            segments: vec![(1, twist)],
        }
    }

    /// The twist active at `frame` (>= 1).
    pub fn active(&self, frame: u32) -> &Twist {
        let mut current = &self.segments[0].1;
        for (start, twist) in &self.segments {
            if *start <= frame {
                current = twist;
            } else {
                break;
            }
        }
        current
    }

    pub fn segments(&self) -> &[(u32, Twist)] {
        &self.segments
    }
}

/// Multiplicative Gaussian observation noise, `y ← y·(1 + σ·N(0,1))` per
/// image coordinate.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self, SynthError> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(SynthError::InvalidSigma(sigma));
        }
        Ok(NoiseSpec { sigma, seed })
    }

    pub fn exact(seed: u64) -> Self {
        NoiseSpec { sigma: 0.0, seed }
    }
}

/// Samples `n >= 6` image points uniform in the box `[−fov, fov]²` with
/// depths uniform in `depth_range`; deterministic per seed.
pub fn gen_scene(
    n: usize,
    depth_range: (f64, f64),
    fov: f64,
    seed: u64,
) -> Result<Vec<ScenePoint>, SynthError> {
    if n < 6 {
        return Err(SynthError::TooFewPoints { min: 6, got: n });
    }
    let (dmin, dmax) = depth_range;
    if !(dmin.is_finite() && dmax.is_finite() && 0.0 < dmin && dmin < dmax) {
        return Err(SynthError::DegenerateRange(format!(
            "depth range ({dmin}, {dmax})"
        )));
    }
    if !(fov.is_finite() && fov > 0.0) {
        return Err(SynthError::DegenerateRange(format!("fov {fov}")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x1 = rng.random_range(-fov..fov);
        let x2 = rng.random_range(-fov..fov);
        let d = rng.random_range(dmin..dmax);
        out.push(ScenePoint::new(x1, x2, d).expect("generated depth is positive"));
    }
    Ok(out)
}

/// Generates one observation batch per frame plus the true pose increments.
///
/// Per frame the active twist gives the increment `E_gt = exp(τ)`; every
/// scene point still in front of the camera contributes
/// `y = observe(E_gt, g)`, with the first two coordinates scaled by
/// `(1 + σ·N(0,1))` when `σ > 0`. Invisible points are dropped for that
/// frame only.
pub fn gen_observations(
    schedule: &TwistSchedule,
    scene: &[ScenePoint],
    frames: u32,
    noise: &NoiseSpec,
) -> Result<(Vec<ObservationBatch>, Vec<PoseSE3>), SynthError> {
    if !(noise.sigma.is_finite() && noise.sigma >= 0.0) {
        return Err(SynthError::InvalidSigma(noise.sigma));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(noise.seed);
    let normal = StandardNormal;
    let mut batches = Vec::with_capacity(frames as usize);
    let mut increments = Vec::with_capacity(frames as usize);
    for frame in 1..=frames {
        let e_gt = exp_se3(schedule.active(frame));
        let mut items = Vec::with_capacity(scene.len());
        for g in scene {
            if kappa(&e_gt, g) <= CHEIRALITY_EPS {
                continue;
            }
            let y = observe(&e_gt, g).expect("kappa guard already checked");
            let (y1, y2) = if noise.sigma > 0.0 {
                let n1: f64 = normal.sample(&mut rng);
                let n2: f64 = normal.sample(&mut rng);
                (
                    y[0] * (1.0 + noise.sigma * n1),
                    y[1] * (1.0 + noise.sigma * n2),
                )
            } else {
                (y[0], y[1])
            };
            items.push((*g, Observation::new(y1, y2)));
        }
        if items.is_empty() {
            return Err(SynthError::NoVisiblePoints { frame });
        }
        batches.push(ObservationBatch::new(frame, items));
        increments.push(e_gt);
    }
    Ok((batches, increments))
}

/// Geodesic rotation angle between two rotations, in degrees.
pub fn rot_error_deg(r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let c = ((r_gt.transpose() * r_est).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Euclidean distance between two translations, in meters.
pub fn trans_error_m(v_est: &Vector3<f64>, v_gt: &Vector3<f64>) -> f64 {
    (v_est - v_gt).norm()
}
