//! Geometric time stepping.
//!
//! The pose ODE is advanced by a 2-stage Crouch–Grossman step (products of
//! exponentials, so the iterate stays on the group exactly); the information
//! matrix by a 2-stage Runge–Kutta (Heun) step. [`step_frame`] couples the
//! two over one frame interval against a batch held constant (zero-order
//! hold), sharing stage-consistent velocities between the updates.

use crate::camera::{kappa, CHEIRALITY_EPS};
use crate::filter::{
    reject_outliers, rhs_p, rhs_state, FilterConfig, FilterError, FilterState, ObservationBatch,
};
use crate::liegroup::{exp_se3, PoseSE3, Twist};
use nalgebra::Matrix6;

/// Substep layout for one frame interval; `h·substeps` must span exactly
/// one frame.
#[derive(Debug, Clone, Copy)]
pub struct StepPlan {
    pub h: f64,
    pub substeps: u32,
}

impl StepPlan {
    pub fn new(h: f64, substeps: u32) -> Result<Self, FilterError> {
        if !(h.is_finite() && h > 0.0) || substeps < 1 {
            return Err(FilterError::Config(format!(
                "invalid step plan: h = {h}, substeps = {substeps}"
            )));
        }
        if (h * substeps as f64 - 1.0).abs() > 1e-9 {
            return Err(FilterError::Config(format!(
                "h*substeps must span one frame, got {}",
                h * substeps as f64
            )));
        }
        Ok(StepPlan { h, substeps })
    }
}

/// One 2-stage Crouch–Grossman step for `Ė = E·φ(E)`:
/// `E⁺ = E·Exp(h/2·K₁)·Exp(h/2·K₂)` with `K₁ = φ(E)`, `K₂ = φ(E·Exp(h·K₁))`.
pub fn cg2_step<F, Err>(e: &PoseSE3, mut phi: F, h: f64) -> Result<PoseSE3, Err>
where
    F: FnMut(&PoseSE3) -> Result<Twist, Err>,
{
    let k1 = phi(e)?;
    let k2 = phi(&(e * &exp_se3(&(k1 * h))))?;
    Ok((e * &exp_se3(&(k1 * (h / 2.0)))) * exp_se3(&(k2 * (h / 2.0))))
}

/// One Heun step for `Ṗ = f(t, P)`:
/// `P⁺ = P + h/2·(f(t,P) + f(t+h, P + h·f(t,P)))`.
pub fn rk2_step<F, Err>(
    p: &Matrix6<f64>,
    mut f: F,
    t: f64,
    h: f64,
) -> Result<Matrix6<f64>, Err>
where
    F: FnMut(f64, &Matrix6<f64>) -> Result<Matrix6<f64>, Err>,
{
    let f1 = f(t, p)?;
    let predictor = p + f1 * h;
    let f2 = f(t + h, &predictor)?;
    Ok(p + (f1 + f2) * (h / 2.0))
}

/// Collects every observation index failing the cheirality guard at `e`.
fn cheirality_scan(e: &PoseSE3, batch: &ObservationBatch) -> Vec<usize> {
    batch
        .items
        .iter()
        .enumerate()
        .filter(|(_, (g, _))| kappa(e, g).abs() <= CHEIRALITY_EPS)
        .map(|(k, _)| k)
        .collect()
}

/// Advances the coupled state over one frame against a held batch.
///
/// Each substep evaluates both right-hand sides at the current `(E, P)` and
/// at the predicted stage point `(E·exp(hΩ₁), P + h·F₁)`, then applies the
/// Crouch–Grossman update to `E` and the Heun update to `P`. A cheirality
/// failure aborts the frame, listing all offending observation indices at
/// the failing stage pose.
pub fn step_frame(
    state: &FilterState,
    batch: &ObservationBatch,
    cfg: &FilterConfig,
) -> Result<FilterState, FilterError> {
    if batch.is_empty() {
        return Err(FilterError::EmptyBatch);
    }
    let plan = StepPlan::new(cfg.h, cfg.substeps)?;
    let frame_err = |e: &PoseSE3, err: FilterError| match err {
        FilterError::Cheirality { .. } => FilterError::FrameCheirality {
            frame: batch.frame,
            indices: cheirality_scan(e, batch),
        },
        other => other,
    };

    let mut e = state.e;
    let mut p = state.p;
    let h = plan.h;
    for _ in 0..plan.substeps {
        let stage1 = FilterState { e, p, t: state.t };
        let omega1 = rhs_state(&stage1, batch, cfg).map_err(|err| frame_err(&e, err))?;
        let f1 = rhs_p(&stage1, batch, cfg, &omega1).map_err(|err| frame_err(&e, err))?;

        let e_mid = e * exp_se3(&(omega1 * h));
        let p_mid = p + f1 * h;
        let stage2 = FilterState {
            e: e_mid,
            p: p_mid,
            t: state.t,
        };
        let omega2 = rhs_state(&stage2, batch, cfg).map_err(|err| frame_err(&e_mid, err))?;
        let f2 = rhs_p(&stage2, batch, cfg, &omega2).map_err(|err| frame_err(&e_mid, err))?;

        e = (e * exp_se3(&(omega1 * (h / 2.0)))) * exp_se3(&(omega2 * (h / 2.0)));
        p += (f1 + f2) * (h / 2.0);
        if cfg.symmetrize_p {
            p = (p + p.transpose()) / 2.0;
        }
    }
    Ok(FilterState {
        e,
        p,
        t: state.t + 1.0,
    })
}

/// Per-frame output of [`run_sequence`].
#[derive(Debug, Clone)]
pub struct FrameSummary {
    pub frame: u32,
    pub state: FilterState,
    /// Batch size after outlier rejection.
    pub n_used: usize,
    /// Mean residual norm over the used points at the post-step estimate.
    pub mean_residual: f64,
}

/// Runs the filter over a frame sequence: per frame, rejects the
/// high-energy observation tail at the current estimate and advances the
/// state by one frame.
pub fn run_sequence(
    cfg: &FilterConfig,
    batches: &[ObservationBatch],
) -> Result<Vec<FrameSummary>, FilterError> {
    let mut state = crate::filter::init(cfg)?;
    let mut out = Vec::with_capacity(batches.len());
    for batch in batches {
        let used = reject_outliers(&state.e, batch, cfg);
        state = step_frame(&state, &used, cfg)?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for (g, obs) in &used.items {
            if let Ok(h) = crate::camera::observe(&state.e, g) {
                sum += (obs.vector() - h).norm();
                n += 1;
            }
        }
        out.push(FrameSummary {
            frame: batch.frame,
            state: state.clone(),
            n_used: used.len(),
            mean_residual: if n > 0 { sum / n as f64 } else { f64::NAN },
        });
    }
    Ok(out)
}
