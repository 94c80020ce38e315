//! Minimum energy filter core.
//!
//! Per observation `(g, y)` the residual `r = y − h(E)` drives a rank-one
//! gradient matrix `A(E)` whose se(3) projection, summed over the batch, is
//! the left-trivialized energy gradient. Its directional derivative is the
//! 6×6 matrix `D(E)` assembled from six sandwich-operator terms. The two
//! right-hand sides couple them:
//!
//! ```text
//!   Ė  = −E · mat(P · vec(Σ_k Pr A_k))
//!   Ṗ  = −αP + S⁻¹ − P Σ_k(Γ̃_{vec Pr A_k} + D_k) P − Γ̃*_z P + P (Γ̃*_z)ᵀ
//! ```
//!
//! with `z = vec(E⁻¹Ė)`. All per-observation sums run in ascending index
//! order so identical inputs give bit-identical outputs.

use crate::camera::{self, CameraError, Observation, ScenePoint, CHEIRALITY_EPS};
use crate::liegroup::{
    gamma_tilde, gamma_tilde_star, kron_se, kron_se_t, vec_ext, PoseSE3, Twist,
};
use nalgebra::{Matrix3, Matrix4, Matrix6, RowVector4, Vector3, Vector4, Vector6};
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum FilterError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("observation {index}: point at or behind the camera plane (kappa = {kappa:.3e})")]
    Cheirality { index: usize, kappa: f64 },
    #[error("frame {frame}: cheirality guard failed at observation indices {indices:?}")]
    FrameCheirality { frame: u32, indices: Vec<usize> },
    #[error("observation batch is empty")]
    EmptyBatch,
}

impl FilterError {
    fn from_camera(err: CameraError, index: usize) -> Self {
        match err {
            CameraError::Cheirality { kappa } => FilterError::Cheirality { index, kappa },
            CameraError::InvalidDepth { depth } => {
                FilterError::Config(format!("observation {index}: invalid depth {depth}"))
            }
        }
    }
}

/// Filter weights and integration controls.
///
/// `S` penalizes the model twist, `Q` the observation residuals; both must
/// be symmetric positive definite. `alpha` is the information decay rate per
/// frame. One frame interval is integrated in `substeps` steps of size `h`,
/// so `h·substeps` must span exactly one frame.
#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub alpha: f64,
    pub s: Matrix6<f64>,
    pub q: Matrix3<f64>,
    pub e0: PoseSE3,
    pub p0_scale: f64,
    pub h: f64,
    pub substeps: u32,
    pub outlier_quantile: f64,
    pub symmetrize_p: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            alpha: 0.0,
            s: Matrix6::identity(),
            q: Matrix3::identity(),
            e0: PoseSE3::identity(),
            p0_scale: 1.0,
            h: 0.001,
            substeps: 1000,
            outlier_quantile: 0.8,
            symmetrize_p: false,
        }
    }
}

impl FilterConfig {
    /// Convenience constructor for the diagonal weight layout
    /// `S = diag(s1,s1,s1,s2,s2,s2)`, `Q = q·I₃`.
    pub fn with_diagonal_weights(s1: f64, s2: f64, q: f64) -> Self {
        FilterConfig {
            s: Matrix6::from_diagonal(&Vector6::new(s1, s1, s1, s2, s2, s2)),
            q: Matrix3::identity() * q,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(FilterError::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if nalgebra::Cholesky::new(self.s).is_none() {
            return Err(FilterError::Config(
                "S is not symmetric positive definite".to_string(),
            ));
        }
        if nalgebra::Cholesky::new(self.q).is_none() {
            return Err(FilterError::Config(
                "Q is not symmetric positive definite".to_string(),
            ));
        }
        if !(self.p0_scale.is_finite() && self.p0_scale > 0.0) {
            return Err(FilterError::Config(format!(
                "p0_scale must be > 0, got {}",
                self.p0_scale
            )));
        }
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(FilterError::Config(format!(
                "step size h must be > 0, got {}",
                self.h
            )));
        }
        if self.substeps < 1 {
            return Err(FilterError::Config("substeps must be >= 1".to_string()));
        }
        if (self.h * self.substeps as f64 - 1.0).abs() > 1e-9 {
            return Err(FilterError::Config(format!(
                "h*substeps must span one frame, got {} * {} = {}",
                self.h,
                self.substeps,
                self.h * self.substeps as f64
            )));
        }
        if !(self.outlier_quantile > 0.0 && self.outlier_quantile <= 1.0) {
            return Err(FilterError::Config(format!(
                "outlier_quantile must be in (0, 1], got {}",
                self.outlier_quantile
            )));
        }
        Ok(())
    }

    /// `S⁻¹` via Cholesky; call [`validate`](Self::validate) first.
    pub fn s_inv(&self) -> Matrix6<f64> {
        nalgebra::Cholesky::new(self.s)
            .expect("S must be SPD (validate() enforces this)")
            .inverse()
    }
}

/// Current optimal pose estimate, second-order information matrix and time.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub e: PoseSE3,
    pub p: Matrix6<f64>,
    pub t: f64,
}

/// Per-frame set of scene points with their observed flow endpoints.
#[derive(Debug, Clone)]
pub struct ObservationBatch {
    pub items: Vec<(ScenePoint, Observation)>,
    pub frame: u32,
}

impl ObservationBatch {
    pub fn new(frame: u32, items: Vec<(ScenePoint, Observation)>) -> Self {
        ObservationBatch { items, frame }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Observation energy `½ Σ_k ‖y_k − h_k(E)‖²_Q`.
pub fn obs_energy(
    e: &PoseSE3,
    batch: &ObservationBatch,
    q: &Matrix3<f64>,
) -> Result<f64, FilterError> {
    let mut acc = 0.0;
    for (k, (g, obs)) in batch.items.iter().enumerate() {
        let h = camera::observe(e, g).map_err(|err| FilterError::from_camera(err, k))?;
        let r = obs.vector() - h;
        acc += 0.5 * (r.transpose() * q * r)[0];
    }
    Ok(acc)
}

/// Left-trivialized optimal Hamiltonian,
/// `e^{−α(t−t₀)}·obs_energy − ½ e^{α(t−t₀)} vec(μ)ᵀ S⁻¹ vec(μ)` with `t₀ = 0`.
/// Diagnostic only; the runtime ODEs never evaluate it.
pub fn hamiltonian(
    e: &PoseSE3,
    mu: &Twist,
    batch: &ObservationBatch,
    cfg: &FilterConfig,
    t: f64,
) -> Result<f64, FilterError> {
    let obs = obs_energy(e, batch, &cfg.q)?;
    let s_inv = cfg.s_inv();
    let quad = (mu.gamma.transpose() * s_inv * mu.gamma)[0];
    Ok((-cfg.alpha * t).exp() * obs - 0.5 * (cfg.alpha * t).exp() * quad)
}

/// Shared per-observation geometry: `p = E⁻¹g`, `w = Îp`, `κ = p₃`,
/// residual `r = y − w/κ` and the weighted contractions.
struct ObsGeometry {
    p: Vector4<f64>,
    kappa: f64,
    qr: Vector3<f64>,
    qw: Vector3<f64>,
    q_wr: f64,
    q_ww: f64,
}

fn obs_geometry(
    e: &PoseSE3,
    g: &ScenePoint,
    y: &Vector3<f64>,
    q: &Matrix3<f64>,
) -> Result<ObsGeometry, CameraError> {
    let p = e.inverse().matrix() * g.homogeneous();
    let kappa = p[2];
    if kappa.abs() <= CHEIRALITY_EPS {
        return Err(CameraError::Cheirality { kappa });
    }
    let w = Vector3::new(p[0], p[1], p[2]);
    let h = Vector3::new(p[0] / kappa, p[1] / kappa, 1.0);
    let r = y - h;
    let qr = q * r;
    let qw = q * w;
    Ok(ObsGeometry {
        p,
        kappa,
        q_wr: w.dot(&qr),
        q_ww: w.dot(&qw),
        qr,
        qw,
    })
}

fn embed3(v: &Vector3<f64>) -> Vector4<f64> {
    Vector4::new(v[0], v[1], v[2], 0.0)
}

const E3_HOM: Vector4<f64> = Vector4::new(0.0, 0.0, 1.0, 0.0);

/// Gradient matrix of the observation energy for a single observation:
/// `A(E) = (κ⁻¹Î − κ⁻²Î E⁻¹g e₃ᵀÎ)ᵀ Q (y − h(E)) gᵀ E⁻ᵀ`, a rank-one 4×4
/// matrix that vanishes at zero residual. `⟨Pr A, Ω⟩` is the directional
/// derivative of the observation energy along `E·exp(tΩ)`.
pub fn a_matrix(
    e: &PoseSE3,
    g: &ScenePoint,
    y: &Vector3<f64>,
    q: &Matrix3<f64>,
) -> Result<Matrix4<f64>, CameraError> {
    let geo = obs_geometry(e, g, y, q)?;
    Ok(a_from_geometry(&geo))
}

fn a_from_geometry(geo: &ObsGeometry) -> Matrix4<f64> {
    let k1 = 1.0 / geo.kappa;
    let k2 = k1 * k1;
    let u = embed3(&geo.qr) * k1 - E3_HOM * (geo.q_wr * k2);
    u * geo.p.transpose()
}

/// Left-trivialized gradient of the observation energy: `Σ_k Pr(A_k(E))`
/// as a twist, accumulated in ascending `k`.
pub fn grad_obs(
    e: &PoseSE3,
    batch: &ObservationBatch,
    q: &Matrix3<f64>,
) -> Result<Twist, FilterError> {
    let mut acc = Vector6::zeros();
    for (k, (g, obs)) in batch.items.iter().enumerate() {
        let a = a_matrix(e, g, obs.vector(), q).map_err(|err| FilterError::from_camera(err, k))?;
        acc += vec_ext(&a);
    }
    Ok(Twist::new(acc))
}

/// The six sandwich-operator terms of `D(E)` in a fixed order. Terms 1–4 are
/// linear in the residual and vanish at an exact fit; terms 5 and 6 are the
/// residual-independent (Gauss–Newton) part.
fn d_terms_with_q(geo: &ObsGeometry, q: &Matrix3<f64>) -> [Matrix6<f64>; 6] {
    let k1 = 1.0 / geo.kappa;
    let k2 = k1 * k1;
    let k3 = k2 * k1;
    let k4 = k2 * k2;
    let ppt = geo.p * geo.p.transpose();
    let e3t_ihat = RowVector4::new(0.0, 0.0, 1.0, 0.0);
    let ihat_t_qr = embed3(&geo.qr);
    let ihat_t_qw = embed3(&geo.qw);

    let mut ihat_t_q_ihat = Matrix4::zeros();
    ihat_t_q_ihat.fixed_view_mut::<3, 3>(0, 0).copy_from(q);
    let mut wt_q_ihat = RowVector4::zeros();
    for c in 0..3 {
        wt_q_ihat[c] = geo.qw[c];
    }

    let t1 = kron_se(&(ihat_t_qr * e3t_ihat * k2), &ppt);
    let t2 = kron_se(&(E3_HOM * e3t_ihat * (-2.0 * k3 * geo.q_wr)), &ppt);
    let t3 = kron_se_t(
        &(E3_HOM * geo.p.transpose() * k2),
        &(ihat_t_qr * geo.p.transpose()),
    );
    // Term 4 is −A ⊗ᵀ I with the same rank-one A as the gradient.
    let t4 = kron_se_t(&(-a_from_geometry(geo)), &Matrix4::identity());
    let t5 = kron_se(
        &(ihat_t_qw * e3t_ihat * (-k3) + E3_HOM * e3t_ihat * (k4 * geo.q_ww)),
        &ppt,
    );
    let t6 = kron_se(
        &(ihat_t_q_ihat * k2 - E3_HOM * wt_q_ihat * k3),
        &ppt,
    );
    [t1, t2, t3, t4, t5, t6]
}

/// The 6×6 matrix with `D(E)·vec(Ω) = vec_ext(D A(E)[EΩ])` for all Ω ∈ se(3),
/// assembled term by term from the sandwich operators.
pub fn d_matrix(
    e: &PoseSE3,
    g: &ScenePoint,
    y: &Vector3<f64>,
    q: &Matrix3<f64>,
) -> Result<Matrix6<f64>, CameraError> {
    let geo = obs_geometry(e, g, y, q)?;
    let terms = d_terms_with_q(&geo, q);
    let mut sum = Matrix6::zeros();
    for t in &terms {
        sum += t;
    }
    Ok(sum)
}

/// The residual-linear part of `D(E)` (terms 1–4). Exposed for the
/// decomposition tests: `D(E; y+Δ) − D(E; y)` equals this part evaluated at
/// residual `Δ`.
#[doc(hidden)]
pub fn d_matrix_residual_part(
    e: &PoseSE3,
    g: &ScenePoint,
    y: &Vector3<f64>,
    q: &Matrix3<f64>,
) -> Result<Matrix6<f64>, CameraError> {
    let geo = obs_geometry(e, g, y, q)?;
    let terms = d_terms_with_q(&geo, q);
    Ok(terms[0] + terms[1] + terms[2] + terms[3])
}

/// Left-trivialized velocity of the estimate: `Ω_E = −mat(P·vec(Σ_k Pr A_k))`;
/// the pose moves as `Ė = E·Ω_E`.
pub fn rhs_state(
    state: &FilterState,
    batch: &ObservationBatch,
    cfg: &FilterConfig,
) -> Result<Twist, FilterError> {
    let grad = grad_obs(&state.e, batch, &cfg.q)?;
    Ok(Twist::new(-(state.p * grad.gamma)))
}

/// Information-matrix ODE right-hand side. `omega_e` must be the twist
/// returned by [`rhs_state`] for the same `(state, batch)`. With an empty
/// batch and `omega_e = 0` this reduces to `−αP + S⁻¹`.
pub fn rhs_p(
    state: &FilterState,
    batch: &ObservationBatch,
    cfg: &FilterConfig,
    omega_e: &Twist,
) -> Result<Matrix6<f64>, FilterError> {
    let mut coupling = Matrix6::zeros();
    for (k, (g, obs)) in batch.items.iter().enumerate() {
        let geo = obs_geometry(&state.e, g, obs.vector(), &cfg.q)
            .map_err(|err| FilterError::from_camera(err, k))?;
        let a = a_from_geometry(&geo);
        coupling += gamma_tilde(&vec_ext(&a));
        let terms = d_terms_with_q(&geo, &cfg.q);
        for t in &terms {
            coupling += t;
        }
    }
    let p = &state.p;
    let gs = gamma_tilde_star(&omega_e.gamma);
    Ok(-cfg.alpha * p + cfg.s_inv() - p * coupling * p - gs * p + p * gs.transpose())
}

/// Initial state `(E₀, p0_scale·I₆, t = 0)` after config validation.
pub fn init(cfg: &FilterConfig) -> Result<FilterState, FilterError> {
    cfg.validate()?;
    Ok(FilterState {
        e: cfg.e0,
        p: Matrix6::identity() * cfg.p0_scale,
        t: 0.0,
    })
}

/// Drops the high-energy tail of a batch: keeps points whose residual norm
/// `‖y − h(E)‖` does not exceed the `outlier_quantile` empirical quantile
/// (nearest rank). Points failing the cheirality guard count as infinite
/// energy. Never empties the batch; preserves observation order.
pub fn reject_outliers(
    e: &PoseSE3,
    batch: &ObservationBatch,
    cfg: &FilterConfig,
) -> ObservationBatch {
    if batch.is_empty() {
        return batch.clone();
    }
    let energies: Vec<f64> = batch
        .items
        .iter()
        .map(|(g, obs)| match camera::observe(e, g) {
            Ok(h) => (obs.vector() - h).norm(),
            Err(_) => f64::INFINITY,
        })
        .collect();
    let mut sorted = energies.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((cfg.outlier_quantile * n as f64).ceil() as usize).clamp(1, n);
    let threshold = sorted[rank - 1];
    // A NaN threshold means the estimate already diverged; dropping points
    // would only mask that, so keep the batch intact.
    if threshold.is_nan() {
        return batch.clone();
    }
    let items = batch
        .items
        .iter()
        .zip(&energies)
        .filter(|(_, &en)| en <= threshold)
        .map(|(item, _)| *item)
        .collect();
    ObservationBatch {
        items,
        frame: batch.frame,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{exp_se3, mat_inner, mat_se, pr_se3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn random_point(r: &mut ChaCha12Rng) -> ScenePoint {
        ScenePoint::new(
            r.random_range(-0.5..0.5),
            r.random_range(-0.5..0.5),
            r.random_range(2.0..50.0),
        )
        .unwrap()
    }

    fn random_pose(r: &mut ChaCha12Rng, scale: f64) -> PoseSE3 {
        exp_se3(&Twist::new(Vector6::from_fn(|_, _| {
            r.random_range(-scale..scale)
        })))
    }

    fn random_twist(r: &mut ChaCha12Rng, scale: f64) -> Twist {
        Twist::new(Vector6::from_fn(|_, _| r.random_range(-scale..scale)))
    }

    fn random_spd3(r: &mut ChaCha12Rng) -> Matrix3<f64> {
        let m = Matrix3::from_fn(|_, _| r.random_range(-1.0..1.0));
        m.transpose() * m + Matrix3::identity() * 0.5
    }

    fn exact_batch(e: &PoseSE3, points: &[ScenePoint], frame: u32) -> ObservationBatch {
        let items = points
            .iter()
            .map(|g| {
                let h = camera::observe(e, g).unwrap();
                (*g, Observation::new(h[0], h[1]))
            })
            .collect();
        ObservationBatch::new(frame, items)
    }

    fn noisy_batch(r: &mut ChaCha12Rng, e: &PoseSE3, n: usize, spread: f64) -> ObservationBatch {
        let items = (0..n)
            .map(|_| {
                let g = random_point(r);
                let h = camera::observe(e, &g).unwrap();
                (
                    g,
                    Observation::new(
                        h[0] + r.random_range(-spread..spread),
                        h[1] + r.random_range(-spread..spread),
                    ),
                )
            })
            .collect();
        ObservationBatch::new(1, items)
    }

    #[test]
    fn obs_energy_cases() {
        let mut r = rng(1);
        let e = random_pose(&mut r, 0.3);
        let points: Vec<_> = (0..10).map(|_| random_point(&mut r)).collect();
        let batch = exact_batch(&e, &points, 1);
        assert_eq!(obs_energy(&e, &batch, &Matrix3::identity()).unwrap(), 0.0);

        // Single observation, Q = I, residual (3,4,0) → ½·25.
        let g = ScenePoint::new(0.1, 0.2, 5.0).unwrap();
        let h = camera::observe(&PoseSE3::identity(), &g).unwrap();
        let batch = ObservationBatch::new(1, vec![(g, Observation::new(h[0] + 3.0, h[1] + 4.0))]);
        let en = obs_energy(&PoseSE3::identity(), &batch, &Matrix3::identity()).unwrap();
        assert!((en - 12.5).abs() < 1e-12);
    }

    #[test]
    fn obs_energy_matches_brute_force_sum() {
        let mut r = rng(2);
        let e = random_pose(&mut r, 0.3);
        let q = random_spd3(&mut r);
        let batch = noisy_batch(&mut r, &e, 20, 0.1);
        let energy = obs_energy(&e, &batch, &q).unwrap();
        let mut direct = 0.0;
        for (g, obs) in &batch.items {
            let res = obs.vector() - camera::observe(&e, g).unwrap();
            direct += 0.5 * res.dot(&(q * res));
        }
        assert!((energy - direct).abs() < 1e-12 * (1.0 + direct));
    }

    #[test]
    fn hamiltonian_reduces_to_obs_energy_at_zero_costate() {
        let mut r = rng(3);
        let e = random_pose(&mut r, 0.3);
        let batch = noisy_batch(&mut r, &e, 8, 0.05);
        let cfg = FilterConfig::default();
        let h0 = hamiltonian(&e, &Twist::zero(), &batch, &cfg, 0.0).unwrap();
        let en = obs_energy(&e, &batch, &cfg.q).unwrap();
        assert!((h0 - en).abs() < 1e-14 * (1.0 + en));

        let exact = exact_batch(&e, &[random_point(&mut r)], 1);
        assert_eq!(
            hamiltonian(&e, &Twist::zero(), &exact, &cfg, 0.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn hamiltonian_costate_hessian_is_scaled_inverse_weight() {
        // Second differences in μ recover −e^{αt}·S⁻¹.
        let mut r = rng(4);
        let e = random_pose(&mut r, 0.2);
        let batch = noisy_batch(&mut r, &e, 5, 0.05);
        let mut cfg = FilterConfig::with_diagonal_weights(0.7, 2.5, 1.0);
        cfg.alpha = 0.8;
        let t = 0.6;
        let s_inv = cfg.s_inv();
        let scale = (cfg.alpha * t).exp();
        let step = 1e-4;
        let mu0 = random_twist(&mut r, 0.5);
        for i in 0..6 {
            for j in 0..6 {
                let mut ei = Vector6::zeros();
                ei[i] = step;
                let mut ej = Vector6::zeros();
                ej[j] = step;
                let f =
                    |m: Vector6<f64>| hamiltonian(&e, &Twist::new(m), &batch, &cfg, t).unwrap();
                let hess = (f(mu0.gamma + ei + ej) - f(mu0.gamma + ei - ej)
                    - f(mu0.gamma - ei + ej)
                    + f(mu0.gamma - ei - ej))
                    / (4.0 * step * step);
                let expected = -scale * s_inv[(i, j)];
                assert!(
                    (hess - expected).abs() < 1e-6 * (1.0 + expected.abs()),
                    "hessian entry ({i},{j}): {hess} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn a_matrix_zero_residual_and_q_linearity() {
        let mut r = rng(5);
        let e = random_pose(&mut r, 0.3);
        let g = random_point(&mut r);
        let q = random_spd3(&mut r);
        let h = camera::observe(&e, &g).unwrap();
        assert_eq!(a_matrix(&e, &g, &h, &q).unwrap(), Matrix4::zeros());

        let y = Vector3::new(h[0] + 0.05, h[1] - 0.02, 1.0);
        let a1 = a_matrix(&e, &g, &y, &q).unwrap();
        let a2 = a_matrix(&e, &g, &y, &(q * 2.0)).unwrap();
        assert!((a2 - a1 * 2.0).norm() < 1e-12 * (1.0 + a1.norm()));
    }

    #[test]
    fn a_matrix_projection_matches_energy_directional_derivative() {
        let mut r = rng(6);
        let t = 1e-6;
        for _ in 0..100 {
            let e = random_pose(&mut r, 0.3);
            let g = random_point(&mut r);
            let q = random_spd3(&mut r);
            let h = camera::observe(&e, &g).unwrap();
            let y = Vector3::new(
                h[0] + r.random_range(-0.2..0.2),
                h[1] + r.random_range(-0.2..0.2),
                1.0,
            );
            let mut omega = random_twist(&mut r, 1.0);
            omega = omega * (1.0 / omega.norm());
            let batch = ObservationBatch::new(1, vec![(g, Observation::new(y[0], y[1]))]);

            let a = a_matrix(&e, &g, &y, &q).unwrap();
            let analytic = mat_inner(&pr_se3(&a), &omega.matrix());
            let ep = e * exp_se3(&(omega * t));
            let em = e * exp_se3(&(omega * -t));
            let fd = (obs_energy(&ep, &batch, &q).unwrap()
                - obs_energy(&em, &batch, &q).unwrap())
                / (2.0 * t);
            let denom = fd.abs().max(analytic.abs()).max(1e-12);
            assert!(
                (analytic - fd).abs() / denom < 1e-6,
                "directional derivative mismatch: {analytic} vs {fd}"
            );
        }
    }

    #[test]
    fn grad_obs_exact_fit_and_single_observation() {
        let mut r = rng(7);
        let e = random_pose(&mut r, 0.3);
        let points: Vec<_> = (0..12).map(|_| random_point(&mut r)).collect();
        let batch = exact_batch(&e, &points, 1);
        let q = random_spd3(&mut r);
        assert_eq!(grad_obs(&e, &batch, &q).unwrap().gamma, Vector6::zeros());

        let single = noisy_batch(&mut r, &e, 1, 0.1);
        let (g, obs) = &single.items[0];
        let a = a_matrix(&e, g, obs.vector(), &q).unwrap();
        let grad = grad_obs(&e, &single, &q).unwrap();
        assert!((grad.gamma - vec_ext(&a)).norm() < 1e-15);
    }

    #[test]
    fn grad_obs_matches_finite_differences_in_all_basis_directions() {
        let mut r = rng(8);
        let t = 1e-6;
        let e = random_pose(&mut r, 0.3);
        let q = random_spd3(&mut r);
        let batch = noisy_batch(&mut r, &e, 15, 0.15);
        let grad = grad_obs(&e, &batch, &q).unwrap();
        for i in 0..6 {
            let mut dir = Vector6::zeros();
            dir[i] = 1.0;
            let omega = Twist::new(dir);
            let fd = (obs_energy(&(e * exp_se3(&(omega * t))), &batch, &q).unwrap()
                - obs_energy(&(e * exp_se3(&(omega * -t))), &batch, &q).unwrap())
                / (2.0 * t);
            // ⟨Pr ΣA, B_i⟩ under tr(AᵀB): component i carries the basis norm.
            let weight = if i < 3 { 2.0 } else { 1.0 };
            let analytic = grad.gamma[i] * weight;
            let denom = fd.abs().max(analytic.abs()).max(1e-12);
            assert!((analytic - fd).abs() / denom < 1e-6);
        }
    }

    /// Central finite difference of `t ↦ vec_ext(A(E·exp(tΩ)))`.
    fn d_fd(
        e: &PoseSE3,
        g: &ScenePoint,
        y: &Vector3<f64>,
        q: &Matrix3<f64>,
        omega: &Twist,
        t: f64,
    ) -> Vector6<f64> {
        let ap = a_matrix(&(e * &exp_se3(&(*omega * t))), g, y, q).unwrap();
        let am = a_matrix(&(e * &exp_se3(&(*omega * -t))), g, y, q).unwrap();
        (vec_ext(&ap) - vec_ext(&am)) / (2.0 * t)
    }

    #[test]
    fn d_matrix_matches_finite_difference_jacobian() {
        let mut r = rng(9);
        let t = 1e-5;
        for _ in 0..50 {
            let e = random_pose(&mut r, 0.3);
            let g = random_point(&mut r);
            let q = random_spd3(&mut r);
            let h = camera::observe(&e, &g).unwrap();
            let y = Vector3::new(
                h[0] + r.random_range(-0.2..0.2),
                h[1] + r.random_range(-0.2..0.2),
                1.0,
            );
            let d = d_matrix(&e, &g, &y, &q).unwrap();
            let omega = random_twist(&mut r, 1.0);
            let analytic = d * omega.gamma;
            let fd = d_fd(&e, &g, &y, &q, &omega, t);
            let denom = fd.norm().max(analytic.norm()).max(1e-12);
            assert!(
                (analytic - fd).norm() / denom < 1e-5,
                "D mismatch: {analytic:?} vs {fd:?}"
            );
        }
    }

    #[test]
    fn d_matrix_zero_residual_keeps_only_geometric_terms() {
        let mut r = rng(10);
        let t = 1e-5;
        for _ in 0..20 {
            let e = random_pose(&mut r, 0.3);
            let g = random_point(&mut r);
            let q = random_spd3(&mut r);
            let h = camera::observe(&e, &g).unwrap();
            // At zero residual the residual-linear part vanishes...
            let res_part = d_matrix_residual_part(&e, &g, &h, &q).unwrap();
            assert!(res_part.norm() < 1e-12);
            // ...and what remains still matches finite differences.
            let d = d_matrix(&e, &g, &h, &q).unwrap();
            assert!(d.norm() > 1e-8, "geometric part should survive");
            let omega = random_twist(&mut r, 1.0);
            let analytic = d * omega.gamma;
            let fd = d_fd(&e, &g, &h, &q, &omega, t);
            let denom = fd.norm().max(analytic.norm()).max(1e-12);
            assert!((analytic - fd).norm() / denom < 1e-5);
        }
    }

    #[test]
    fn d_matrix_is_affine_in_observation() {
        let mut r = rng(11);
        for _ in 0..20 {
            let e = random_pose(&mut r, 0.3);
            let g = random_point(&mut r);
            let q = random_spd3(&mut r);
            let h = camera::observe(&e, &g).unwrap();
            let y0 = Vector3::new(h[0] + 0.03, h[1] - 0.07, 1.0);
            let dy = Vector3::new(r.random_range(-0.1..0.1), r.random_range(-0.1..0.1), 0.0);
            // The difference only carries the residual-linear terms…
            let diff = d_matrix(&e, &g, &(y0 + dy), &q).unwrap()
                - d_matrix(&e, &g, &y0, &q).unwrap();
            // …which equal the residual part evaluated at residual Δy.
            let res_at_dy = d_matrix_residual_part(&e, &g, &(h + dy), &q).unwrap();
            assert!((diff - res_at_dy).norm() < 1e-9 * (1.0 + res_at_dy.norm()));
        }
    }

    #[test]
    fn rhs_state_cases() {
        let mut r = rng(12);
        let e = random_pose(&mut r, 0.3);
        let q = random_spd3(&mut r);
        let points: Vec<_> = (0..10).map(|_| random_point(&mut r)).collect();
        let cfg = FilterConfig {
            q,
            ..Default::default()
        };

        // Exact fit → stationary for any P.
        let exact = exact_batch(&e, &points, 1);
        let state = FilterState {
            e,
            p: Matrix6::from_fn(|i, j| 0.1 * (i as f64 - j as f64) + if i == j { 2.0 } else { 0.0 }),
            t: 0.0,
        };
        assert_eq!(
            rhs_state(&state, &exact, &cfg).unwrap().gamma,
            Vector6::zeros()
        );

        // P = I → −grad; general P → −mat(P vec Σ Pr A) by composition.
        let noisy = noisy_batch(&mut r, &e, 10, 0.1);
        let id_state = FilterState {
            e,
            p: Matrix6::identity(),
            t: 0.0,
        };
        let grad = grad_obs(&e, &noisy, &cfg.q).unwrap();
        assert_eq!(
            rhs_state(&id_state, &noisy, &cfg).unwrap().gamma,
            -grad.gamma
        );
        let composed = -(state.p * grad.gamma);
        assert_eq!(rhs_state(&state, &noisy, &cfg).unwrap().gamma, composed);
        // mat/vec consistency of the returned twist
        let omega = rhs_state(&state, &noisy, &cfg).unwrap();
        assert_eq!(omega.matrix(), mat_se(&composed));
    }

    #[test]
    fn rhs_p_no_observations_reduces_to_linear_flow() {
        let cfg = FilterConfig::default();
        let state = FilterState {
            e: PoseSE3::identity(),
            p: Matrix6::identity() * 3.0,
            t: 0.0,
        };
        let empty = ObservationBatch::new(1, vec![]);
        // α = 0 → exactly S⁻¹.
        let pdot = rhs_p(&state, &empty, &cfg, &Twist::zero()).unwrap();
        assert_eq!(pdot, cfg.s_inv());

        let mut cfg2 = FilterConfig::with_diagonal_weights(0.5, 2.0, 1.0);
        cfg2.alpha = 1.3;
        let pdot2 = rhs_p(&state, &empty, &cfg2, &Twist::zero()).unwrap();
        assert!((pdot2 - (-cfg2.alpha * state.p + cfg2.s_inv())).norm() < 1e-14);
    }

    #[test]
    fn hessian_assembly_matches_riemannian_definition() {
        // The matrix M = Σ_k(Γ̃_{vec Pr A_k} + D_k) must represent the
        // Riemannian Hessian of the observation energy:
        //   (M·vecΓ)ᵀ G vecΩ = D(Df[EΩ])[EΓ] − Df[E·∇_Γ Ω]
        // with G the basis Gram matrix and ∇ the Levi-Civita connection.
        let mut r = rng(20);
        let table = crate::liegroup::christoffel();
        let gram = [2.0, 2.0, 2.0, 1.0, 1.0, 1.0];
        let ip = |a: &Vector6<f64>, b: &Vector6<f64>| -> f64 {
            (0..6).map(|i| gram[i] * a[i] * b[i]).sum()
        };
        let t = 1e-5;
        for _ in 0..20 {
            let e = random_pose(&mut r, 0.3);
            let q = random_spd3(&mut r);
            let batch = noisy_batch(&mut r, &e, 10, 0.1);

            let mut m = Matrix6::zeros();
            for (g, obs) in &batch.items {
                let a = a_matrix(&e, g, obs.vector(), &q).unwrap();
                m += gamma_tilde(&vec_ext(&a));
                m += d_matrix(&e, g, obs.vector(), &q).unwrap();
            }

            let gamma = random_twist(&mut r, 1.0);
            let omega = random_twist(&mut r, 1.0);
            let lhs = ip(&(m * gamma.gamma), &omega.gamma);

            // First term: derivative of ⟨grad, Ω⟩ along E·exp(tΓ).
            let pairing = |pose: &PoseSE3| {
                ip(&grad_obs(pose, &batch, &q).unwrap().gamma, &omega.gamma)
            };
            let fd = (pairing(&(&e * &exp_se3(&(gamma * t))))
                - pairing(&(&e * &exp_se3(&(gamma * -t)))))
                / (2.0 * t);
            // Correction: ⟨grad, ∇_Γ Ω⟩.
            let correction = ip(
                &grad_obs(&e, &batch, &q).unwrap().gamma,
                &table.connection(&gamma.gamma, &omega.gamma),
            );
            let rhs = fd - correction;
            let denom = lhs.abs().max(rhs.abs()).max(1e-9);
            assert!(
                (lhs - rhs).abs() / denom < 1e-5,
                "Hessian pairing mismatch: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn rhs_p_matches_term_by_term_reassembly() {
        let mut r = rng(13);
        let e = random_pose(&mut r, 0.3);
        let q = random_spd3(&mut r);
        let mut cfg = FilterConfig::with_diagonal_weights(0.8, 1.7, 1.0);
        cfg.q = q;
        cfg.alpha = 0.4;
        let batch = noisy_batch(&mut r, &e, 8, 0.1);
        let p = {
            let m = Matrix6::from_fn(|_, _| r.random_range(-0.5..0.5));
            m.transpose() * m + Matrix6::identity()
        };
        let state = FilterState { e, p, t: 0.0 };
        let omega_e = rhs_state(&state, &batch, &cfg).unwrap();
        let pdot = rhs_p(&state, &batch, &cfg, &omega_e).unwrap();

        let mut m = Matrix6::zeros();
        for (g, obs) in &batch.items {
            let a = a_matrix(&e, g, obs.vector(), &cfg.q).unwrap();
            m += gamma_tilde(&vec_ext(&a));
            m += d_matrix(&e, g, obs.vector(), &cfg.q).unwrap();
        }
        let gs = gamma_tilde_star(&omega_e.gamma);
        let expected =
            -cfg.alpha * p + cfg.s_inv() - p * m * p - gs * p + p * gs.transpose();
        assert!((pdot - expected).norm() < 1e-10 * (1.0 + expected.norm()));
    }

    #[test]
    fn init_accepts_reference_parameter_sets() {
        // Defaults.
        let state = init(&FilterConfig::default()).unwrap();
        assert_eq!(state.e, PoseSE3::identity());
        assert_eq!(state.p, Matrix6::identity());
        assert_eq!(state.t, 0.0);

        // Strong-decay set: α = 2, S = diag(1e-3…,1e-6…), Q = 0.02·I.
        let mut fig2 = FilterConfig::with_diagonal_weights(1e-3, 1e-6, 0.02);
        fig2.alpha = 2.0;
        assert!(init(&fig2).is_ok());

        // No-decay set: α = 0, Q = 0.1·I, S = λ·diag(1e-3…,1e-6…).
        for i in 0..5 {
            let lambda = 10f64.powi(i);
            let mut cfg = FilterConfig::with_diagonal_weights(lambda * 1e-3, lambda * 1e-6, 0.1);
            cfg.alpha = 0.0;
            assert!(init(&cfg).is_ok());
        }
    }

    #[test]
    fn init_rejects_invalid_weights() {
        let mut cfg = FilterConfig::default();
        cfg.s[(0, 0)] = -1.0;
        assert!(matches!(init(&cfg), Err(FilterError::Config(_))));

        let cfg = FilterConfig {
            q: Matrix3::zeros(),
            ..Default::default()
        };
        assert!(init(&cfg).is_err());

        let cfg = FilterConfig {
            substeps: 7, // h*substeps != 1
            ..Default::default()
        };
        assert!(init(&cfg).is_err());

        let cfg = FilterConfig {
            outlier_quantile: 0.0,
            ..Default::default()
        };
        assert!(init(&cfg).is_err());
    }

    #[test]
    fn reject_outliers_cases() {
        let mut r = rng(14);
        let e = PoseSE3::identity();
        let cfg = FilterConfig::default();

        // All residuals exactly equal (zero) → unchanged.
        let g: Vec<_> = (0..10).map(|_| random_point(&mut r)).collect();
        let items: Vec<_> = g
            .iter()
            .map(|p| {
                let h = camera::observe(&e, p).unwrap();
                (*p, Observation::new(h[0], h[1]))
            })
            .collect();
        let batch = ObservationBatch::new(1, items);
        assert_eq!(reject_outliers(&e, &batch, &cfg).len(), 10);

        // One point with far larger energy is dropped at quantile 0.8.
        let mut items: Vec<_> = g
            .iter()
            .take(9)
            .map(|p| {
                let h = camera::observe(&e, p).unwrap();
                (*p, Observation::new(h[0] + 0.01, h[1]))
            })
            .collect();
        let h = camera::observe(&e, &g[9]).unwrap();
        items.push((g[9], Observation::new(h[0] + 1.0, h[1])));
        let batch = ObservationBatch::new(1, items);
        let kept = reject_outliers(&e, &batch, &cfg);
        assert_eq!(kept.len(), 9);
        // The big-residual point is gone.
        for (gp, obs) in &kept.items {
            let h = camera::observe(&e, gp).unwrap();
            assert!((obs.vector() - h).norm() < 0.5);
        }

        // Quantile 1.0 keeps everything.
        let cfg1 = FilterConfig {
            outlier_quantile: 1.0,
            ..Default::default()
        };
        assert_eq!(reject_outliers(&e, &batch, &cfg1).len(), 10);
    }

    #[test]
    fn reject_outliers_treats_cheirality_failures_as_infinite_energy() {
        let mut r = rng(15);
        let e = PoseSE3::from_parts(&Matrix3::identity(), &Vector3::new(0.0, 0.0, 2.0)).unwrap();
        let behind = ScenePoint::new(0.0, 0.0, 2.0).unwrap(); // κ = 0
        let mut items: Vec<_> = (0..9)
            .map(|_| {
                let g = ScenePoint::new(
                    r.random_range(-0.5..0.5),
                    r.random_range(-0.5..0.5),
                    r.random_range(10.0..50.0),
                )
                .unwrap();
                let h = camera::observe(&e, &g).unwrap();
                (g, Observation::new(h[0], h[1]))
            })
            .collect();
        items.insert(4, (behind, Observation::new(0.0, 0.0)));
        let batch = ObservationBatch::new(1, items);
        let kept = reject_outliers(&e, &batch, &FilterConfig::default());
        assert_eq!(kept.len(), 9);
        assert!(kept.items.iter().all(|(g, _)| g.depth() > 5.0));
    }

    #[test]
    fn batch_ops_report_offending_index() {
        let e = PoseSE3::from_parts(&Matrix3::identity(), &Vector3::new(0.0, 0.0, 2.0)).unwrap();
        let fine = ScenePoint::new(0.1, 0.1, 10.0).unwrap();
        let behind = ScenePoint::new(0.0, 0.0, 2.0).unwrap();
        let h = camera::observe(&e, &fine).unwrap();
        let batch = ObservationBatch::new(
            3,
            vec![
                (fine, Observation::new(h[0], h[1])),
                (behind, Observation::new(0.0, 0.0)),
            ],
        );
        match obs_energy(&e, &batch, &Matrix3::identity()) {
            Err(FilterError::Cheirality { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected cheirality at index 1, got {other:?}"),
        }
    }
}
