//! Exact SE(3)/se(3) algebra.
//!
//! A twist `(γ₁..γ₃; γ₄..γ₆)` (angular; linear) corresponds to the 4×4
//! matrix with skew-symmetric rotation block and translation column:
//!
//! ```text
//!     ⎛  0   -γ₃   γ₂   γ₄ ⎞
//!     ⎜  γ₃   0   -γ₁   γ₅ ⎟
//!     ⎜ -γ₂   γ₁   0    γ₆ ⎟
//!     ⎝  0    0    0    0  ⎠
//! ```
//!
//! The inner product on matrices is `⟨A,B⟩ = tr(AᵀB)`, under which the basis
//! `B_i = mat_se(e_i)` is orthogonal with `⟨B_i,B_i⟩ = 2` for the rotation
//! generators and `1` for the translations. The Christoffel table of the
//! left-invariant Levi-Civita connection is computed once from the Koszul
//! formula and cached; the connection matrices `Γ̃`/`Γ̃*` and the sandwich
//! operators `⊗`/`⊗ᵀ` are assembled from it by basis evaluation.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::OnceLock;
use thiserror::Error;

/// Tolerance for the se(3) sparsity/antisymmetry pattern check in [`vec_se`].
pub const PATTERN_TOL: f64 = 1e-12;

/// Tolerance for the rigid-motion invariants (`RᵀR = I`, `det R = 1`).
pub const POSE_TOL: f64 = 1e-9;

/// Below this rotation angle the exponential map switches to series.
const SMALL_ANGLE: f64 = 1e-8;

/// Squared norms `⟨B_i,B_i⟩` of the basis under `tr(AᵀB)`.
const METRIC_DIAG: [f64; 6] = [2.0, 2.0, 2.0, 1.0, 1.0, 1.0];

#[derive(Debug, Clone, Error)]
pub enum GroupError {
    #[error("matrix does not match the se(3) pattern (max deviation {max_dev:.3e})")]
    PatternMismatch { max_dev: f64 },
    #[error("not a rigid motion: {reason}")]
    InvalidPose { reason: String },
}

/// An element of se(3) in 6-vector form: `γ₁..γ₃` angular (rad/frame),
/// `γ₄..γ₆` linear (m/frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub gamma: Vector6<f64>,
}

impl Twist {
    pub fn new(gamma: Vector6<f64>) -> Self {
        Twist { gamma }
    }

    pub fn from_parts(angular: Vector3<f64>, linear: Vector3<f64>) -> Self {
        Twist {
            gamma: Vector6::new(
                angular[0], angular[1], angular[2], linear[0], linear[1], linear[2],
            ),
        }
    }

    pub fn zero() -> Self {
        Twist {
            gamma: Vector6::zeros(),
        }
    }

    pub fn angular(&self) -> Vector3<f64> {
        self.gamma.fixed_rows::<3>(0).into_owned()
    }

    pub fn linear(&self) -> Vector3<f64> {
        self.gamma.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.gamma.norm()
    }

    /// The 4×4 matrix form.
    pub fn matrix(&self) -> Matrix4<f64> {
        mat_se(&self.gamma)
    }
}

impl From<Vector6<f64>> for Twist {
    fn from(gamma: Vector6<f64>) -> Self {
        Twist { gamma }
    }
}

impl Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist::new(self.gamma + rhs.gamma)
    }
}

impl Sub for Twist {
    type Output = Twist;
    fn sub(self, rhs: Twist) -> Twist {
        Twist::new(self.gamma - rhs.gamma)
    }
}

impl Mul<f64> for Twist {
    type Output = Twist;
    fn mul(self, s: f64) -> Twist {
        Twist::new(self.gamma * s)
    }
}

impl Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist::new(-self.gamma)
    }
}

/// A rigid motion as a 4×4 homogeneous matrix.
///
/// Invariants: `RᵀR = I` and `det R = 1` within [`POSE_TOL`] (Frobenius),
/// bottom row exactly `(0,0,0,1)`. Matrix products preserve the exact bottom
/// row, so composition never needs renormalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    m: Matrix4<f64>,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 {
            m: Matrix4::identity(),
        }
    }

    /// Builds a pose from a full 4×4 matrix, validating the invariants.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self, GroupError> {
        if m.row(3) != Matrix4::<f64>::identity().row(3) {
            return Err(GroupError::InvalidPose {
                reason: "bottom row is not (0,0,0,1)".to_string(),
            });
        }
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        Self::check_rotation(&r)?;
        Ok(PoseSE3 { m })
    }

    /// Builds a pose from a rotation block and translation column.
    pub fn from_parts(r: &Matrix3<f64>, v: &Vector3<f64>) -> Result<Self, GroupError> {
        Self::check_rotation(r)?;
        Ok(Self::from_parts_unchecked(r, v))
    }

    fn from_parts_unchecked(r: &Matrix3<f64>, v: &Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(v);
        PoseSE3 { m }
    }

    fn check_rotation(r: &Matrix3<f64>) -> Result<(), GroupError> {
        let ortho = (r.transpose() * r - Matrix3::identity()).norm();
        if ortho > POSE_TOL {
            return Err(GroupError::InvalidPose {
                reason: format!("RᵀR deviates from I by {ortho:.3e}"),
            });
        }
        let det = r.determinant();
        if (det - 1.0).abs() > POSE_TOL {
            return Err(GroupError::InvalidPose {
                reason: format!("det R = {det}"),
            });
        }
        Ok(())
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.m.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.m.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// `(Rᵀ, −Rᵀv)`; satisfies `E·E⁻¹ = I` to roundoff.
    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation().transpose();
        let v = -(rt * self.translation());
        Self::from_parts_unchecked(&rt, &v)
    }

    /// Frobenius distance of the orthogonality defect, `‖RᵀR − I‖`.
    pub fn orthogonality_defect(&self) -> f64 {
        let r = self.rotation();
        (r.transpose() * r - Matrix3::identity()).norm()
    }
}

impl Mul for &PoseSE3 {
    type Output = PoseSE3;
    fn mul(self, rhs: &PoseSE3) -> PoseSE3 {
        PoseSE3 { m: self.m * rhs.m }
    }
}

impl Mul for PoseSE3 {
    type Output = PoseSE3;
    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        PoseSE3 { m: self.m * rhs.m }
    }
}

/// 6-vector → se(3) matrix.
pub fn mat_se(z: &Vector6<f64>) -> Matrix4<f64> {
    let mut w = Matrix4::zeros();
    w[(0, 1)] = -z[2];
    w[(0, 2)] = z[1];
    w[(1, 0)] = z[2];
    w[(1, 2)] = -z[0];
    w[(2, 0)] = -z[1];
    w[(2, 1)] = z[0];
    w[(0, 3)] = z[3];
    w[(1, 3)] = z[4];
    w[(2, 3)] = z[5];
    w
}

/// Reads the 6-vector out of an se(3)-patterned matrix without validation.
/// Callers must guarantee the pattern (e.g. output of [`pr_se3`]).
fn vec_of_se(w: &Matrix4<f64>) -> Vector6<f64> {
    Vector6::new(
        w[(2, 1)],
        w[(0, 2)],
        w[(1, 0)],
        w[(0, 3)],
        w[(1, 3)],
        w[(2, 3)],
    )
}

/// se(3) matrix → 6-vector. Rejects matrices that violate the sparsity /
/// antisymmetry pattern by more than [`PATTERN_TOL`].
pub fn vec_se(w: &Matrix4<f64>) -> Result<Vector6<f64>, GroupError> {
    let mut max_dev: f64 = 0.0;
    for i in 0..3 {
        max_dev = max_dev.max(w[(i, i)].abs());
    }
    max_dev = max_dev
        .max((w[(0, 1)] + w[(1, 0)]).abs())
        .max((w[(0, 2)] + w[(2, 0)]).abs())
        .max((w[(1, 2)] + w[(2, 1)]).abs());
    for j in 0..4 {
        max_dev = max_dev.max(w[(3, j)].abs());
    }
    if max_dev > PATTERN_TOL {
        return Err(GroupError::PatternMismatch { max_dev });
    }
    Ok(vec_of_se(w))
}

/// Orthogonal projection of a 4×4 matrix onto se(3) under `tr(AᵀB)`:
/// antisymmetrize the rotation block, keep the translation column, zero the
/// rest. Idempotent and self-adjoint.
pub fn pr_se3(a: &Matrix4<f64>) -> Matrix4<f64> {
    let mut out = Matrix4::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                out[(i, j)] = (a[(i, j)] - a[(j, i)]) / 2.0;
            }
        }
        out[(i, 3)] = a[(i, 3)];
    }
    out
}

/// `vec_se ∘ pr_se3`, total on all of GL(4).
pub fn vec_ext(a: &Matrix4<f64>) -> Vector6<f64> {
    vec_of_se(&pr_se3(a))
}

/// Frobenius inner product `⟨A,B⟩ = tr(AᵀB)`.
pub fn mat_inner(a: &Matrix4<f64>, b: &Matrix4<f64>) -> f64 {
    a.dot(b)
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
}

/// Closed-form SE(3) exponential: Rodrigues rotation plus the V-matrix
/// applied to the linear part. Below a rotation angle of 1e-8 the
/// trigonometric coefficients use their series to second order.
pub fn exp_se3(x: &Twist) -> PoseSE3 {
    let omega = x.angular();
    let v = x.linear();
    let theta = omega.norm();
    let k = skew(&omega);
    let k2 = k * k;

    // a = sinθ/θ, b = (1−cosθ)/θ², c = (θ−sinθ)/θ³. b uses the
    // cancellation-free half-angle form; c switches to its series while
    // θ−sinθ still loses digits.
    let t2 = theta * theta;
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        let half_sin = (theta / 2.0).sin();
        (theta.sin() / theta, 2.0 * half_sin * half_sin / t2)
    };
    let c = if theta < 1e-4 {
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (theta - theta.sin()) / (t2 * theta)
    };

    let r = Matrix3::identity() + k * a + k2 * b;
    let vmat = Matrix3::identity() + k * b + k2 * c;
    PoseSE3::from_parts_unchecked(&r, &(vmat * v))
}

/// The i-th basis matrix `B_i = mat_se(e_i)`, `i ∈ 0..6`.
pub fn basis(i: usize) -> &'static Matrix4<f64> {
    static BASIS: OnceLock<[Matrix4<f64>; 6]> = OnceLock::new();
    &BASIS.get_or_init(|| {
        std::array::from_fn(|k| {
            let mut e = Vector6::zeros();
            e[k] = 1.0;
            mat_se(&e)
        })
    })[i]
}

/// Structure constants `c^k_{ij}` with `[B_i,B_j] = Σ_k c^k_{ij} B_k`,
/// computed from the matrix commutators. Indexed `[k][i][j]`.
pub fn structure_constants() -> &'static [[[f64; 6]; 6]; 6] {
    static TABLE: OnceLock<[[[f64; 6]; 6]; 6]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut c = [[[0.0; 6]; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                let bi = basis(i);
                let bj = basis(j);
                let comm = bi * bj - bj * bi;
                let coeffs = vec_of_se(&comm);
                for (k, row) in c.iter_mut().enumerate() {
                    row[i][j] = coeffs[k];
                }
            }
        }
        c
    })
}

/// Christoffel symbols of the left-invariant Levi-Civita connection,
/// `Γ̂ⁱ_{jk} = ⟨∇_{B_j} B_k, B_i⟩ / ⟨B_i, B_i⟩` (direction `j`, field `k`).
#[derive(Debug, Clone)]
pub struct ChristoffelTable {
    gamma_hat: [[[f64; 6]; 6]; 6],
}

impl ChristoffelTable {
    /// `Γ̂ⁱ_{jk}`, indexed `(i, j, k)` zero-based.
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.gamma_hat[i][j][k]
    }

    /// The left-trivialized covariant derivative `∇_Ω Δ` of a constant
    /// (left-invariant) field `Δ` in direction `Ω`.
    pub fn connection(&self, omega: &Vector6<f64>, delta: &Vector6<f64>) -> Vector6<f64> {
        let mut out = Vector6::zeros();
        for i in 0..6 {
            let mut acc = 0.0;
            for j in 0..6 {
                for k in 0..6 {
                    acc += self.gamma_hat[i][j][k] * omega[j] * delta[k];
                }
            }
            out[i] = acc;
        }
        out
    }
}

/// Builds (once) the Christoffel table by the Koszul formula
/// `2⟨∇_{B_j}B_k, B_i⟩ = ⟨[B_j,B_k],B_i⟩ − ⟨[B_k,B_i],B_j⟩ + ⟨[B_i,B_j],B_k⟩`
/// evaluated through the structure constants.
pub fn christoffel() -> &'static ChristoffelTable {
    static TABLE: OnceLock<ChristoffelTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let c = structure_constants();
        let g = METRIC_DIAG;
        let mut gamma_hat = [[[0.0; 6]; 6]; 6];
        for (i, gi) in gamma_hat.iter_mut().enumerate() {
            for (j, gij) in gi.iter_mut().enumerate() {
                for (k, entry) in gij.iter_mut().enumerate() {
                    let term = c[i][j][k] * g[i] - c[j][k][i] * g[j] + c[k][i][j] * g[k];
                    *entry = term / (2.0 * g[i]);
                }
            }
        }
        ChristoffelTable { gamma_hat }
    })
}

/// `(Γ̃_z)_{ij} = Σ_k Γ̂ⁱ_{jk} z_k`. For constant Δ with `z = vec(Δ)` this is
/// the matrix of the map `vec(Ω) ↦ vec(∇_Ω Δ)`.
pub fn gamma_tilde(z: &Vector6<f64>) -> Matrix6<f64> {
    let t = christoffel();
    let mut m = Matrix6::zeros();
    for i in 0..6 {
        for j in 0..6 {
            let mut acc = 0.0;
            for k in 0..6 {
                acc += t.gamma_hat[i][j][k] * z[k];
            }
            m[(i, j)] = acc;
        }
    }
    m
}

/// `(Γ̃*_z)_{ik} = Σ_j Γ̂ⁱ_{jk} z_j`: the matrix of the operator
/// `vec(Δ) ↦ vec(∇_Ω Δ)` for fixed direction `Ω = mat(z)`. Its transpose is
/// the adjoint of that operator under `tr(AᵀB)`.
pub fn gamma_tilde_star(z: &Vector6<f64>) -> Matrix6<f64> {
    let t = christoffel();
    let mut m = Matrix6::zeros();
    for i in 0..6 {
        for k in 0..6 {
            let mut acc = 0.0;
            for j in 0..6 {
                acc += t.gamma_hat[i][j][k] * z[j];
            }
            m[(i, k)] = acc;
        }
    }
    m
}

/// The 6×6 matrix with `(A ⊗ B)·vec(Ω) = vec_ext(A Ω B)` for all Ω ∈ se(3),
/// built column-by-column on the basis.
pub fn kron_se(a: &Matrix4<f64>, b: &Matrix4<f64>) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    for i in 0..6 {
        let col = vec_ext(&(a * basis(i) * b));
        m.set_column(i, &col);
    }
    m
}

/// The 6×6 matrix with `(A ⊗ᵀ B)·vec(Ω) = vec_ext(A Ωᵀ B)` for all Ω ∈ se(3).
pub fn kron_se_t(a: &Matrix4<f64>, b: &Matrix4<f64>) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    for i in 0..6 {
        let col = vec_ext(&(a * basis(i).transpose() * b));
        m.set_column(i, &col);
    }
    m
}
