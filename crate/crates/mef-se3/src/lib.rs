//! Second-order minimum energy filtering on SE(3) with multiple nonlinear
//! flow observations.
//!
//! The filter estimates the incremental camera motion `E ∈ SE(3)` between
//! consecutive frames from a batch of (scene point, observed flow endpoint)
//! pairs, assuming piecewise-constant motion. The state is propagated by a
//! pair of coupled ODEs: a left-trivialized gradient flow for the optimal
//! pose estimate and a Riccati-type matrix ODE for the second-order
//! information matrix `P`. Integration uses a 2-stage Crouch–Grossman step
//! for the pose (products of exponentials, so iterates stay on the group)
//! and a Heun step for `P`.
//!
//! Module map:
//! - [`liegroup`]: se(3) vectorization, projection, exponential, Christoffel
//!   table and the connection/Kronecker operators.
//! - [`camera`]: pinhole observation model and its directional derivative.
//! - [`filter`]: observation energy, gradient/Hessian assembly and the two
//!   ODE right-hand sides.
//! - [`integrate`]: Crouch–Grossman and Runge–Kutta steps, per-frame driver.
//! - [`synth`]: synthetic scene/trajectory generator and pose error metrics.
//! - [`io`]: text formats for observations, poses, reports and run configs.

pub mod camera;
pub mod filter;
pub mod integrate;
pub mod io;
pub mod liegroup;
pub mod synth;

pub use camera::{Observation, ScenePoint};
pub use filter::{FilterConfig, FilterError, FilterState, ObservationBatch};
pub use liegroup::{PoseSE3, Twist};
