//! Control allocation: distributing a desired joint-space force over the four
//! actuation channels.
//!
//! The torque balance `A_τ(θ, p) ξ = M(θ, p) θ̈ + F(θ, θ̇, p)` leaves one
//! degree of freedom (4 inputs, 3 equations). The allocator minimizes
//! `½‖W_u ξ‖²` over that one-dimensional affine set subject to box bounds,
//! by parameterizing the set with a scalar, clipping to the feasible segment
//! and verifying the KKT conditions of the clipped minimizer.

use crate::robot::{self, Input, ParamVector};
use nalgebra::{Matrix3, Matrix4, SMatrix, Vector3, Vector4};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AllocationError {
    #[error("allocation infeasible: no input in the box satisfies the torque balance")]
    Infeasible,
    #[error("force matrix is rank-deficient at this configuration")]
    SingularSystem,
    #[error("invalid allocation spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] robot::ModelError),
}

/// Weights and box bounds of the allocation program. `None` bounds are
/// absent constraints (±∞ in the program statement).
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationSpec {
    pub weights: Matrix4<f64>,
    pub lower: [Option<f64>; 4],
    pub upper: [Option<f64>; 4],
}

impl AllocationSpec {
    /// Diagonal weights, all inputs unconstrained.
    pub fn unconstrained(diag: [f64; 4]) -> Self {
        Self {
            weights: Matrix4::from_diagonal(&Vector4::from(diag)),
            lower: [None; 4],
            upper: [None; 4],
        }
    }

    pub fn validate(&self) -> Result<(), AllocationError> {
        if self.weights.determinant().abs() < 1e-12 {
            return Err(AllocationError::InvalidSpec(
                "weight matrix W_u is singular".into(),
            ));
        }
        for j in 0..4 {
            if let (Some(lo), Some(hi)) = (self.lower[j], self.upper[j]) {
                if lo > hi {
                    return Err(AllocationError::InvalidSpec(format!(
                        "input {j}: lower bound {lo} exceeds upper bound {hi}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Feasibility slack on the box bounds.
const BOX_TOL: f64 = 1e-12;

/// Null vector of a full-rank 3×4 matrix via signed 3×3 minors (the
/// generalized cross product of the three rows).
fn null_vector(a: &SMatrix<f64, 3, 4>) -> Option<Vector4<f64>> {
    let mut n = Vector4::zeros();
    for j in 0..4 {
        let mut minor = Matrix3::zeros();
        let mut c = 0;
        for col in 0..4 {
            if col == j {
                continue;
            }
            minor.set_column(c, &a.column(col).into_owned());
            c += 1;
        }
        n[j] = if j % 2 == 0 { 1.0 } else { -1.0 } * minor.determinant();
    }
    let norm = n.norm();
    if norm < 1e-10 {
        return None; // rows are linearly dependent
    }
    Some(n / norm)
}

/// Solves the weighted least-squares allocation at one configuration.
///
/// Returns the unique minimizer of `½‖W_u ξ‖²` subject to the torque balance
/// and the box. The balance residual of the result is at the level of the
/// 3×3 solve; at most one box bound can be active.
pub fn allocate(
    theta: &Vector3<f64>,
    thetadot: &Vector3<f64>,
    thetaddot: &Vector3<f64>,
    p: &ParamVector,
    spec: &AllocationSpec,
) -> Result<Input, AllocationError> {
    spec.validate()?;
    let a = robot::generalized_force_matrix(theta, p);
    let b = robot::mass_matrix(theta, p) * thetaddot + robot::coriolis_gravity(theta, thetadot, p);

    // least-norm particular solution ξ0 = Aᵀ(AAᵀ)⁻¹ b
    let aat = a * a.transpose();
    let xi0 = a.transpose() * aat.lu().solve(&b).ok_or(AllocationError::SingularSystem)?;
    let n = null_vector(&a).ok_or(AllocationError::SingularSystem)?;

    // feasible segment in the scalar parameter s of ξ(s) = ξ0 + s·n
    let mut s_lo = f64::NEG_INFINITY;
    let mut s_hi = f64::INFINITY;
    for j in 0..4 {
        if n[j].abs() < 1e-12 {
            if let Some(lo) = spec.lower[j] {
                if xi0[j] < lo - BOX_TOL {
                    return Err(AllocationError::Infeasible);
                }
            }
            if let Some(hi) = spec.upper[j] {
                if xi0[j] > hi + BOX_TOL {
                    return Err(AllocationError::Infeasible);
                }
            }
            continue;
        }
        let at = |bound: f64| (bound - xi0[j]) / n[j];
        let (mut a_j, mut b_j) = (f64::NEG_INFINITY, f64::INFINITY);
        if let Some(lo) = spec.lower[j] {
            if n[j] > 0.0 {
                a_j = at(lo);
            } else {
                b_j = at(lo);
            }
        }
        if let Some(hi) = spec.upper[j] {
            if n[j] > 0.0 {
                b_j = b_j.min(at(hi));
            } else {
                a_j = a_j.max(at(hi));
            }
        }
        s_lo = s_lo.max(a_j);
        s_hi = s_hi.min(b_j);
    }
    if s_lo > s_hi {
        return Err(AllocationError::Infeasible);
    }

    // unconstrained minimizer along the null direction, then clip; the
    // objective is strictly convex in s because W_u is nonsingular
    let wn = spec.weights * n;
    let wxi = spec.weights * xi0;
    let s_star = -(wxi.dot(&wn)) / wn.dot(&wn);
    let s = s_star.clamp(s_lo.min(s_hi), s_hi.max(s_lo));
    let xi = xi0 + n * s;

    debug_assert!(kkt_residual(&a, &b, &xi, &n, spec, s, s_star) < 1e-8);
    Ok(xi)
}

/// KKT residual of the clipped solution: balance residual plus gradient
/// stationarity along the free direction (zero when clipped at a bound with
/// the gradient pointing outward).
fn kkt_residual(
    a: &SMatrix<f64, 3, 4>,
    b: &Vector3<f64>,
    xi: &Input,
    n: &Vector4<f64>,
    spec: &AllocationSpec,
    s: f64,
    s_star: f64,
) -> f64 {
    let balance = (a * xi - b).abs().max();
    let wtw = spec.weights.transpose() * spec.weights;
    let grad_along_n = (wtw * xi).dot(n);
    let scale = (wtw * xi).abs().max().max(1.0);
    let stationarity = if (s - s_star).abs() < 1e-14 {
        grad_along_n.abs() / scale
    } else {
        // clipped: gradient must push toward the violated side
        if (s < s_star && grad_along_n <= 0.0) || (s > s_star && grad_along_n >= 0.0) {
            0.0
        } else {
            grad_along_n.abs() / scale
        }
    };
    balance.max(stationarity)
}
