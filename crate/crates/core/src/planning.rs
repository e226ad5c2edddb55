//! Reference trajectories for the ascending phase of the standing motion.
//!
//! Planning happens in the task coordinates `z = [θ₂; x_CoM; y_CoM]`: each
//! component is interpolated rest-to-rest by the cubic blend
//! `Θ(t, tf) = −2t³/tf³ + 3t²/tf²`, and the result is mapped into joint
//! space by inverting the CoM kinematics (Newton on (θ₁, θ₃) with the
//! previous grid point as starting guess, so the branch follows the motion).

use crate::allocation::{self, AllocationError, AllocationSpec};
use crate::grid::Grid;
use crate::robot::{self, Input, ParamVector, State};
use nalgebra::{Matrix2, SMatrix, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanningError {
    #[error("time {t} outside the blend domain [0, {tf}]")]
    Domain { t: f64, tf: f64 },
    #[error("CoM kinematics singular at θ=({0:.4}, {1:.4}, {2:.4}) rad")]
    SingularConfiguration(f64, f64, f64),
    #[error(
        "Newton iteration did not converge (residual {residual:.3e} after {iters} iterations)"
    )]
    NoConvergence { residual: f64, iters: usize },
    #[error("planning failed at grid time {t} s: {source}")]
    AtTime {
        t: f64,
        #[source]
        source: Box<PlanningError>,
    },
    #[error("allocation failed at grid time {t} s: {source}")]
    AllocationAtTime {
        t: f64,
        #[source]
        source: AllocationError,
    },
}

/// Task-space coordinates `z = [θ₂; x_CoM; y_CoM]` (rad, m, m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZVector {
    pub theta2: f64,
    pub x_com: f64,
    pub y_com: f64,
}

impl ZVector {
    pub fn new(theta2: f64, x_com: f64, y_com: f64) -> Self {
        Self {
            theta2,
            x_com,
            y_com,
        }
    }

    fn as_vec(&self) -> Vector3<f64> {
        Vector3::new(self.theta2, self.x_com, self.y_com)
    }

    fn from_vec(v: Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

/// Cubic blend value and its first two time derivatives at `t ∈ [0, tf]`.
///
/// The only cubic with `Θ(0)=0`, `Θ(tf)=1`, `Θ̇(0)=Θ̇(tf)=0`.
pub fn blend(t: f64, tf: f64) -> Result<(f64, f64, f64), PlanningError> {
    if tf <= 0.0 || !t.is_finite() || t < 0.0 || t > tf {
        return Err(PlanningError::Domain { t, tf });
    }
    let r = t / tf;
    Ok((
        (-2.0 * r + 3.0) * r * r,
        (-6.0 * r + 6.0) * r / tf,
        (-12.0 * r + 6.0) / (tf * tf),
    ))
}

/// Task-space reference `(ẑ, ż̂, z̈̂)` at time `t` between the boundary values.
pub fn reference_z(
    t: f64,
    z_start: &ZVector,
    z_end: &ZVector,
    tf: f64,
) -> Result<(ZVector, ZVector, ZVector), PlanningError> {
    let (b, bd, bdd) = blend(t, tf)?;
    let z0 = z_start.as_vec();
    let d = z_end.as_vec() - z0;
    Ok((
        ZVector::from_vec(z0 + d * b),
        ZVector::from_vec(d * bd),
        ZVector::from_vec(d * bdd),
    ))
}

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITERS: usize = 50;
const JACOBIAN_DET_MIN: f64 = 1e-10;

/// 2×2 position Jacobian w.r.t. (θ₁, θ₃) at fixed θ₂.
fn position_jacobian_13(theta: &Vector3<f64>, p: &ParamVector) -> Matrix2<f64> {
    let x = State::new(theta[0], theta[1], theta[2], 0.0, 0.0, 0.0);
    let zx = robot::output_jacobian_x(&x, p);
    Matrix2::new(zx[(0, 0)], zx[(0, 2)], zx[(1, 0)], zx[(1, 2)])
}

/// Inverts the task-space reference into joint space.
///
/// `θ₂ := z₁` directly; `(θ₁, θ₃)` solve the CoM position equations by
/// Newton from `guess`; rates and accelerations follow from the analytic
/// output Jacobians (the velocity rows are linear in θ̇, and their θ-gradient
/// gives the transport term for θ̈).
pub fn z_to_theta(
    z: &ZVector,
    zdot: &ZVector,
    zddot: &ZVector,
    p: &ParamVector,
    guess: &Vector3<f64>,
) -> Result<(Vector3<f64>, Vector3<f64>, Vector3<f64>), PlanningError> {
    let mut theta = Vector3::new(guess[0], z.theta2, guess[2]);
    let target = Vector2::new(z.x_com, z.y_com);
    let mut residual = f64::INFINITY;
    for _ in 0..NEWTON_MAX_ITERS {
        let x = State::new(theta[0], theta[1], theta[2], 0.0, 0.0, 0.0);
        let y = robot::output_map(&x, p);
        let r = Vector2::new(y[0], y[1]) - target;
        residual = r.abs().max();
        if residual < NEWTON_TOL {
            break;
        }
        let jac = position_jacobian_13(&theta, p);
        if jac.determinant().abs() < JACOBIAN_DET_MIN {
            return Err(PlanningError::SingularConfiguration(
                theta[0], theta[1], theta[2],
            ));
        }
        let step = jac
            .lu()
            .solve(&r)
            .ok_or(PlanningError::SingularConfiguration(
                theta[0], theta[1], theta[2],
            ))?;
        theta[0] -= step[0];
        theta[2] -= step[1];
    }
    if residual >= NEWTON_TOL.max(1e-10) {
        return Err(PlanningError::NoConvergence {
            residual,
            iters: NEWTON_MAX_ITERS,
        });
    }

    let jac = position_jacobian_13(&theta, p);
    if jac.determinant().abs() < JACOBIAN_DET_MIN {
        return Err(PlanningError::SingularConfiguration(
            theta[0], theta[1], theta[2],
        ));
    }
    let lu = jac.lu();
    let x_pos = State::new(theta[0], theta[1], theta[2], 0.0, 0.0, 0.0);
    let zx_pos = robot::output_jacobian_x(&x_pos, p);
    let col2 = Vector2::new(zx_pos[(0, 1)], zx_pos[(1, 1)]);

    // velocity: ζ11 · θ̇ = (ż₂, ż₃) with θ̇₂ = ż₁ known
    let rhs_v = Vector2::new(zdot.x_com, zdot.y_com) - col2 * zdot.theta2;
    let v13 = lu
        .solve(&rhs_v)
        .ok_or(PlanningError::SingularConfiguration(
            theta[0], theta[1], theta[2],
        ))?;
    let thetadot = Vector3::new(v13[0], zdot.theta2, v13[1]);

    // acceleration: d²(CoM)/dt² = ζ21(θ, θ̇)·θ̇ + ζ11·θ̈
    let x_full = State::new(
        theta[0],
        theta[1],
        theta[2],
        thetadot[0],
        thetadot[1],
        thetadot[2],
    );
    let zx = robot::output_jacobian_x(&x_full, p);
    let z21: SMatrix<f64, 2, 3> = zx.fixed_view::<2, 3>(2, 0).into_owned();
    let transport = z21 * thetadot;
    let rhs_a = Vector2::new(zddot.x_com, zddot.y_com) - col2 * zddot.theta2 - transport;
    let a13 = lu
        .solve(&rhs_a)
        .ok_or(PlanningError::SingularConfiguration(
            theta[0], theta[1], theta[2],
        ))?;
    let thetaddot = Vector3::new(a13[0], zddot.theta2, a13[1]);

    Ok((theta, thetadot, thetaddot))
}

/// Planned reference: joint states, accelerations, task coordinates and the
/// allocated inputs on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub grid: Grid,
    pub x: Vec<State>,
    pub thetaddot: Vec<Vector3<f64>>,
    pub z: Vec<ZVector>,
    pub zdot: Vec<ZVector>,
    pub zddot: Vec<ZVector>,
    pub u: Vec<Input>,
}

/// Builds the reference over the grid by blending in task space, inverting
/// the kinematics (continuation from the previous grid point) and allocating
/// the inputs.
pub fn build_reference(
    grid: &Grid,
    p: &ParamVector,
    z_start: &ZVector,
    z_end: &ZVector,
    x0_guess: &Vector3<f64>,
    spec: &AllocationSpec,
) -> Result<ReferenceTrajectory, PlanningError> {
    let tf = grid.tf() - grid.t0;
    let mut out = ReferenceTrajectory {
        grid: grid.clone(),
        x: Vec::with_capacity(grid.len),
        thetaddot: Vec::with_capacity(grid.len),
        z: Vec::with_capacity(grid.len),
        zdot: Vec::with_capacity(grid.len),
        zddot: Vec::with_capacity(grid.len),
        u: Vec::with_capacity(grid.len),
    };
    let mut guess = *x0_guess;
    for t in grid.times() {
        let tau = t - grid.t0;
        let (z, zd, zdd) =
            reference_z(tau, z_start, z_end, tf).map_err(|e| PlanningError::AtTime {
                t,
                source: Box::new(e),
            })?;
        let (theta, thetadot, thetaddot) =
            z_to_theta(&z, &zd, &zdd, p, &guess).map_err(|e| PlanningError::AtTime {
                t,
                source: Box::new(e),
            })?;
        guess = theta;
        let u = allocation::allocate(&theta, &thetadot, &thetaddot, p, spec)
            .map_err(|e| PlanningError::AllocationAtTime { t, source: e })?;
        out.x.push(State::new(
            theta[0],
            theta[1],
            theta[2],
            thetadot[0],
            thetadot[1],
            thetadot[2],
        ));
        out.thetaddot.push(thetaddot);
        out.z.push(z);
        out.zdot.push(zd);
        out.zddot.push(zdd);
        out.u.push(u);
    }
    Ok(out)
}
