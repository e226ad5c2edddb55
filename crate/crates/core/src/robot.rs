//! Dynamics and kinematics of the three-link planar robot.
//!
//! The robot models shanks (link 1), thighs (link 2) and torso (link 3) with
//! revolute joints at the ankles, knees and hips. `theta[0]` is the absolute
//! angle of link 1 from the horizontal; `theta[1]` and `theta[2]` are relative
//! joint angles. The equations of motion are
//!
//! ```text
//!     M(θ, p) θ̈ + F(θ, θ̇, p) = A_τ(θ, p) u,
//! ```
//!
//! with symmetric mass matrix `M`, Coriolis/gravity vector `F`, generalized
//! force matrix `A_τ` and input `u = [τ_h; τ_s; F_x; F_y]` (hip torque,
//! shoulder torque, horizontal and vertical shoulder forces). All angles are
//! in radians, all formulas are closed-form in the 12 physical parameters.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3, Vector4, Vector6};
use thiserror::Error;

/// Gravitational acceleration [m/s²].
pub const GRAVITY: f64 = 9.81;

/// State `x = [θ; θ̇]` (rad, rad/s).
pub type State = Vector6<f64>;
/// Input `u = [τ_h; τ_s; F_x; F_y]` (N·m, N·m, N, N).
pub type Input = Vector4<f64>;
/// Output `y = [x_CoM; y_CoM; ẋ_CoM; ẏ_CoM]` (m, m/s).
pub type Output = Vector4<f64>;
/// Parameter coordinates in the fixed order `[m1..m3; I1..I3; l1..l3; lc1..lc3]`.
pub type ParamCoords = SVector<f64, 12>;

/// Number of physical parameters.
pub const N_PARAMS: usize = 12;

#[derive(Debug, Error)]
pub enum ModelError {
    /// The mass matrix is numerically singular; the parameter vector is
    /// corrupted or far outside the physical range.
    #[error("mass matrix solve failed (reciprocal condition {rcond:.3e} below {threshold:.0e})")]
    LinearSolveFailure { rcond: f64, threshold: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Reciprocal-condition threshold below which a mass-matrix solve is rejected.
const RCOND_THRESHOLD: f64 = 1e-12;

/// Physical parameters of the three links.
///
/// Masses [kg], moments of inertia about the link CoM [kg·m²], link lengths
/// [m] and joint-to-CoM distances [m].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamVector {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub i1: f64,
    pub i2: f64,
    pub i3: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub lc1: f64,
    pub lc2: f64,
    pub lc3: f64,
}

impl ParamVector {
    pub fn from_coords(v: &ParamCoords) -> Self {
        Self {
            m1: v[0],
            m2: v[1],
            m3: v[2],
            i1: v[3],
            i2: v[4],
            i3: v[5],
            l1: v[6],
            l2: v[7],
            l3: v[8],
            lc1: v[9],
            lc2: v[10],
            lc3: v[11],
        }
    }

    pub fn to_coords(&self) -> ParamCoords {
        ParamCoords::from_column_slice(&[
            self.m1, self.m2, self.m3, self.i1, self.i2, self.i3, self.l1, self.l2, self.l3,
            self.lc1, self.lc2, self.lc3,
        ])
    }

    /// Checks positivity and that each CoM lies on its link (`lci ≤ li`).
    pub fn validate(&self) -> Result<(), String> {
        let v = self.to_coords();
        const NAMES: [&str; 12] = [
            "m1", "m2", "m3", "I1", "I2", "I3", "l1", "l2", "l3", "lc1", "lc2", "lc3",
        ];
        for (i, name) in NAMES.iter().enumerate() {
            if !(v[i].is_finite() && v[i] > 0.0) {
                return Err(format!("parameter {name} must be positive, got {}", v[i]));
            }
        }
        for (lc, l, name) in [
            (self.lc1, self.l1, "lc1 > l1"),
            (self.lc2, self.l2, "lc2 > l2"),
            (self.lc3, self.l3, "lc3 > l3"),
        ] {
            if lc > l {
                return Err(format!("CoM offset beyond link end: {name} ({lc} > {l})"));
            }
        }
        Ok(())
    }
}

/// Lumped mass-length coefficients shared by the dynamics and the CoM map.
///
/// `k0 = 1/(m1+m2+m3)`, `k1 = lc1·m1 + l1·m2 + l1·m3`, `k2 = lc2·m2 + l2·m3`,
/// `k3 = lc3·m3`.
pub(crate) fn k_coeffs(p: &ParamVector) -> (f64, f64, f64, f64) {
    let k0 = 1.0 / (p.m1 + p.m2 + p.m3);
    let k1 = p.lc1 * p.m1 + p.l1 * p.m2 + p.l1 * p.m3;
    let k2 = p.lc2 * p.m2 + p.l2 * p.m3;
    let k3 = p.lc3 * p.m3;
    (k0, k1, k2, k3)
}

/// Cached sines/cosines of the cumulative angles θ₁, θ₁+θ₂, θ₁+θ₂+θ₃.
struct Trig {
    c1: f64,
    s1: f64,
    c12: f64,
    s12: f64,
    c123: f64,
    s123: f64,
}

impl Trig {
    fn new(theta: &Vector3<f64>) -> Self {
        let (s1, c1) = theta[0].sin_cos();
        let (s12, c12) = (theta[0] + theta[1]).sin_cos();
        let (s123, c123) = (theta[0] + theta[1] + theta[2]).sin_cos();
        Trig {
            c1,
            s1,
            c12,
            s12,
            c123,
            s123,
        }
    }
}

/// Symmetric positive-definite mass matrix `M(θ, p)`.
pub fn mass_matrix(theta: &Vector3<f64>, p: &ParamVector) -> Matrix3<f64> {
    let ParamVector {
        m1,
        m2,
        m3,
        i1,
        i2,
        i3,
        l1,
        l2,
        lc1,
        lc2,
        lc3,
        ..
    } = *p;
    let c2 = theta[1].cos();
    let c3 = theta[2].cos();
    let c23 = (theta[1] + theta[2]).cos();

    let m11 = i1
        + i2
        + i3
        + lc1 * lc1 * m1
        + m2 * (l1 * l1 + 2.0 * l1 * lc2 * c2 + lc2 * lc2)
        + m3 * (l1 * l1
            + 2.0 * l1 * l2 * c2
            + 2.0 * l1 * lc3 * c23
            + l2 * l2
            + 2.0 * l2 * lc3 * c3
            + lc3 * lc3);
    let m12 = i2
        + i3
        + lc2 * m2 * (l1 * c2 + lc2)
        + m3 * (l1 * l2 * c2 + l1 * lc3 * c23 + l2 * l2 + 2.0 * l2 * lc3 * c3 + lc3 * lc3);
    let m13 = i3 + lc3 * m3 * (l1 * c23 + l2 * c3 + lc3);
    let m22 = i2 + i3 + lc2 * lc2 * m2 + m3 * (l2 * l2 + 2.0 * l2 * lc3 * c3 + lc3 * lc3);
    let m23 = i3 + lc3 * m3 * (l2 * c3 + lc3);
    let m33 = i3 + lc3 * lc3 * m3;

    Matrix3::new(m11, m12, m13, m12, m22, m23, m13, m23, m33)
}

/// Coriolis, centrifugal and gravity contributions `F(θ, θ̇, p)`.
///
/// The velocity part is quadratic in the cumulative rates
/// `[θ̇₁; θ̇₁+θ̇₂; θ̇₁+θ̇₂+θ̇₃]`; the gravity part equals `(g/k0)·∇_θ y_CoM`.
pub fn coriolis_gravity(
    theta: &Vector3<f64>,
    thetadot: &Vector3<f64>,
    p: &ParamVector,
) -> Vector3<f64> {
    let (_, k1, k2, k3) = k_coeffs(p);
    let (l1, l2) = (p.l1, p.l2);
    let s2 = theta[1].sin();
    let s3 = theta[2].sin();
    let s23 = (theta[1] + theta[2]).sin();
    let t = Trig::new(theta);

    let omega = Matrix3::new(
        l1 * (k2 * s2 + k3 * s23),
        -k2 * l1 * s2 + k3 * l2 * s3,
        -k3 * (l1 * s23 + l2 * s3),
        l1 * (k2 * s2 + k3 * s23),
        k3 * l2 * s3,
        -k3 * l2 * s3,
        l1 * k3 * s23,
        k3 * l2 * s3,
        0.0,
    );
    let w1 = thetadot[0];
    let w2 = thetadot[0] + thetadot[1];
    let w3 = thetadot[0] + thetadot[1] + thetadot[2];
    let rates_sq = Vector3::new(w1 * w1, w2 * w2, w3 * w3);
    let gravity = GRAVITY
        * Vector3::new(
            k1 * t.c1 + k2 * t.c12 + k3 * t.c123,
            k2 * t.c12 + k3 * t.c123,
            k3 * t.c123,
        );
    omega * rates_sq + gravity
}

/// Generalized force matrix `A_τ(θ, p)` mapping `u` to joint torques.
///
/// Column 1 is the hip torque, column 2 the shoulder torque, columns 3 and 4
/// are the transposed shoulder-point Jacobian acting on `(F_x, F_y)`.
pub fn generalized_force_matrix(theta: &Vector3<f64>, p: &ParamVector) -> SMatrix<f64, 3, 4> {
    let (l1, l2, l3) = (p.l1, p.l2, p.l3);
    let t = Trig::new(theta);
    SMatrix::<f64, 3, 4>::new(
        0.0,
        -1.0,
        -l1 * t.s1 - l2 * t.s12 - l3 * t.s123,
        l1 * t.c1 + l2 * t.c12 + l3 * t.c123,
        0.0,
        -1.0,
        -l2 * t.s12 - l3 * t.s123,
        l2 * t.c12 + l3 * t.c123,
        1.0,
        -1.0,
        -l3 * t.s123,
        l3 * t.c123,
    )
}

/// Solves `M v = rhs`, rejecting numerically singular mass matrices.
fn solve_mass(m: &Matrix3<f64>, rhs: &Vector3<f64>) -> Result<Vector3<f64>, ModelError> {
    let lu = m.lu();
    let inv = lu.try_inverse().ok_or(ModelError::LinearSolveFailure {
        rcond: 0.0,
        threshold: RCOND_THRESHOLD,
    })?;
    let norm = m.abs().column_sum().max();
    let inv_norm = inv.abs().column_sum().max();
    let rcond = 1.0 / (norm * inv_norm);
    if !rcond.is_finite() || rcond < RCOND_THRESHOLD {
        return Err(ModelError::LinearSolveFailure {
            rcond,
            threshold: RCOND_THRESHOLD,
        });
    }
    Ok(inv * rhs)
}

/// State derivative `f(x, p, u) = [θ̇; M⁻¹(A_τ u − F)]`.
pub fn forward_dynamics(x: &State, p: &ParamVector, u: &Input) -> Result<State, ModelError> {
    let theta = x.fixed_rows::<3>(0).into_owned();
    let thetadot = x.fixed_rows::<3>(3).into_owned();
    let m = mass_matrix(&theta, p);
    let f = coriolis_gravity(&theta, &thetadot, p);
    let a = generalized_force_matrix(&theta, p);
    let thetaddot = solve_mass(&m, &(a * u - f))?;
    let mut out = State::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&thetadot);
    out.fixed_rows_mut::<3>(3).copy_from(&thetaddot);
    Ok(out)
}

/// Central-difference step for coordinate `v`: `ε^(1/3)·max(1, |v|)`.
pub(crate) fn fd_step(v: f64) -> f64 {
    const CBRT_EPS: f64 = 6.055454452393343e-6;
    CBRT_EPS * v.abs().max(1.0)
}

/// Jacobians `(∂f/∂x, ∂f/∂p, ∂f/∂u)` of the open-loop dynamics by central
/// finite differences.
#[allow(clippy::type_complexity)]
pub fn dynamics_jacobians(
    x: &State,
    p: &ParamVector,
    u: &Input,
) -> Result<(SMatrix<f64, 6, 6>, SMatrix<f64, 6, 12>, SMatrix<f64, 6, 4>), ModelError> {
    let mut jx = SMatrix::<f64, 6, 6>::zeros();
    for j in 0..6 {
        let h = fd_step(x[j]);
        let mut xp = *x;
        let mut xm = *x;
        xp[j] += h;
        xm[j] -= h;
        let df = (forward_dynamics(&xp, p, u)? - forward_dynamics(&xm, p, u)?) / (2.0 * h);
        jx.set_column(j, &df);
    }
    let pc = p.to_coords();
    let mut jp = SMatrix::<f64, 6, 12>::zeros();
    for j in 0..12 {
        let h = fd_step(pc[j]);
        let mut pp = pc;
        let mut pm = pc;
        pp[j] += h;
        pm[j] -= h;
        let df = (forward_dynamics(x, &ParamVector::from_coords(&pp), u)?
            - forward_dynamics(x, &ParamVector::from_coords(&pm), u)?)
            / (2.0 * h);
        jp.set_column(j, &df);
    }
    let mut ju = SMatrix::<f64, 6, 4>::zeros();
    for j in 0..4 {
        let h = fd_step(u[j]);
        let mut up = *u;
        let mut um = *u;
        up[j] += h;
        um[j] -= h;
        let df = (forward_dynamics(x, p, &up)? - forward_dynamics(x, p, &um)?) / (2.0 * h);
        ju.set_column(j, &df);
    }
    Ok((jx, jp, ju))
}

/// Analytic input Jacobian `∂f/∂u = [0; M⁻¹ A_τ]`; `f` is affine in `u`.
pub fn input_jacobian(x: &State, p: &ParamVector) -> Result<SMatrix<f64, 6, 4>, ModelError> {
    let theta = x.fixed_rows::<3>(0).into_owned();
    let m = mass_matrix(&theta, p);
    let a = generalized_force_matrix(&theta, p);
    let mut out = SMatrix::<f64, 6, 4>::zeros();
    for j in 0..4 {
        let col = solve_mass(&m, &a.column(j).into_owned())?;
        out.fixed_view_mut::<3, 1>(3, j).copy_from(&col);
    }
    Ok(out)
}

/// CoM position/velocity helpers `k4..k9` used by the output Jacobians.
struct ComCoeffs {
    x_com: f64,
    y_com: f64,
    k4: f64,
    k5: f64,
    k6: f64,
    k7: f64,
}

fn com_coeffs(t: &Trig, p: &ParamVector) -> ComCoeffs {
    let (k0, k1, k2, k3) = k_coeffs(p);
    ComCoeffs {
        x_com: k0 * (k1 * t.c1 + k2 * t.c12 + k3 * t.c123),
        y_com: k0 * (k1 * t.s1 + k2 * t.s12 + k3 * t.s123),
        k4: k0 * (k2 * t.s12 + k3 * t.s123),
        k5: k0 * k3 * t.s123,
        k6: k0 * (k2 * t.c12 + k3 * t.c123),
        k7: k0 * k3 * t.c123,
    }
}

/// CoM output map `ζ(x, p) = [x_CoM; y_CoM; ẋ_CoM; ẏ_CoM]`.
pub fn output_map(x: &State, p: &ParamVector) -> Output {
    let theta = x.fixed_rows::<3>(0).into_owned();
    let t = Trig::new(&theta);
    let c = com_coeffs(&t, p);
    let (td1, td2, td3) = (x[3], x[4], x[5]);
    Vector4::new(
        c.x_com,
        c.y_com,
        -td1 * c.y_com - td2 * c.k4 - td3 * c.k5,
        td1 * c.x_com + td2 * c.k6 + td3 * c.k7,
    )
}

/// Analytic `∂ζ/∂x`, block lower-triangular: `[[ζˣ₁₁, 0]; [ζˣ₂₁, ζˣ₁₁]]`.
pub fn output_jacobian_x(x: &State, p: &ParamVector) -> SMatrix<f64, 4, 6> {
    let theta = x.fixed_rows::<3>(0).into_owned();
    let t = Trig::new(&theta);
    let c = com_coeffs(&t, p);
    let (td1, td2, td3) = (x[3], x[4], x[5]);

    let z11 = SMatrix::<f64, 2, 3>::new(-c.y_com, -c.k4, -c.k5, c.x_com, c.k6, c.k7);
    let z21 = SMatrix::<f64, 2, 3>::new(
        -(c.x_com * td1 + c.k6 * td2 + c.k7 * td3),
        -(c.k7 * td3 + c.k6 * (td1 + td2)),
        -c.k7 * (td1 + td2 + td3),
        -(c.y_com * td1 + c.k4 * td2 + c.k5 * td3),
        -(c.k5 * td3 + c.k4 * (td1 + td2)),
        -c.k5 * (td1 + td2 + td3),
    );
    let mut out = SMatrix::<f64, 4, 6>::zeros();
    out.fixed_view_mut::<2, 3>(0, 0).copy_from(&z11);
    out.fixed_view_mut::<2, 3>(2, 0).copy_from(&z21);
    out.fixed_view_mut::<2, 3>(2, 3).copy_from(&z11);
    out
}

/// Analytic `∂ζ/∂p`; the inertia block is identically zero.
pub fn output_jacobian_p(x: &State, p: &ParamVector) -> SMatrix<f64, 4, 12> {
    let ParamVector {
        m1,
        m2,
        m3,
        l1,
        l2,
        lc1,
        lc2,
        lc3,
        ..
    } = *p;
    let theta = x.fixed_rows::<3>(0).into_owned();
    let t = Trig::new(&theta);
    let (k0, _, k2, k3) = k_coeffs(p);
    let c = com_coeffs(&t, p);
    let (td1, td2, td3) = (x[3], x[4], x[5]);
    let k8 = k0 * ((k2 * t.s12 + k3 * t.s123) * td2 + lc3 * m3 * t.s123 * td3);
    let k9 = k0 * ((k2 * t.c12 + k3 * t.c123) * td2 + lc3 * m3 * t.c123 * td3);

    let zp11 = k0
        * SMatrix::<f64, 2, 3>::new(
            lc1 * t.c1 - c.x_com,
            l1 * t.c1 + lc2 * t.c12 - c.x_com,
            l1 * t.c1 + l2 * t.c12 + lc3 * t.c123 - c.x_com,
            lc1 * t.s1 - c.y_com,
            l1 * t.s1 + lc2 * t.s12 - c.y_com,
            l1 * t.s1 + l2 * t.s12 + lc3 * t.s123 - c.y_com,
        );
    let zp13 = k0
        * SMatrix::<f64, 2, 3>::new(
            (m2 + m3) * t.c1,
            m3 * t.c12,
            0.0,
            (m2 + m3) * t.s1,
            m3 * t.s12,
            0.0,
        );
    let zp14 = k0
        * SMatrix::<f64, 2, 3>::new(
            m1 * t.c1,
            m2 * t.c12,
            m3 * t.c123,
            m1 * t.s1,
            m2 * t.s12,
            m3 * t.s123,
        );
    let zp21 = k0
        * td1
        * SMatrix::<f64, 2, 3>::new(
            -lc1 * t.s1 + c.y_com,
            -(l1 * t.s1 + lc2 * t.s12) + c.y_com,
            -(l1 * t.s1 + l2 * t.s12 + lc3 * t.s123) + c.y_com,
            lc1 * t.c1 - c.x_com,
            l1 * t.c1 + lc2 * t.c12 - c.x_com,
            l1 * t.c1 + l2 * t.c12 + lc3 * t.c123 - c.x_com,
        )
        + k0 * td2
            * SMatrix::<f64, 2, 3>::new(
                0.0,
                -lc2 * t.s12,
                -(l2 * t.s12 + lc3 * t.s123),
                0.0,
                lc2 * t.c12,
                l2 * t.c12 + lc3 * t.c123,
            )
        + k0 * SMatrix::<f64, 2, 3>::new(
            k8,
            k8,
            k8 - lc3 * t.s123 * td3,
            -k9,
            -k9,
            lc3 * t.c123 * td3 - k9,
        );
    let zp23 = k0
        * SMatrix::<f64, 2, 3>::new(
            -(m2 + m3) * t.s1 * td1,
            -m3 * t.s12 * (td1 + td2),
            0.0,
            (m2 + m3) * t.c1 * td1,
            m3 * t.c12 * (td1 + td2),
            0.0,
        );
    let zp24 = k0
        * SMatrix::<f64, 2, 3>::new(
            -m1 * t.s1 * td1,
            -m2 * t.s12 * (td1 + td2),
            -m3 * t.s123 * (td1 + td2 + td3),
            m1 * t.c1 * td1,
            m2 * t.c12 * (td1 + td2),
            m3 * t.c123 * (td1 + td2 + td3),
        );

    let mut out = SMatrix::<f64, 4, 12>::zeros();
    out.fixed_view_mut::<2, 3>(0, 0).copy_from(&zp11);
    out.fixed_view_mut::<2, 3>(0, 6).copy_from(&zp13);
    out.fixed_view_mut::<2, 3>(0, 9).copy_from(&zp14);
    out.fixed_view_mut::<2, 3>(2, 0).copy_from(&zp21);
    out.fixed_view_mut::<2, 3>(2, 6).copy_from(&zp23);
    out.fixed_view_mut::<2, 3>(2, 9).copy_from(&zp24);
    out
}

/// Position of the shoulder point (tip of link 3) in the inertial frame.
pub fn shoulder_position(theta: &Vector3<f64>, p: &ParamVector) -> nalgebra::Vector2<f64> {
    let t = Trig::new(theta);
    nalgebra::Vector2::new(
        p.l1 * t.c1 + p.l2 * t.c12 + p.l3 * t.c123,
        p.l1 * t.s1 + p.l2 * t.s12 + p.l3 * t.s123,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rounded catalog parameters (all CoM offsets at mid-link).
    fn midpoint_params() -> ParamVector {
        ParamVector {
            m1: 9.68,
            m2: 12.59,
            m3: 44.57,
            i1: 1.16,
            i2: 0.52,
            i3: 2.56,
            l1: 0.53,
            l2: 0.41,
            l3: 0.52,
            lc1: 0.265,
            lc2: 0.205,
            lc3: 0.26,
        }
    }

    fn random_box_params(rng: &mut ChaCha8Rng) -> ParamVector {
        let b = scenario::param_box_default();
        let mut pc = ParamCoords::zeros();
        for i in 0..N_PARAMS {
            pc[i] = rng.gen_range(b.lo[i]..=b.hi[i]);
        }
        ParamVector::from_coords(&pc)
    }

    fn random_theta(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        Vector3::from_fn(|_, _| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI))
    }

    /// Kinetic energy from the link CoM point kinematics, independent of the
    /// assembled mass matrix.
    fn kinetic_energy_oracle(
        theta: &Vector3<f64>,
        thetadot: &Vector3<f64>,
        p: &ParamVector,
    ) -> f64 {
        let a1 = theta[0];
        let a2 = theta[0] + theta[1];
        let a3 = theta[0] + theta[1] + theta[2];
        let w1 = thetadot[0];
        let w2 = thetadot[0] + thetadot[1];
        let w3 = thetadot[0] + thetadot[1] + thetadot[2];
        let dir = |a: f64| Vector2::new(-a.sin(), a.cos());
        let v1 = dir(a1) * (p.lc1 * w1);
        let v2 = dir(a1) * (p.l1 * w1) + dir(a2) * (p.lc2 * w2);
        let v3 = dir(a1) * (p.l1 * w1) + dir(a2) * (p.l2 * w2) + dir(a3) * (p.lc3 * w3);
        0.5 * (p.m1 * v1.norm_squared()
            + p.m2 * v2.norm_squared()
            + p.m3 * v3.norm_squared()
            + p.i1 * w1 * w1
            + p.i2 * w2 * w2
            + p.i3 * w3 * w3)
    }

    fn potential_energy(theta: &Vector3<f64>, p: &ParamVector) -> f64 {
        let (_, k1, k2, k3) = k_coeffs(p);
        GRAVITY
            * (k1 * theta[0].sin()
                + k2 * (theta[0] + theta[1]).sin()
                + k3 * (theta[0] + theta[1] + theta[2]).sin())
    }

    #[test]
    fn mass_matrix_matches_kinetic_energy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = random_box_params(&mut rng);
            let theta = random_theta(&mut rng);
            let thetadot = Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0));
            let m = mass_matrix(&theta, &p);
            let t_form = 0.5 * thetadot.dot(&(m * thetadot));
            let t_oracle = kinetic_energy_oracle(&theta, &thetadot, &p);
            assert_abs_diff_eq!(t_form, t_oracle, epsilon = 1e-8 * t_oracle.abs().max(1.0));
        }
    }

    #[test]
    fn mass_matrix_symmetric_positive_definite_over_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let p = random_box_params(&mut rng);
            let theta = random_theta(&mut rng);
            let m = mass_matrix(&theta, &p);
            assert_eq!(m, m.transpose());
            let min_eig = m.symmetric_eigenvalues().min();
            assert!(min_eig > 0.0, "min eigenvalue {min_eig} at θ={theta:?}");
        }
    }

    #[test]
    fn mass_matrix_m33_configuration_independent() {
        let p = midpoint_params();
        let expected = p.i3 + p.lc3 * p.lc3 * p.m3;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = mass_matrix(&random_theta(&mut rng), &p);
            assert_eq!(m[(2, 2)], expected);
        }
    }

    #[test]
    fn rest_force_is_pure_gravity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p = random_box_params(&mut rng);
            let theta = random_theta(&mut rng);
            let (_, k1, k2, k3) = k_coeffs(&p);
            let t = Trig::new(&theta);
            let gravity = GRAVITY
                * Vector3::new(
                    k1 * t.c1 + k2 * t.c12 + k3 * t.c123,
                    k2 * t.c12 + k3 * t.c123,
                    k3 * t.c123,
                );
            assert_abs_diff_eq!(
                coriolis_gravity(&theta, &Vector3::zeros(), &p),
                gravity,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn gravity_term_is_com_height_gradient() {
        // gravity part of F equals (g/k0)·∇_θ y_CoM, tying the dynamics to
        // the output map
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let p = random_box_params(&mut rng);
            let theta = random_theta(&mut rng);
            let (k0, ..) = k_coeffs(&p);
            let f = coriolis_gravity(&theta, &Vector3::zeros(), &p);
            for j in 0..3 {
                let h = fd_step(theta[j]);
                let mut tp = theta;
                let mut tm = theta;
                tp[j] += h;
                tm[j] -= h;
                let y_p = output_map(&State::new(tp[0], tp[1], tp[2], 0.0, 0.0, 0.0), &p)[1];
                let y_m = output_map(&State::new(tm[0], tm[1], tm[2], 0.0, 0.0, 0.0), &p)[1];
                let grad = (y_p - y_m) / (2.0 * h);
                assert_abs_diff_eq!(
                    f[j],
                    GRAVITY / k0 * grad,
                    epsilon = 1e-6 * f.abs().max().max(1.0)
                );
            }
        }
    }

    #[test]
    fn euler_lagrange_identity_along_smooth_motion() {
        // d/dt(∂T/∂θ̇) − ∂T/∂θ + ∂V/∂θ must equal M θ̈ + F; this audits the
        // velocity-product matrix for transcription errors
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let p = random_box_params(&mut rng);
            let a = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let b = Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5));
            let w = Vector3::from_fn(|_, _| rng.gen_range(0.5..2.0));
            let phi = Vector3::from_fn(|_, _| rng.gen_range(0.0..6.0));
            let theta_t =
                |t: f64| a + b.component_mul(&Vector3::from_fn(|i, _| (w[i] * t + phi[i]).sin()));
            let thetadot_t =
                |t: f64| Vector3::from_fn(|i, _| b[i] * w[i] * (w[i] * t + phi[i]).cos());
            let thetaddot_t =
                |t: f64| Vector3::from_fn(|i, _| -b[i] * w[i] * w[i] * (w[i] * t + phi[i]).sin());
            let t0 = 0.3;
            let h = 1e-5;
            // d/dt(M θ̇) by central differences
            let mom = |t: f64| mass_matrix(&theta_t(t), &p) * thetadot_t(t);
            let dmom = (mom(t0 + h) - mom(t0 - h)) / (2.0 * h);
            // ∂T/∂θ and ∂V/∂θ by central differences
            let hh = 1e-6;
            let theta0 = theta_t(t0);
            let thetadot0 = thetadot_t(t0);
            let mut dt_dtheta = Vector3::zeros();
            let mut dv_dtheta = Vector3::zeros();
            for j in 0..3 {
                let mut tp = theta0;
                let mut tm = theta0;
                tp[j] += hh;
                tm[j] -= hh;
                dt_dtheta[j] = (kinetic_energy_oracle(&tp, &thetadot0, &p)
                    - kinetic_energy_oracle(&tm, &thetadot0, &p))
                    / (2.0 * hh);
                dv_dtheta[j] = (potential_energy(&tp, &p) - potential_energy(&tm, &p)) / (2.0 * hh);
            }
            let lhs = dmom - dt_dtheta + dv_dtheta;
            let rhs = mass_matrix(&theta0, &p) * thetaddot_t(t0)
                + coriolis_gravity(&theta0, &thetadot0, &p);
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-5 * rhs.abs().max().max(1.0));
        }
    }

    #[test]
    fn force_matrix_fixed_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let p = random_box_params(&mut rng);
            let a = generalized_force_matrix(&random_theta(&mut rng), &p);
            assert_eq!(a.column(0).as_slice(), [0.0, 0.0, 1.0]);
            assert_eq!(a.column(1).as_slice(), [-1.0, -1.0, -1.0]);
        }
    }

    #[test]
    fn force_matrix_seated_posture_entry() {
        // θ = (90°, −90°, 90°): cos terms collapse to the thigh length
        let p = midpoint_params();
        let theta = Vector3::new(
            std::f64::consts::FRAC_PI_2,
            -std::f64::consts::FRAC_PI_2,
            std::f64::consts::FRAC_PI_2,
        );
        let a = generalized_force_matrix(&theta, &p);
        assert_abs_diff_eq!(a[(0, 3)], 0.41, epsilon = 1e-12);
    }

    #[test]
    fn force_columns_are_shoulder_jacobian_transpose() {
        // virtual work: the (F_x, F_y) columns must be the transposed
        // Jacobian of the shoulder point
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let p = random_box_params(&mut rng);
            let theta = random_theta(&mut rng);
            let a = generalized_force_matrix(&theta, &p);
            for j in 0..3 {
                let h = fd_step(theta[j]);
                let mut tp = theta;
                let mut tm = theta;
                tp[j] += h;
                tm[j] -= h;
                let d = (shoulder_position(&tp, &p) - shoulder_position(&tm, &p)) / (2.0 * h);
                assert_abs_diff_eq!(a[(j, 2)], d[0], epsilon = 1e-8);
                assert_abs_diff_eq!(a[(j, 3)], d[1], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn forward_dynamics_velocity_rows_and_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let p = random_box_params(&mut rng);
            let x = State::from_fn(|i, _| {
                if i < 3 {
                    rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)
                } else {
                    rng.gen_range(-3.0..3.0)
                }
            });
            let u = Input::from_fn(|_, _| rng.gen_range(-100.0..100.0));
            let f = forward_dynamics(&x, &p, &u).unwrap();
            assert_eq!(f.fixed_rows::<3>(0), x.fixed_rows::<3>(3));
            let theta = x.fixed_rows::<3>(0).into_owned();
            let thetadot = x.fixed_rows::<3>(3).into_owned();
            let residual = mass_matrix(&theta, &p) * f.fixed_rows::<3>(3)
                + coriolis_gravity(&theta, &thetadot, &p)
                - generalized_force_matrix(&theta, &p) * u;
            assert!(residual.abs().max() < 1e-10 * u.abs().max().max(1.0));
        }
    }

    #[test]
    fn static_equilibrium_gives_zero_derivative() {
        // u solving A_τ u = F(θ, 0, p) holds the posture
        let p = midpoint_params();
        let theta = Vector3::new(1.2, -0.9, 0.7);
        let a = generalized_force_matrix(&theta, &p);
        let f = coriolis_gravity(&theta, &Vector3::zeros(), &p);
        let u = a.transpose() * (a * a.transpose()).lu().solve(&f).unwrap();
        let x = State::new(theta[0], theta[1], theta[2], 0.0, 0.0, 0.0);
        let xdot = forward_dynamics(&x, &p, &u).unwrap();
        assert_abs_diff_eq!(xdot, State::zeros(), epsilon = 1e-10);
    }

    #[test]
    fn singular_mass_matrix_rejected() {
        // vanishing torso inertia and CoM offset zero out the third
        // row/column scale, driving the condition estimate past the gate
        let mut p = midpoint_params();
        p.i3 = 1e-22;
        p.lc3 = 1e-12;
        let x = State::zeros();
        match forward_dynamics(&x, &p, &Input::zeros()) {
            Err(ModelError::LinearSolveFailure { .. }) => {}
            other => panic!("expected LinearSolveFailure, got {other:?}"),
        }
    }

    #[test]
    fn input_jacobian_analytic_vs_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let p = random_box_params(&mut rng);
            let x = State::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let u = Input::from_fn(|_, _| rng.gen_range(-50.0..50.0));
            let (_, _, ju_fd) = dynamics_jacobians(&x, &p, &u).unwrap();
            let ju = input_jacobian(&x, &p).unwrap();
            let scale = ju.abs().max().max(1.0);
            assert!(
                (ju - ju_fd).abs().max() / scale < 1e-6,
                "analytic vs FD input Jacobian mismatch"
            );
        }
    }

    #[test]
    fn state_jacobian_structure() {
        let p = midpoint_params();
        let x = State::new(1.3, -0.8, 0.9, 0.4, -0.2, 0.1);
        let u = Input::new(10.0, -5.0, 2.0, 30.0);
        let (jx, _, _) = dynamics_jacobians(&x, &p, &u).unwrap();
        // ẋ₁..₃ = θ̇: zero block and identity block
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(jx[(i, j)], 0.0, epsilon = 1e-9);
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(jx[(i, j + 3)], expected, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn state_jacobian_directional_convergence() {
        // f(x + hδ) − f(x) ≈ h·J δ with second-order error in h
        let p = midpoint_params();
        let x = State::new(1.3, -0.8, 0.9, 0.4, -0.2, 0.1);
        let u = Input::new(10.0, -5.0, 2.0, 30.0);
        let (jx, _, _) = dynamics_jacobians(&x, &p, &u).unwrap();
        let delta = State::new(0.3, -0.5, 0.2, 0.4, 0.1, -0.3).normalize();
        let mut errors = Vec::new();
        for &h in &[1e-3, 5e-4, 2.5e-4] {
            let fp = forward_dynamics(&(x + delta * h), &p, &u).unwrap();
            let fm = forward_dynamics(&(x - delta * h), &p, &u).unwrap();
            let err = ((fp - fm) / (2.0 * h) - jx * delta).abs().max();
            errors.push(err);
        }
        // halving h must cut the error by ~4 (allowing roundoff slack)
        assert!(errors[1] < errors[0] / 2.5);
        assert!(errors[2] < errors[1] / 2.5);
    }

    #[test]
    fn output_map_rest_velocities_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = random_box_params(&mut rng);
            let theta = random_theta(&mut rng);
            let y = output_map(&State::new(theta[0], theta[1], theta[2], 0.0, 0.0, 0.0), &p);
            assert_eq!(y[2], 0.0);
            assert_eq!(y[3], 0.0);
        }
    }

    #[test]
    fn output_velocity_is_position_derivative() {
        let p = midpoint_params();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let a = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let b = Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5));
            let w = Vector3::from_fn(|_, _| rng.gen_range(0.5..2.0));
            let theta_t = |t: f64| Vector3::from_fn(|i, _| a[i] + b[i] * (w[i] * t).sin());
            let thetadot_t = |t: f64| Vector3::from_fn(|i, _| b[i] * w[i] * (w[i] * t).cos());
            let t0 = 0.7;
            let h = 1e-5;
            let pos = |t: f64| {
                let th = theta_t(t);
                let y = output_map(&State::new(th[0], th[1], th[2], 0.0, 0.0, 0.0), &p);
                Vector2::new(y[0], y[1])
            };
            let fd = (pos(t0 + h) - pos(t0 - h)) / (2.0 * h);
            let th = theta_t(t0);
            let td = thetadot_t(t0);
            let y = output_map(&State::new(th[0], th[1], th[2], td[0], td[1], td[2]), &p);
            assert_abs_diff_eq!(y[2], fd[0], epsilon = 1e-5);
            assert_abs_diff_eq!(y[3], fd[1], epsilon = 1e-5);
        }
    }

    fn fd_output_jacobian_x(x: &State, p: &ParamVector) -> SMatrix<f64, 4, 6> {
        let mut j = SMatrix::<f64, 4, 6>::zeros();
        for c in 0..6 {
            let h = fd_step(x[c]);
            let mut xp = *x;
            let mut xm = *x;
            xp[c] += h;
            xm[c] -= h;
            j.set_column(c, &((output_map(&xp, p) - output_map(&xm, p)) / (2.0 * h)));
        }
        j
    }

    fn fd_output_jacobian_p(x: &State, p: &ParamVector) -> SMatrix<f64, 4, 12> {
        let pc = p.to_coords();
        let mut j = SMatrix::<f64, 4, 12>::zeros();
        for c in 0..12 {
            let h = fd_step(pc[c]);
            let mut pp = pc;
            let mut pm = pc;
            pp[c] += h;
            pm[c] -= h;
            let yp = output_map(x, &ParamVector::from_coords(&pp));
            let ym = output_map(x, &ParamVector::from_coords(&pm));
            j.set_column(c, &((yp - ym) / (2.0 * h)));
        }
        j
    }

    #[test]
    fn output_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let p = random_box_params(&mut rng);
            let x = State::from_fn(|i, _| {
                if i < 3 {
                    rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)
                } else {
                    rng.gen_range(-3.0..3.0)
                }
            });
            let zx = output_jacobian_x(&x, &p);
            let zp = output_jacobian_p(&x, &p);
            let ex = (zx - fd_output_jacobian_x(&x, &p)).abs().max();
            let ep = (zp - fd_output_jacobian_p(&x, &p)).abs().max();
            assert!(ex < 1e-6 * zx.abs().max().max(1.0), "ζ_x FD error {ex:.2e}");
            assert!(ep < 1e-6 * zp.abs().max().max(1.0), "ζ_p FD error {ep:.2e}");
        }
    }

    #[test]
    fn output_jacobian_x_corner_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let p = random_box_params(&mut rng);
            let x = State::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let y = output_map(&x, &p);
            let zx = output_jacobian_x(&x, &p);
            assert_abs_diff_eq!(zx[(0, 0)], -y[1], epsilon = 1e-14);
            assert_abs_diff_eq!(zx[(1, 0)], y[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn output_jacobian_blocks_vanish_at_rest() {
        let p = midpoint_params();
        let x = State::new(1.1, -0.7, 0.8, 0.0, 0.0, 0.0);
        let zx = output_jacobian_x(&x, &p);
        assert_eq!(zx.fixed_view::<2, 3>(2, 0), SMatrix::<f64, 2, 3>::zeros());
        let zp = output_jacobian_p(&x, &p);
        for r in 2..4 {
            for c in 0..12 {
                assert_eq!(zp[(r, c)], 0.0);
            }
        }
    }

    #[test]
    fn output_jacobian_p_inertia_columns_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let p = random_box_params(&mut rng);
            let x = State::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let zp = output_jacobian_p(&x, &p);
            for c in 3..6 {
                assert_eq!(zp.column(c), SMatrix::<f64, 4, 1>::zeros());
            }
        }
    }

    #[test]
    fn param_validation() {
        assert!(midpoint_params().validate().is_ok());
        let mut p = midpoint_params();
        p.m2 = -1.0;
        assert!(p.validate().unwrap_err().contains("m2"));
        let mut p = midpoint_params();
        p.lc1 = p.l1 + 0.1;
        assert!(p.validate().unwrap_err().contains("lc1"));
    }
}
