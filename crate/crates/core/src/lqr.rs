//! Finite-horizon LQR along the planned reference.
//!
//! The open-loop dynamics are linearized at every grid sample of the
//! reference, the Riccati matrix differential equation is integrated backward
//! from `P(tf) = S`, and the resulting time-varying gain
//! `K(t) = R⁻¹ B₂ᵀ(t) P(t)` defines the feedback
//! `u = û(t) − K(t)(x − x̂(t))` and with it the closed-loop dynamics.
//!
//! The Riccati equation is propagated in matrix-fraction form `P = Y X⁻¹`,
//! where `[X; Y]` follows the linear Hamiltonian flow and is re-normalized to
//! `[I; P]` after every substep. The quadratic Riccati right-hand side has a
//! boundary layer at `tf` whenever `S` is large against `R` (time constant
//! `~1/‖B₂R⁻¹B₂ᵀS‖`, microseconds here); the linear flow steps across that
//! layer exactly, where direct Runge-Kutta on `Ṗ` would need sub-microsecond
//! steps.

use crate::grid::{lerp, Grid};
use crate::integrate::{integrate_grid_adaptive, rk4_step, GridIntegrationError};
use crate::planning::ReferenceTrajectory;
use crate::robot::{self, Input, ModelError, ParamVector, State};
use nalgebra::{Matrix4, Matrix6, SMatrix};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LqrError {
    #[error("Riccati solution diverged at t = {t} s (|P| = {norm:.3e})")]
    BlowUp { t: f64, norm: f64 },
    #[error("Riccati integration did not converge within {max_substeps} substeps per interval")]
    NoConvergence { max_substeps: usize },
    #[error("time {t} outside the schedule span [{t0}, {tf}]")]
    Domain { t: f64, t0: f64, tf: f64 },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Quadratic-cost weights: running state/input weights `Q ⪰ 0`, `R ≻ 0` and
/// terminal weight `S ⪰ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub q: Matrix6<f64>,
    pub r: Matrix4<f64>,
    pub s: Matrix6<f64>,
}

impl WeightSet {
    pub fn validate(&self) -> Result<(), String> {
        check_symmetric("Q", self.q.as_slice(), 6)?;
        check_symmetric("S", self.s.as_slice(), 6)?;
        check_symmetric("R", self.r.as_slice(), 4)?;
        let q_min = self.q.symmetric_eigenvalues().min();
        let s_min = self.s.symmetric_eigenvalues().min();
        let r_min = self.r.symmetric_eigenvalues().min();
        if q_min < -1e-9 {
            return Err(format!(
                "Q must be positive semidefinite (min eigenvalue {q_min:.3e})"
            ));
        }
        if s_min < -1e-9 {
            return Err(format!(
                "S must be positive semidefinite (min eigenvalue {s_min:.3e})"
            ));
        }
        if r_min <= 0.0 {
            return Err(format!(
                "R must be positive definite (min eigenvalue {r_min:.3e})"
            ));
        }
        Ok(())
    }
}

fn check_symmetric(name: &str, m: &[f64], n: usize) -> Result<(), String> {
    for i in 0..n {
        for j in 0..i {
            if (m[i * n + j] - m[j * n + i]).abs() > 1e-9 {
                return Err(format!("{name} is not symmetric"));
            }
        }
    }
    Ok(())
}

/// Jacobian schedules `A(t) = ∂f/∂x`, `B₁(t) = ∂f/∂p`, `B₂(t) = ∂f/∂u`
/// evaluated along the reference.
#[derive(Debug, Clone)]
pub struct LinearSchedules {
    pub grid: Grid,
    pub a: Vec<Matrix6<f64>>,
    pub b1: Vec<SMatrix<f64, 6, 12>>,
    pub b2: Vec<SMatrix<f64, 6, 4>>,
}

/// Linearizes the open-loop dynamics at every reference sample.
pub fn linearize_schedule(
    reference: &ReferenceTrajectory,
    p: &ParamVector,
) -> Result<LinearSchedules, LqrError> {
    let n = reference.grid.len;
    let mut a = Vec::with_capacity(n);
    let mut b1 = Vec::with_capacity(n);
    let mut b2 = Vec::with_capacity(n);
    for k in 0..n {
        let (jx, jp, ju) = robot::dynamics_jacobians(&reference.x[k], p, &reference.u[k])?;
        a.push(jx);
        b1.push(jp);
        b2.push(ju);
    }
    Ok(LinearSchedules {
        grid: reference.grid.clone(),
        a,
        b1,
        b2,
    })
}

/// Backward Riccati solution on the grid, `P(tf) = S` exactly.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: Grid,
    pub p: Vec<Matrix6<f64>>,
    /// Substeps per grid interval at which the solution converged.
    pub substeps: usize,
}

const P_CEILING: f64 = 1e12;
const RICCATI_MAX_SUBSTEPS: usize = 1024;
const RICCATI_CONVERGENCE_REL: f64 = 1e-6;

/// Integrates the Riccati equation backward from `P(tf) = S`.
///
/// Substeps per interval double until two consecutive resolutions agree on
/// `P(t0)` to 1e-6 relative, so a coarse grid degrades into a finer fixed
/// step instead of a wrong answer.
pub fn solve_riccati(
    schedules: &LinearSchedules,
    weights: &WeightSet,
) -> Result<RiccatiSolution, LqrError> {
    weights.validate().map_err(LqrError::InvalidWeights)?;
    let r_inv = weights
        .r
        .try_inverse()
        .ok_or_else(|| LqrError::InvalidWeights("R is not invertible".into()))?;

    let mut substeps = 1;
    let mut previous: Option<(Vec<Matrix6<f64>>, usize)> = None;
    loop {
        match backward_pass(schedules, weights, &r_inv, substeps) {
            Ok(ps) => {
                if let Some((prev, prev_sub)) = &previous {
                    let scale = ps[0].abs().max().max(1.0);
                    let diff = (ps[0] - prev[0]).abs().max() / scale;
                    if diff <= RICCATI_CONVERGENCE_REL {
                        return Ok(RiccatiSolution {
                            grid: schedules.grid.clone(),
                            p: ps,
                            substeps: *prev_sub.min(&substeps),
                        });
                    }
                }
                previous = Some((ps, substeps));
            }
            Err(e) => {
                if substeps * 2 > RICCATI_MAX_SUBSTEPS {
                    return Err(e);
                }
                previous = None;
            }
        }
        if substeps * 2 > RICCATI_MAX_SUBSTEPS {
            return Err(LqrError::NoConvergence {
                max_substeps: RICCATI_MAX_SUBSTEPS,
            });
        }
        substeps *= 2;
    }
}

/// One backward sweep at a fixed substep count.
fn backward_pass(
    schedules: &LinearSchedules,
    weights: &WeightSet,
    r_inv: &Matrix4<f64>,
    substeps: usize,
) -> Result<Vec<Matrix6<f64>>, LqrError> {
    let grid = &schedules.grid;
    let a_of = |t: f64| lerp(grid, &schedules.a, t);
    let b2_of = |t: f64| lerp(grid, &schedules.b2, t);

    // Hamiltonian flow of the stacked fraction [X; Y]
    let rhs = |t: f64, xy: &SMatrix<f64, 12, 6>| -> Result<SMatrix<f64, 12, 6>, LqrError> {
        let a = a_of(t);
        let b2 = b2_of(t);
        let x: SMatrix<f64, 6, 6> = xy.fixed_view::<6, 6>(0, 0).into_owned();
        let y: SMatrix<f64, 6, 6> = xy.fixed_view::<6, 6>(6, 0).into_owned();
        let mut out = SMatrix::<f64, 12, 6>::zeros();
        out.fixed_view_mut::<6, 6>(0, 0)
            .copy_from(&(a * x - b2 * r_inv * b2.transpose() * y));
        out.fixed_view_mut::<6, 6>(6, 0)
            .copy_from(&(-weights.q * x - a.transpose() * y));
        Ok(out)
    };

    let h = -grid.dt / substeps as f64;
    let mut p = weights.s;
    let mut out = vec![Matrix6::zeros(); grid.len];
    out[grid.len - 1] = p;
    for k in (0..grid.len - 1).rev() {
        let t_right = grid.time(k + 1);
        for s in 0..substeps {
            let t = t_right + s as f64 * h;
            let mut xy = SMatrix::<f64, 12, 6>::zeros();
            xy.fixed_view_mut::<6, 6>(0, 0)
                .copy_from(&Matrix6::identity());
            xy.fixed_view_mut::<6, 6>(6, 0).copy_from(&p);
            let xy = rk4_step(&mut |t, y: &SMatrix<f64, 12, 6>| rhs(t, y), t, &xy, h)?;
            let x: Matrix6<f64> = xy.fixed_view::<6, 6>(0, 0).into_owned();
            let y: Matrix6<f64> = xy.fixed_view::<6, 6>(6, 0).into_owned();
            // P = Y X⁻¹ via Xᵀ Pᵀ = Yᵀ
            let pt = x
                .transpose()
                .lu()
                .solve(&y.transpose())
                .ok_or(LqrError::BlowUp {
                    t: t + h,
                    norm: f64::INFINITY,
                })?;
            p = pt.transpose();
            p = (p + p.transpose()) * 0.5;
            let norm = p.abs().max();
            if !norm.is_finite() || norm > P_CEILING {
                return Err(LqrError::BlowUp { t: t + h, norm });
            }
        }
        out[k] = p;
    }
    Ok(out)
}

/// Time-varying feedback gains `K(t_k) = R⁻¹ B₂ᵀ(t_k) P(t_k)` on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub grid: Grid,
    pub k: Vec<SMatrix<f64, 4, 6>>,
}

pub fn gain_schedule(
    riccati: &RiccatiSolution,
    schedules: &LinearSchedules,
    r: &Matrix4<f64>,
) -> Result<GainSchedule, LqrError> {
    let r_inv = r
        .try_inverse()
        .ok_or_else(|| LqrError::InvalidWeights("R is not invertible".into()))?;
    let k = (0..riccati.grid.len)
        .map(|i| r_inv * schedules.b2[i].transpose() * riccati.p[i])
        .collect();
    Ok(GainSchedule {
        grid: riccati.grid.clone(),
        k,
    })
}

/// The closed loop: reference, gain schedule, and the feedback law between
/// samples.
///
/// Between grid nodes `x̂`, `û` and `K` are interpolated linearly, except
/// that the gain is held at its last interior value across the final
/// interval: `P(tf) = S` makes `K(tf)` sit inside the terminal boundary
/// layer, whose true width is far below one grid step, and ramping into it
/// would make the loop artificially stiff by several orders of magnitude.
#[derive(Debug, Clone)]
pub struct ClosedLoop<'a> {
    pub reference: &'a ReferenceTrajectory,
    pub gains: &'a GainSchedule,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(reference: &'a ReferenceTrajectory, gains: &'a GainSchedule) -> Self {
        debug_assert_eq!(reference.grid, gains.grid);
        Self { reference, gains }
    }

    pub fn grid(&self) -> &Grid {
        &self.reference.grid
    }

    /// Gain actually applied at time `t` (interpolated, terminal interval held).
    pub fn effective_gain(&self, t: f64) -> SMatrix<f64, 4, 6> {
        let grid = &self.gains.grid;
        let (k, a) = grid.locate(t);
        if k + 2 == grid.len {
            return self.gains.k[k];
        }
        self.gains.k[k] * (1.0 - a) + self.gains.k[k + 1] * a
    }

    /// Gain at grid node `i` as seen by the feedback path.
    pub fn effective_gain_at(&self, i: usize) -> SMatrix<f64, 4, 6> {
        let i = i.min(self.gains.grid.len - 2);
        self.gains.k[i]
    }

    pub fn reference_state(&self, t: f64) -> State {
        lerp(self.grid(), &self.reference.x, t)
    }

    pub fn reference_input(&self, t: f64) -> Input {
        lerp(self.grid(), &self.reference.u, t)
    }

    /// Feedback law `u = û(t) − K(t)(x − x̂(t))`.
    pub fn feedback(&self, t: f64, x: &State) -> Result<Input, LqrError> {
        let grid = self.grid();
        if !grid.contains(t) {
            return Err(LqrError::Domain {
                t,
                t0: grid.t0,
                tf: grid.tf(),
            });
        }
        Ok(self.reference_input(t) - self.effective_gain(t) * (x - self.reference_state(t)))
    }

    /// Closed-loop dynamics `f_cl(t, x, p) = f(x, p, u(t, x))`.
    pub fn rhs(&self, t: f64, x: &State, p: &ParamVector) -> Result<State, LqrError> {
        let u = self.feedback(t, x)?;
        Ok(robot::forward_dynamics(x, p, &u)?)
    }

    /// `∂f_cl/∂x` and `∂f_cl/∂p` of the assembled closed-loop right-hand
    /// side, by central finite differences (single code path for both).
    pub fn jacobians(
        &self,
        t: f64,
        x: &State,
        p: &ParamVector,
    ) -> Result<(Matrix6<f64>, SMatrix<f64, 6, 12>), LqrError> {
        let mut jx = Matrix6::zeros();
        for j in 0..6 {
            let h = robot::fd_step(x[j]);
            let mut xp = *x;
            let mut xm = *x;
            xp[j] += h;
            xm[j] -= h;
            jx.set_column(
                j,
                &((self.rhs(t, &xp, p)? - self.rhs(t, &xm, p)?) / (2.0 * h)),
            );
        }
        let pc = p.to_coords();
        let mut jp = SMatrix::<f64, 6, 12>::zeros();
        for j in 0..12 {
            let h = robot::fd_step(pc[j]);
            let mut pp = pc;
            let mut pm = pc;
            pp[j] += h;
            pm[j] -= h;
            let fp = self.rhs(t, x, &ParamVector::from_coords(&pp))?;
            let fm = self.rhs(t, x, &ParamVector::from_coords(&pm))?;
            jp.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        Ok((jx, jp))
    }

    /// Substeps per grid interval for which fixed-step RK4 is stable on the
    /// linearized loop, from the spectral radius of `A(t_k) − B₂(t_k) K(t_k)`
    /// with a safety margin for parameter variation inside the box.
    pub fn stability_substeps(&self, schedules: &LinearSchedules) -> usize {
        let mut rho: f64 = 0.0;
        for i in 0..schedules.grid.len {
            let acl = schedules.a[i] - schedules.b2[i] * self.effective_gain_at(i);
            let radius = acl
                .complex_eigenvalues()
                .iter()
                .fold(0.0_f64, |m, ev| m.max(ev.norm()));
            rho = rho.max(radius);
        }
        // RK4 stability reaches ~2.8 on both axes; aim for |λ|h ≤ 2.0
        let needed = (self.grid().dt * rho / 2.0).ceil().max(1.0) as usize;
        needed.next_power_of_two()
    }

    /// Integrates the closed loop from `x0` across the grid.
    pub fn simulate(
        &self,
        x0: &State,
        p: &ParamVector,
        start_substeps: usize,
    ) -> Result<(Vec<State>, usize), LqrError> {
        let mut rhs = |t: f64, x: &State| self.rhs(t, x, p);
        match integrate_grid_adaptive(&mut rhs, self.grid(), *x0, start_substeps, 4096, 1e9) {
            Ok(out) => Ok(out),
            Err(GridIntegrationError::Rhs(e)) => Err(e),
            Err(GridIntegrationError::BlowUp(b)) => Err(LqrError::BlowUp {
                t: b.t,
                norm: b.norm,
            }),
        }
    }
}
