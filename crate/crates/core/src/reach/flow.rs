//! Joint integration of the closed-loop flow and its parameter sensitivity.
//!
//! For a fixed parameter `p` the sensitivity `S(t) = ∂Φ(t; p)/∂p ∈ R⁶ˣ¹²`
//! obeys the variational equation
//!
//! ```text
//!     Ṡ = (∂f_cl/∂x) S + ∂f_cl/∂p,     S(t0) = 0,
//! ```
//!
//! with both Jacobians taken of the assembled closed-loop right-hand side
//! along the trajectory. State and sensitivity are stepped together as one
//! 78-dimensional system.

use super::ReachError;
use crate::grid::Grid;
use crate::integrate::{integrate_grid_adaptive, GridIntegrationError, OdeState};
use crate::lqr::ClosedLoop;
use crate::robot::{ParamCoords, ParamVector, State};
use nalgebra::{Matrix6, SMatrix};

/// Sensitivity matrix of the state flow.
pub type SensX = SMatrix<f64, 6, 12>;

/// A parameterized flow with the Jacobians the variational equation needs.
pub trait SensitivityModel {
    fn deriv(&self, t: f64, x: &State, p: &ParamCoords) -> Result<State, ReachError>;
    fn jacobians(
        &self,
        t: f64,
        x: &State,
        p: &ParamCoords,
    ) -> Result<(Matrix6<f64>, SensX), ReachError>;
}

impl SensitivityModel for ClosedLoop<'_> {
    fn deriv(&self, t: f64, x: &State, p: &ParamCoords) -> Result<State, ReachError> {
        Ok(self.rhs(t, x, &ParamVector::from_coords(p))?)
    }

    fn jacobians(
        &self,
        t: f64,
        x: &State,
        p: &ParamCoords,
    ) -> Result<(Matrix6<f64>, SensX), ReachError> {
        Ok(ClosedLoop::jacobians(
            self,
            t,
            x,
            &ParamVector::from_coords(p),
        )?)
    }
}

/// Augmented integration state: flow value plus sensitivity.
#[derive(Debug, Clone, PartialEq)]
pub struct AugState {
    pub x: State,
    pub s: SensX,
}

impl OdeState for AugState {
    fn add_scaled(&self, k: &Self, h: f64) -> Self {
        AugState {
            x: self.x + k.x * h,
            s: self.s + k.s * h,
        }
    }

    fn sup_norm(&self) -> f64 {
        let fold = |acc: f64, v: &f64| {
            if v.is_nan() {
                f64::NAN
            } else {
                acc.max(v.abs())
            }
        };
        let xn = self.x.iter().fold(0.0, fold);
        self.s.iter().fold(xn, fold)
    }
}

/// One trajectory of the closed loop with its sensitivity, on the grid.
#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    pub p: ParamCoords,
    pub grid: Grid,
    pub states: Vec<State>,
    pub sens: Vec<SensX>,
    /// Substeps per interval the integration settled at.
    pub substeps: usize,
}

const FLOW_CEILING: f64 = 1e9;
const FLOW_MAX_SUBSTEPS: usize = 4096;

/// Integrates flow and sensitivity for one parameter over the grid.
pub fn augmented_flow<M: SensitivityModel>(
    p: &ParamCoords,
    x0: &State,
    grid: &Grid,
    model: &M,
    start_substeps: usize,
) -> Result<TrajectoryBundle, ReachError> {
    let mut rhs = |t: f64, y: &AugState| -> Result<AugState, ReachError> {
        let xdot = model.deriv(t, &y.x, p)?;
        let (jx, jp) = model.jacobians(t, &y.x, p)?;
        Ok(AugState {
            x: xdot,
            s: jx * y.s + jp,
        })
    };
    let y0 = AugState {
        x: *x0,
        s: SensX::zeros(),
    };
    let (ys, substeps) = integrate_grid_adaptive(
        &mut rhs,
        grid,
        y0,
        start_substeps,
        FLOW_MAX_SUBSTEPS,
        FLOW_CEILING,
    )
    .map_err(|e| match e {
        GridIntegrationError::Rhs(e) => e,
        GridIntegrationError::BlowUp(b) => ReachError::IntegrationFailure {
            t: b.t,
            norm: b.norm,
        },
    })?;
    Ok(TrajectoryBundle {
        p: *p,
        grid: grid.clone(),
        states: ys.iter().map(|y| y.x).collect(),
        sens: ys.iter().map(|y| y.s).collect(),
        substeps,
    })
}

/// Integrates only the flow (no sensitivity), for vertex and validation
/// trajectories.
pub fn flow_only<M: SensitivityModel>(
    p: &ParamCoords,
    x0: &State,
    grid: &Grid,
    model: &M,
    start_substeps: usize,
) -> Result<Vec<State>, ReachError> {
    let mut rhs = |t: f64, x: &State| model.deriv(t, x, p);
    match integrate_grid_adaptive(
        &mut rhs,
        grid,
        *x0,
        start_substeps,
        FLOW_MAX_SUBSTEPS,
        FLOW_CEILING,
    ) {
        Ok((ys, _)) => Ok(ys),
        Err(GridIntegrationError::Rhs(e)) => Err(e),
        Err(GridIntegrationError::BlowUp(b)) => Err(ReachError::IntegrationFailure {
            t: b.t,
            norm: b.norm,
        }),
    }
}

#[cfg(test)]
pub(crate) mod toy {
    use super::*;

    /// `ẋ₁ = p₁ x₁` embedded in the fixed dimensions; every other
    /// coordinate is frozen. Closed form: `Φ₁(t) = x₀ e^{p₁ t}`,
    /// `S₁₁(t) = t x₀ e^{p₁ t}`.
    pub struct ScalarGrowth;

    impl SensitivityModel for ScalarGrowth {
        fn deriv(&self, _t: f64, x: &State, p: &ParamCoords) -> Result<State, ReachError> {
            let mut out = State::zeros();
            out[0] = p[0] * x[0];
            Ok(out)
        }

        fn jacobians(
            &self,
            _t: f64,
            x: &State,
            p: &ParamCoords,
        ) -> Result<(Matrix6<f64>, SensX), ReachError> {
            let mut jx = Matrix6::zeros();
            jx[(0, 0)] = p[0];
            let mut jp = SensX::zeros();
            jp[(0, 0)] = x[0];
            Ok((jx, jp))
        }
    }
}
