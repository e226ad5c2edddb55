//! Fixed-step fourth-order Runge-Kutta integration on a time grid.
//!
//! All trajectory and Riccati solves use the same scheme: RK4 with the grid
//! step, optionally subdivided into `substeps` equal pieces per interval.
//! Substeps are doubled on blow-up so a too-coarse grid degrades into a finer
//! fixed step instead of NaNs; the chosen count depends only on the problem,
//! never on thread scheduling.

use crate::grid::Grid;

/// State types integrable by the fixed-step RK4 loop.
pub trait OdeState: Clone {
    /// `self + k * h` (axpy).
    fn add_scaled(&self, k: &Self, h: f64) -> Self;
    /// Max-norm used for blow-up detection; must be NaN-propagating.
    fn sup_norm(&self) -> f64;
}

impl<R, C, S> OdeState for nalgebra::Matrix<f64, R, C, S>
where
    R: nalgebra::Dim,
    C: nalgebra::Dim,
    S: nalgebra::RawStorage<f64, R, C> + nalgebra::Storage<f64, R, C> + Clone,
    nalgebra::DefaultAllocator: nalgebra::allocator::Allocator<R, C, Buffer<f64> = S>,
{
    fn add_scaled(&self, k: &Self, h: f64) -> Self {
        self + k * h
    }

    fn sup_norm(&self) -> f64 {
        self.iter().fold(0.0_f64, |acc, v| {
            if v.is_nan() {
                f64::NAN
            } else {
                acc.max(v.abs())
            }
        })
    }
}

/// One RK4 step of size `h` from `(t, y)`.
pub fn rk4_step<S, E>(
    rhs: &mut impl FnMut(f64, &S) -> Result<S, E>,
    t: f64,
    y: &S,
    h: f64,
) -> Result<S, E>
where
    S: OdeState,
{
    let k1 = rhs(t, y)?;
    let k2 = rhs(t + 0.5 * h, &y.add_scaled(&k1, 0.5 * h))?;
    let k3 = rhs(t + 0.5 * h, &y.add_scaled(&k2, 0.5 * h))?;
    let k4 = rhs(t + h, &y.add_scaled(&k3, h))?;
    let mut out = y.add_scaled(&k1, h / 6.0);
    out = out.add_scaled(&k2, h / 3.0);
    out = out.add_scaled(&k3, h / 3.0);
    out = out.add_scaled(&k4, h / 6.0);
    Ok(out)
}

/// Divergence detected during a grid integration.
#[derive(Debug, Clone, PartialEq)]
pub struct BlowUp {
    pub t: f64,
    pub norm: f64,
}

/// Integrates `y' = rhs(t, y)` across the grid, recording the state at every
/// node. `substeps` subdivides each interval; `ceiling` is the sup-norm above
/// which the trajectory counts as diverged.
pub fn integrate_grid<S, E>(
    rhs: &mut impl FnMut(f64, &S) -> Result<S, E>,
    grid: &Grid,
    y0: S,
    substeps: usize,
    ceiling: f64,
) -> Result<Vec<S>, GridIntegrationError<E>>
where
    S: OdeState,
{
    debug_assert!(substeps >= 1);
    let mut out = Vec::with_capacity(grid.len);
    let mut y = y0;
    check(&y, grid.t0, ceiling)?;
    out.push(y.clone());
    let h = grid.dt / substeps as f64;
    for k in 0..grid.len - 1 {
        let t_node = grid.time(k);
        for s in 0..substeps {
            let t = t_node + s as f64 * h;
            y = rk4_step(rhs, t, &y, h).map_err(GridIntegrationError::Rhs)?;
            check(&y, t + h, ceiling)?;
        }
        out.push(y.clone());
    }
    Ok(out)
}

fn check<S: OdeState, E>(y: &S, t: f64, ceiling: f64) -> Result<(), GridIntegrationError<E>> {
    let norm = y.sup_norm();
    if !norm.is_finite() || norm > ceiling {
        return Err(GridIntegrationError::BlowUp(BlowUp { t, norm }));
    }
    Ok(())
}

#[derive(Debug)]
pub enum GridIntegrationError<E> {
    BlowUp(BlowUp),
    Rhs(E),
}

/// Integrates with `substeps` doubling from `start` until the trajectory stays
/// finite, up to `max` substeps. RHS errors abort immediately; only blow-ups
/// trigger a retry.
pub fn integrate_grid_adaptive<S, E>(
    rhs: &mut impl FnMut(f64, &S) -> Result<S, E>,
    grid: &Grid,
    y0: S,
    start_substeps: usize,
    max_substeps: usize,
    ceiling: f64,
) -> Result<(Vec<S>, usize), GridIntegrationError<E>>
where
    S: OdeState,
{
    let mut substeps = start_substeps.max(1);
    loop {
        match integrate_grid(rhs, grid, y0.clone(), substeps, ceiling) {
            Ok(ys) => return Ok((ys, substeps)),
            Err(GridIntegrationError::Rhs(e)) => return Err(GridIntegrationError::Rhs(e)),
            Err(GridIntegrationError::BlowUp(b)) => {
                if substeps * 2 > max_substeps {
                    return Err(GridIntegrationError::BlowUp(b));
                }
                substeps *= 2;
            }
        }
    }
}
