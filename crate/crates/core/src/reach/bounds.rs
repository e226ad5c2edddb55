//! Sensitivity envelopes, vertex selection and the interval
//! over-approximation itself.

use super::flow::TrajectoryBundle;
use super::{ParamBox, ReachError, Space};
use crate::grid::Grid;
use crate::lqr::ClosedLoop;
use crate::robot::{self, Output, ParamCoords, ParamVector, State};
use nalgebra::{RowSVector, SMatrix, SVector};
use std::collections::BTreeSet;

/// Per-time, per-entry lower/upper envelopes of a sensitivity matrix with
/// `R` output rows.
#[derive(Debug, Clone)]
pub struct BoundsSeries<const R: usize> {
    pub grid: Grid,
    pub lo: Vec<SMatrix<f64, R, 12>>,
    pub hi: Vec<SMatrix<f64, R, 12>>,
}

impl<const R: usize> BoundsSeries<R> {
    fn from_samples(
        grid: &Grid,
        n: usize,
        mut sample: impl FnMut(usize, usize) -> SMatrix<f64, R, 12>,
    ) -> Self {
        let mut lo = Vec::with_capacity(grid.len);
        let mut hi = Vec::with_capacity(grid.len);
        for k in 0..grid.len {
            let mut lo_k = sample(0, k);
            let mut hi_k = lo_k;
            for i in 1..n {
                let s = sample(i, k);
                lo_k.zip_apply(&s, |l, v| *l = l.min(v));
                hi_k.zip_apply(&s, |h, v| *h = h.max(v));
            }
            lo.push(lo_k);
            hi.push(hi_k);
        }
        BoundsSeries {
            grid: grid.clone(),
            lo,
            hi,
        }
    }

    /// Widens the envelope at `(t_idx, i, j)` to include `value`.
    pub fn absorb(&mut self, t_idx: usize, i: usize, j: usize, value: f64) {
        let lo = &mut self.lo[t_idx][(i, j)];
        *lo = lo.min(value);
        let hi = &mut self.hi[t_idx][(i, j)];
        *hi = hi.max(value);
    }
}

fn common_grid(bundles: &[TrajectoryBundle]) -> Result<Grid, ReachError> {
    let grid = bundles
        .first()
        .ok_or(ReachError::GridMismatch)?
        .grid
        .clone();
    if bundles.iter().any(|b| b.grid != grid) {
        return Err(ReachError::GridMismatch);
    }
    Ok(grid)
}

/// State-space envelopes: per-entry min/max of `Sˣ` over the bundles.
pub fn state_bounds(bundles: &[TrajectoryBundle]) -> Result<BoundsSeries<6>, ReachError> {
    let grid = common_grid(bundles)?;
    Ok(BoundsSeries::from_samples(&grid, bundles.len(), |i, k| {
        bundles[i].sens[k]
    }))
}

/// Output-space sensitivity of one bundle sample at one grid index:
/// `Sʸ = ζ_x Sˣ + ζ_p` evaluated at that sample's state and parameter.
pub fn output_sensitivity(bundle: &TrajectoryBundle, k: usize) -> SMatrix<f64, 4, 12> {
    let p = ParamVector::from_coords(&bundle.p);
    robot::output_jacobian_x(&bundle.states[k], &p) * bundle.sens[k]
        + robot::output_jacobian_p(&bundle.states[k], &p)
}

/// Output-space envelopes, mapping each sample exactly before the fold.
pub fn output_bounds(bundles: &[TrajectoryBundle]) -> Result<BoundsSeries<4>, ReachError> {
    let grid = common_grid(bundles)?;
    Ok(BoundsSeries::from_samples(&grid, bundles.len(), |i, k| {
        output_sensitivity(&bundles[i], k)
    }))
}

/// Input-space envelopes via `Sᵘ = −K(t) Sˣ` with the feedback-path gain.
pub fn input_bounds(
    bundles: &[TrajectoryBundle],
    closed_loop: &ClosedLoop,
) -> Result<BoundsSeries<4>, ReachError> {
    let grid = common_grid(bundles)?;
    if grid != *closed_loop.grid() {
        return Err(ReachError::GridMismatch);
    }
    Ok(BoundsSeries::from_samples(&grid, bundles.len(), |i, k| {
        -closed_loop.effective_gain_at(k) * bundles[i].sens[k]
    }))
}

/// Value of the state flow in row `i` at grid index `k`.
pub fn state_value(states: &[State], k: usize, i: usize) -> f64 {
    states[k][i]
}

/// Output image `ζ(Φ(t), p)` of a trajectory at grid index `k`.
pub fn output_value(states: &[State], p: &ParamCoords, k: usize) -> Output {
    robot::output_map(&states[k], &ParamVector::from_coords(p))
}

/// Feedback input image `û(t_k) − K(t_k)(Φ(t_k) − x̂(t_k))`.
pub fn input_value(states: &[State], closed_loop: &ClosedLoop, k: usize) -> robot::Input {
    closed_loop.reference.u[k]
        - closed_loop.effective_gain_at(k) * (states[k] - closed_loop.reference.x[k])
}

/// Vertex selection for one output row at one time: parameter signatures for
/// the lower/upper extremal trajectories and the compensation row `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowVertices {
    /// Signature of the vertex driving the lower bound (bit j = coordinate j
    /// at its upper box bound).
    pub lo_sig: u16,
    /// Signature of the vertex driving the upper bound.
    pub hi_sig: u16,
    /// Compensation row; zero wherever the sensitivity sign is stable.
    pub d: RowSVector<f64, 12>,
}

/// Applies the sign rule per parameter: when the interval center is
/// nonnegative the lower trajectory takes the lower box bound (and vice
/// versa), and `d` absorbs whatever part of the envelope crosses zero.
pub fn select_vertices_row(lo: &RowSVector<f64, 12>, hi: &RowSVector<f64, 12>) -> RowVertices {
    let mut out = RowVertices {
        lo_sig: 0,
        hi_sig: 0,
        d: RowSVector::zeros(),
    };
    for j in 0..12 {
        let center = 0.5 * (lo[j] + hi[j]);
        if center >= 0.0 {
            out.hi_sig |= 1 << j;
            out.d[j] = lo[j].min(0.0);
        } else {
            out.lo_sig |= 1 << j;
            out.d[j] = hi[j].max(0.0);
        }
    }
    out
}

/// Interval bounds `[lo(t), hi(t)]` on one space of the reachable set.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachSeries<const R: usize> {
    pub grid: Grid,
    pub lo: Vec<SVector<f64, R>>,
    pub hi: Vec<SVector<f64, R>>,
}

/// All vertex signatures the over-approximation of `bounds` will evaluate.
pub fn required_vertices<const R: usize>(bounds: &BoundsSeries<R>) -> BTreeSet<u16> {
    let mut sigs = BTreeSet::new();
    for k in 0..bounds.grid.len {
        for i in 0..R {
            let rv = select_vertices_row(
                &bounds.lo[k].row(i).into_owned(),
                &bounds.hi[k].row(i).into_owned(),
            );
            sigs.insert(rv.lo_sig);
            sigs.insert(rv.hi_sig);
        }
    }
    sigs
}

/// Builds the interval over-approximation from the sensitivity envelopes.
///
/// `vertex_value(sig, k)` must return the mapped flow value at the box
/// vertex with signature `sig` and grid index `k` (vertex trajectories are
/// integrated once per distinct signature and cached by the caller). Per row
/// `i`:
///
/// ```text
///     lo_i(t) = Φ_i(t; π̲ⁱ) − dⁱ(π̲ⁱ − π̄ⁱ),
///     hi_i(t) = Φ_i(t; π̄ⁱ) + dⁱ(π̲ⁱ − π̄ⁱ).
/// ```
pub fn over_approximate<const R: usize>(
    bounds: &BoundsSeries<R>,
    pbox: &ParamBox,
    vertex_value: &impl Fn(u16, usize) -> SVector<f64, R>,
) -> ReachSeries<R> {
    let mut lo = Vec::with_capacity(bounds.grid.len);
    let mut hi = Vec::with_capacity(bounds.grid.len);
    for k in 0..bounds.grid.len {
        let mut lo_k = SVector::<f64, R>::zeros();
        let mut hi_k = SVector::<f64, R>::zeros();
        for i in 0..R {
            let rv = select_vertices_row(
                &bounds.lo[k].row(i).into_owned(),
                &bounds.hi[k].row(i).into_owned(),
            );
            let pi_lo = pbox.vertex(rv.lo_sig);
            let pi_hi = pbox.vertex(rv.hi_sig);
            let comp = (rv.d * (pi_lo - pi_hi))[0];
            debug_assert!(comp >= -1e-12, "compensation must widen the interval");
            lo_k[i] = vertex_value(rv.lo_sig, k)[i] - comp;
            hi_k[i] = vertex_value(rv.hi_sig, k)[i] + comp;
        }
        lo.push(lo_k);
        hi.push(hi_k);
    }
    ReachSeries {
        grid: bounds.grid.clone(),
        lo,
        hi,
    }
}

/// One mapped trajectory value falling outside its reach interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub space: Space,
    pub sample: usize,
    pub t_idx: usize,
    pub coord: usize,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    /// Signed distance outside the interval (positive = violation size).
    pub margin: f64,
}

/// Containment summary over one space.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainmentReport {
    pub space: Space,
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl ContainmentReport {
    pub fn fraction(&self) -> f64 {
        if self.checked == 0 {
            return 1.0;
        }
        1.0 - self.violations.len() as f64 / self.checked as f64
    }
}

/// Checks every (sample, time, coordinate) triple of the mapped trajectories
/// against the reach intervals.
pub fn containment_check<const R: usize>(
    space: Space,
    reach: &ReachSeries<R>,
    trajectories: &[Vec<SVector<f64, R>>],
) -> ContainmentReport {
    let mut report = ContainmentReport {
        space,
        checked: 0,
        violations: Vec::new(),
    };
    for (sample, traj) in trajectories.iter().enumerate() {
        debug_assert_eq!(traj.len(), reach.grid.len);
        for (k, v) in traj.iter().enumerate() {
            for i in 0..R {
                report.checked += 1;
                let (lo, hi) = (reach.lo[k][i], reach.hi[k][i]);
                if v[i] < lo || v[i] > hi {
                    report.violations.push(Violation {
                        space,
                        sample,
                        t_idx: k,
                        coord: i,
                        value: v[i],
                        lo,
                        hi,
                        margin: (lo - v[i]).max(v[i] - hi),
                    });
                }
            }
        }
    }
    report
}
