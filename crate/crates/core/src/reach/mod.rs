//! Sensitivity-based interval over-approximation of reachable sets.
//!
//! A single initial state evolves under the closed loop for every parameter
//! in a box. Per-parameter trajectory sensitivities are integrated along
//! with the flow, their per-entry envelopes over a parameter sample estimate
//! the sensitivity bounds, and the bounds pick one box vertex per output row
//! whose trajectory, padded by a compensation term where the sensitivity
//! sign is not stable, gives interval bounds on the reachable set. The same
//! machinery covers the state itself, the CoM output map, and the feedback
//! input as time-indexed static images of the flow.

mod bounds;
mod falsify;
mod flow;
mod sampling;

pub use bounds::{
    containment_check, input_bounds, input_value, output_bounds, output_sensitivity, output_value,
    over_approximate, required_vertices, select_vertices_row, state_bounds, state_value,
    BoundsSeries, ContainmentReport, ReachSeries, RowVertices, Violation,
};
pub use falsify::{falsify_bounds, FalsifyReport};
pub use flow::{augmented_flow, flow_only, AugState, SensX, SensitivityModel, TrajectoryBundle};
pub use sampling::latin_hypercube;

use crate::lqr::LqrError;
use crate::robot::ParamCoords;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReachError {
    #[error("trajectory integration diverged at t = {t} s (|y| = {norm:.3e})")]
    IntegrationFailure { t: f64, norm: f64 },
    #[error("grids of the combined series do not match")]
    GridMismatch,
    #[error(transparent)]
    Lqr(#[from] LqrError),
}

/// Which static image of the flow a series lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    /// Joint state `x ∈ R⁶`.
    State,
    /// CoM output `y ∈ R⁴`.
    Output,
    /// Feedback input `u ∈ R⁴`.
    Input,
}

impl Space {
    pub fn rows(&self) -> usize {
        match self {
            Space::State => 6,
            Space::Output | Space::Input => 4,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Space::State => "x",
            Space::Output => "y",
            Space::Input => "u",
        }
    }
}

/// Axis-aligned parameter uncertainty box `[lo, hi] ⊂ R¹²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBox {
    pub lo: ParamCoords,
    pub hi: ParamCoords,
}

impl ParamBox {
    pub fn new(lo: ParamCoords, hi: ParamCoords) -> Result<Self, String> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), String> {
        const NAMES: [&str; 12] = [
            "m1", "m2", "m3", "I1", "I2", "I3", "l1", "l2", "l3", "lc1", "lc2", "lc3",
        ];
        for i in 0..12 {
            if !(self.lo[i].is_finite() && self.hi[i].is_finite()) {
                return Err(format!("bounds for {} are not finite", NAMES[i]));
            }
            if self.lo[i] <= 0.0 {
                return Err(format!(
                    "lower bound for {} must be positive, got {}",
                    NAMES[i], self.lo[i]
                ));
            }
            if self.lo[i] > self.hi[i] {
                return Err(format!(
                    "lower bound {} exceeds upper bound {} for {}",
                    self.lo[i], self.hi[i], NAMES[i]
                ));
            }
        }
        Ok(())
    }

    /// Box vertex addressed by a 12-bit signature (bit j set = coordinate j
    /// at its upper bound).
    pub fn vertex(&self, signature: u16) -> ParamCoords {
        ParamCoords::from_fn(|j, _| {
            if signature >> j & 1 == 1 {
                self.hi[j]
            } else {
                self.lo[j]
            }
        })
    }

    pub fn center(&self) -> ParamCoords {
        (self.lo + self.hi) * 0.5
    }

    pub fn width(&self) -> ParamCoords {
        self.hi - self.lo
    }

    pub fn contains(&self, p: &ParamCoords) -> bool {
        (0..12).all(|j| p[j] >= self.lo[j] - 1e-12 && p[j] <= self.hi[j] + 1e-12)
    }

    /// Clamps a point into the box (used by the falsification search).
    pub fn clamp(&self, p: &ParamCoords) -> ParamCoords {
        ParamCoords::from_fn(|j, _| p[j].clamp(self.lo[j], self.hi[j]))
    }
}

impl Serialize for ParamBox {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = ser.serialize_struct("ParamBox", 2)?;
        st.serialize_field("lo", self.lo.as_slice())?;
        st.serialize_field("hi", self.hi.as_slice())?;
        st.end()
    }
}
