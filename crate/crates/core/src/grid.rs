//! Uniform time grid shared by schedules, bundles and reach boxes.

use serde::{Deserialize, Serialize};

/// Uniformly spaced sample times `t_k = t0 + k·dt`, `k = 0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub t0: f64,
    pub dt: f64,
    /// Number of samples (intervals + 1).
    pub len: usize,
}

impl Grid {
    /// Grid over `[t0, tf]` sampled at `hz`; `tf - t0` must be an integer
    /// number of periods (within roundoff).
    pub fn from_span(t0: f64, tf: f64, hz: f64) -> Result<Self, String> {
        if !(hz > 0.0 && tf > t0) {
            return Err(format!("invalid grid span [{t0}, {tf}] at {hz} Hz"));
        }
        let steps_f = (tf - t0) * hz;
        let steps = steps_f.round();
        if (steps_f - steps).abs() > 1e-9 * steps_f.max(1.0) {
            return Err(format!(
                "horizon {} s is not a whole number of {} Hz periods",
                tf - t0,
                hz
            ));
        }
        if steps < 1.0 {
            return Err(format!(
                "horizon {} s is shorter than one {} Hz period",
                tf - t0,
                hz
            ));
        }
        Ok(Grid {
            t0,
            dt: 1.0 / hz,
            len: steps as usize + 1,
        })
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn tf(&self) -> f64 {
        self.time(self.len - 1)
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(|k| self.time(k))
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t0 - 1e-12 && t <= self.tf() + 1e-12
    }

    /// Interpolation locator: index `k` of the interval containing `t` and the
    /// fractional position `a ∈ [0, 1]` inside it. Clamps to the grid span.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let s = (t - self.t0) / self.dt;
        let k = (s.floor() as isize).clamp(0, self.len as isize - 2) as usize;
        let a = (s - k as f64).clamp(0.0, 1.0);
        (k, a)
    }
}

/// Linear interpolation between grid samples of any nalgebra-like value.
pub fn lerp<T>(grid: &Grid, values: &[T], t: f64) -> T
where
    T: Clone + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    debug_assert_eq!(values.len(), grid.len);
    let (k, a) = grid.locate(t);
    values[k].clone() * (1.0 - a) + values[k + 1].clone() * a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_and_samples() {
        let g = Grid::from_span(0.0, 3.5, 100.0).unwrap();
        assert_eq!(g.len, 351);
        assert_eq!(g.time(0), 0.0);
        assert!((g.tf() - 3.5).abs() < 1e-12);

        let g = Grid::from_span(0.0, 3.5, 20.0).unwrap();
        assert_eq!(g.len, 71);
    }

    #[test]
    fn rejects_fractional_step_count() {
        assert!(Grid::from_span(0.0, 3.51234, 7.0).is_err());
        assert!(Grid::from_span(0.0, 1e-12, 100.0).is_err());
    }

    #[test]
    fn locate_clamps() {
        let g = Grid::from_span(0.0, 1.0, 10.0).unwrap();
        assert_eq!(g.locate(-0.5), (0, 0.0));
        let (k, a) = g.locate(2.0);
        assert_eq!(k, g.len - 2);
        assert_eq!(a, 1.0);
        let (k, a) = g.locate(0.55);
        assert_eq!(k, 5);
        assert!((a - 0.5).abs() < 1e-12);
    }
}
