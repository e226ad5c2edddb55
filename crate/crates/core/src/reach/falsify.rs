//! Falsification of sampled sensitivity envelopes.
//!
//! At a fixed time the cost
//!
//! ```text
//!     J_F = min_p min_{i,j} ( width_ij/2 − |S_ij(t; p) − center_ij| )
//! ```
//!
//! is negative exactly when some sensitivity entry escapes its envelope.
//! A multistart Nelder-Mead search (derivative-free, clamped to the box)
//! hunts for negative values; every hit widens the violated entries and the
//! search restarts, until `J_F ≥ 0` or the evaluation budget runs out. Local
//! optimization cannot certify the envelopes, it can only enlarge them.

use super::{BoundsSeries, ParamBox};
use crate::robot::ParamCoords;
use nalgebra::SMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of the falsification pass at one grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct FalsifyReport {
    /// Best (most negative) cost seen in the final sweep; ≥ 0 means no
    /// violation was found.
    pub j_f: f64,
    /// Sensitivity evaluations spent.
    pub evaluations: usize,
    /// Number of envelope entries widened.
    pub expansions: usize,
    /// True when the budget ran out before a violation-free sweep.
    pub budget_exhausted: bool,
}

/// Envelope-violation cost of one sensitivity sample against the bounds.
fn cost<const R: usize>(
    s: &SMatrix<f64, R, 12>,
    lo: &SMatrix<f64, R, 12>,
    hi: &SMatrix<f64, R, 12>,
) -> f64 {
    let mut worst = f64::INFINITY;
    for i in 0..R {
        for j in 0..12 {
            let half_width = 0.5 * (hi[(i, j)] - lo[(i, j)]);
            let center = 0.5 * (hi[(i, j)] + lo[(i, j)]);
            worst = worst.min(half_width - (s[(i, j)] - center).abs());
        }
    }
    worst
}

/// Runs the falsification loop on the envelopes at grid index `t_idx`.
///
/// `sensitivity(p)` must evaluate the mapped sensitivity matrix at that time
/// for an arbitrary parameter in the box (`None` when the trajectory solve
/// fails, which counts against the budget and is treated as no violation).
pub fn falsify_bounds<const R: usize>(
    bounds: &mut BoundsSeries<R>,
    t_idx: usize,
    pbox: &ParamBox,
    sensitivity: &impl Fn(&ParamCoords) -> Option<SMatrix<f64, R, 12>>,
    budget: usize,
    multistarts: usize,
    seed: u64,
) -> FalsifyReport {
    let mut report = FalsifyReport {
        j_f: f64::INFINITY,
        evaluations: 0,
        expansions: 0,
        budget_exhausted: false,
    };
    if budget == 0 {
        report.j_f = 0.0;
        return report;
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (t_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));

    'sweeps: loop {
        let mut sweep_best = f64::INFINITY;
        for _ in 0..multistarts.max(1) {
            let start = ParamCoords::from_fn(|j, _| rng.gen_range(pbox.lo[j]..=pbox.hi[j]));
            let eval_budget = budget.saturating_sub(report.evaluations);
            if eval_budget == 0 {
                report.budget_exhausted = true;
                report.j_f = sweep_best.min(report.j_f);
                return report;
            }
            let mut evals = 0usize;
            let mut f = |p: &ParamCoords| -> f64 {
                evals += 1;
                match sensitivity(p) {
                    Some(s) => cost(&s, &bounds.lo[t_idx], &bounds.hi[t_idx]),
                    None => f64::INFINITY,
                }
            };
            let (p_best, j_best) = nelder_mead(&mut f, &start, pbox, eval_budget);
            report.evaluations += evals;
            sweep_best = sweep_best.min(j_best);

            if j_best < 0.0 {
                // widen every violated entry to include the witness value
                if let Some(s) = sensitivity(&p_best) {
                    report.evaluations += 1;
                    for i in 0..R {
                        for j in 0..12 {
                            let v = s[(i, j)];
                            if v < bounds.lo[t_idx][(i, j)] || v > bounds.hi[t_idx][(i, j)] {
                                bounds.absorb(t_idx, i, j, v);
                                report.expansions += 1;
                            }
                        }
                    }
                }
                if report.evaluations >= budget {
                    report.budget_exhausted = true;
                    report.j_f = sweep_best;
                    return report;
                }
                continue 'sweeps; // re-sweep against the widened envelopes
            }
        }
        report.j_f = sweep_best;
        return report;
    }
}

/// Nelder-Mead simplex descent clamped to the box. Returns the best point
/// and value found within the evaluation budget.
fn nelder_mead(
    f: &mut impl FnMut(&ParamCoords) -> f64,
    start: &ParamCoords,
    pbox: &ParamBox,
    budget: usize,
) -> (ParamCoords, f64) {
    const ALPHA: f64 = 1.0; // reflection
    const GAMMA: f64 = 2.0; // expansion
    const RHO: f64 = 0.5; // contraction
    const SIGMA: f64 = 0.5; // shrink

    let n = 12;
    let mut evals = 0usize;
    let spent = |e: &mut usize| {
        *e += 1;
        *e >= budget
    };

    // simplex seeded around the start with 5 %-of-box steps
    let mut simplex: Vec<(ParamCoords, f64)> = Vec::with_capacity(n + 1);
    let v0 = f(start);
    if spent(&mut evals) {
        return (*start, v0);
    }
    simplex.push((*start, v0));
    for j in 0..n {
        let mut p = *start;
        p[j] += 0.05 * (pbox.hi[j] - pbox.lo[j]);
        let p = pbox.clamp(&p);
        let v = f(&p);
        simplex.push((p, v));
        if spent(&mut evals) {
            let best = simplex
                .iter()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("nonempty simplex");
            return *best;
        }
    }

    for _ in 0..10_000 {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[0].1 < 0.0 {
            break; // violation found, no need to polish
        }
        let centroid = {
            let mut c = ParamCoords::zeros();
            for (p, _) in simplex.iter().take(n) {
                c += p;
            }
            c / n as f64
        };
        let worst = simplex[n];
        let reflected = pbox.clamp(&(centroid + (centroid - worst.0) * ALPHA));
        let vr = f(&reflected);
        if spent(&mut evals) {
            simplex[n] = (reflected, vr);
            break;
        }
        if vr < simplex[0].1 {
            let expanded = pbox.clamp(&(centroid + (centroid - worst.0) * GAMMA));
            let ve = f(&expanded);
            simplex[n] = if ve < vr {
                (expanded, ve)
            } else {
                (reflected, vr)
            };
            if spent(&mut evals) {
                break;
            }
        } else if vr < simplex[n - 1].1 {
            simplex[n] = (reflected, vr);
        } else {
            let contracted = pbox.clamp(&(centroid + (worst.0 - centroid) * RHO));
            let vc = f(&contracted);
            if spent(&mut evals) {
                simplex[n] = (contracted, vc);
                break;
            }
            if vc < worst.1 {
                simplex[n] = (contracted, vc);
            } else {
                let best = simplex[0].0;
                for item in simplex.iter_mut().skip(1) {
                    let p = pbox.clamp(&(best + (item.0 - best) * SIGMA));
                    let v = f(&p);
                    *item = (p, v);
                    if spent(&mut evals) {
                        break;
                    }
                }
                if evals >= budget {
                    break;
                }
            }
        }
        // converged simplex: all vertices within noise of each other
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if (simplex[n].1 - simplex[0].1).abs() < 1e-12 * simplex[0].1.abs().max(1.0) {
            break;
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}
