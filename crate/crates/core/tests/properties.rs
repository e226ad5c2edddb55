//! Property tests for the algebraic building blocks.

use nalgebra::{RowSVector, Vector3};
use proptest::prelude::*;
use sts_reach::allocation::{allocate, AllocationSpec};
use sts_reach::reach::{latin_hypercube, select_vertices_row, ParamBox};
use sts_reach::robot::{self, ParamCoords, ParamVector};
use sts_reach::scenario;

fn arb_params() -> impl Strategy<Value = ParamVector> {
    let b = scenario::param_box_default();
    let r = |i: usize| b.lo[i]..b.hi[i];
    (
        (r(0), r(1), r(2), r(3)),
        (r(4), r(5), r(6), r(7)),
        (r(8), r(9), r(10), r(11)),
    )
        .prop_map(
            |((m1, m2, m3, i1), (i2, i3, l1, l2), (l3, lc1, lc2, lc3))| ParamVector {
                m1,
                m2,
                m3,
                i1,
                i2,
                i3,
                l1,
                l2,
                l3,
                lc1,
                lc2,
                lc3,
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn allocation_satisfies_balance_and_box(
        p in arb_params(),
        th1 in -3.0_f64..3.0,
        th2 in -3.0_f64..3.0,
        th3 in -3.0_f64..3.0,
        td in -2.0_f64..2.0,
        tdd in -4.0_f64..4.0,
        fy_floor in -50.0_f64..0.0,
    ) {
        let theta = Vector3::new(th1, th2, th3);
        let thetadot = Vector3::new(td, -td, 0.5 * td);
        let thetaddot = Vector3::new(tdd, 0.3 * tdd, -0.5 * tdd);
        let mut spec = AllocationSpec::unconstrained([1.0, 1.0, 10.0, 1.0]);
        spec.lower[3] = Some(fy_floor);
        if let Ok(u) = allocate(&theta, &thetadot, &thetaddot, &p, &spec) {
            let a = robot::generalized_force_matrix(&theta, &p);
            let b = robot::mass_matrix(&theta, &p) * thetaddot
                + robot::coriolis_gravity(&theta, &thetadot, &p);
            let residual = (a * u - b).abs().max();
            prop_assert!(residual <= 1e-8 * b.abs().max().max(1.0));
            prop_assert!(u[3] >= fy_floor - 1e-12);
        }
    }

    #[test]
    fn vertex_rule_produces_widening_compensation(
        lo_v in proptest::collection::vec(-5.0_f64..5.0, 12),
        width in proptest::collection::vec(0.0_f64..4.0, 12),
    ) {
        let lo = RowSVector::<f64, 12>::from_fn(|_, j| lo_v[j]);
        let hi = RowSVector::<f64, 12>::from_fn(|_, j| lo_v[j] + width[j]);
        let rv = select_vertices_row(&lo, &hi);
        let b = scenario::param_box_default();
        // the compensation never narrows the interval
        let comp = (rv.d * (b.vertex(rv.lo_sig) - b.vertex(rv.hi_sig)))[0];
        prop_assert!(comp >= -1e-12);
        for j in 0..12 {
            // d vanishes exactly on sign-stable entries
            let sign_stable = lo[j] >= 0.0 || hi[j] <= 0.0;
            let center = 0.5 * (lo[j] + hi[j]);
            if sign_stable && center >= 0.0 {
                prop_assert_eq!(rv.d[j], 0.0);
            }
            if !sign_stable {
                prop_assert!(rv.d[j] == lo[j].min(0.0) || rv.d[j] == hi[j].max(0.0));
            }
            // opposite vertex assignment per the center sign
            if center >= 0.0 {
                prop_assert_eq!(rv.hi_sig >> j & 1, 1);
                prop_assert_eq!(rv.lo_sig >> j & 1, 0);
            } else {
                prop_assert_eq!(rv.hi_sig >> j & 1, 0);
                prop_assert_eq!(rv.lo_sig >> j & 1, 1);
            }
        }
    }

    #[test]
    fn lhs_is_stratified_for_any_count(n in 1usize..40, seed in any::<u64>()) {
        let b = scenario::param_box_default();
        let pts = latin_hypercube(n, &b, seed);
        prop_assert_eq!(pts.len(), n);
        for j in 0..12 {
            let mut seen = vec![false; n];
            for p in &pts {
                prop_assert!(b.lo[j] <= p[j] && p[j] <= b.hi[j]);
                let bin = (((p[j] - b.lo[j]) / (b.hi[j] - b.lo[j])) * n as f64) as usize;
                let bin = bin.min(n - 1);
                prop_assert!(!seen[bin]);
                seen[bin] = true;
            }
        }
    }

    #[test]
    fn box_vertex_roundtrip(sig in 0u16..4096) {
        let b = scenario::param_box_default();
        let v = b.vertex(sig);
        prop_assert!(b.contains(&v));
        let mut recovered = 0u16;
        for j in 0..12 {
            if v[j] == b.hi[j] {
                recovered |= 1 << j;
            }
        }
        prop_assert_eq!(recovered, sig);
    }

    #[test]
    fn forward_dynamics_residual_random(
        p in arb_params(),
        x_seed in proptest::collection::vec(-3.0_f64..3.0, 6),
        u_seed in proptest::collection::vec(-80.0_f64..80.0, 4),
    ) {
        let x = sts_reach::robot::State::from_fn(|i, _| x_seed[i]);
        let u = sts_reach::robot::Input::from_fn(|i, _| u_seed[i]);
        let f = robot::forward_dynamics(&x, &p, &u).unwrap();
        prop_assert_eq!(f.fixed_rows::<3>(0).into_owned(), x.fixed_rows::<3>(3).into_owned());
        let theta = x.fixed_rows::<3>(0).into_owned();
        let thetadot = x.fixed_rows::<3>(3).into_owned();
        let residual = robot::mass_matrix(&theta, &p) * f.fixed_rows::<3>(3)
            + robot::coriolis_gravity(&theta, &thetadot, &p)
            - robot::generalized_force_matrix(&theta, &p) * u;
        prop_assert!(residual.abs().max() <= 1e-9 * u.abs().max().max(1.0));
    }
}

#[test]
fn param_box_contains_its_samples() {
    let b = ParamBox::new(ParamCoords::repeat(1.0), ParamCoords::repeat(2.0)).unwrap();
    for p in latin_hypercube(17, &b, 5) {
        assert!(b.contains(&p));
    }
}
