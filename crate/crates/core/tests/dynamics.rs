use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use srb_core::cocycle::{build_basis_field, lyapunov_unstable_sum, transported_frames, unstable_jacobian};
use srb_core::manifolds::{compute_disc_chain, invariance_residual, MAX_SLOPE};
use srb_core::normed_linalg::{det_between_bases, NormKind};
use srb_core::par::Execution;
use srb_core::qmc::{radical_inverse, Halton};
use srb_core::system::*;

fn systems() -> Vec<SharedSystem> {
    let none = BTreeMap::new();
    vec![
        builtin_system("linear_hyperbolic", &none, None).unwrap(),
        builtin_system("solenoid", &none, None).unwrap(),
        builtin_system("solenoid", &none, Some(NormKind::P { p: 2.0 })).unwrap(),
        builtin_system("solenoid_neutral", &none, None).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn derivative_matches_central_differences(which in 0usize..4, unit in prop::collection::vec(0.0f64..1.0, 4)) {
        let sys = &systems()[which];
        let x = sys.sample_trapping_region(&unit[..sys.dim()]);
        let h = 1e-6;
        let df = sys.derivative(&x);
        let fd = DMatrix::from_fn(sys.dim(), sys.dim(), |i, j| {
            let mut e = DVector::zeros(sys.dim());
            e[j] = h;
            let plus = sys.map(&(&x + &e));
            let minus = sys.map(&(&x - &e));
            sys.displacement(&minus, &plus)[i] / (2.0 * h)
        });
        prop_assert!((&df - &fd).amax() < 1e-6, "Df {df} vs FD {fd}");
    }

    #[test]
    fn trapping_region_is_forward_invariant(which in 0usize..4, unit in prop::collection::vec(0.0f64..1.0, 4)) {
        let sys = &systems()[which];
        let x = sys.sample_trapping_region(&unit[..sys.dim()]);
        let orbit = forward_orbit(&**sys, &x, 50);
        prop_assert!(orbit.is_ok());
    }

    #[test]
    fn displacement_is_antisymmetric(unit in prop::collection::vec(0.0f64..1.0, 6)) {
        let sys = &systems()[1];
        let a = sys.sample_trapping_region(&unit[..3]);
        let b = sys.sample_trapping_region(&unit[3..]);
        let ab = sys.displacement(&a, &b);
        let ba = sys.displacement(&b, &a);
        prop_assert!((ab + ba).amax() < 1e-12 || (sys.distance(&a, &b) - TWO_PI / 2.0).abs() < 1e-9);
    }
}

#[test]
fn unstable_cocycle_is_multiplicative() {
    let sys = Solenoid::new(0.25, None, None).unwrap();
    let sample = sample_attractor(&sys, 64, 100, 64, 5, Execution::Sequential).unwrap();
    let split = compute_splitting(&sys, &sample, 40, Execution::Sequential).unwrap();
    let field = build_basis_field(&sys, &split, 0.1, 1.0, Execution::Sequential).unwrap();
    for orbit in sample.orbits.iter().take(8) {
        let pts = forward_orbit(&sys, orbit.point(), 6).unwrap();
        let eu = unstable_frames_along(&sys, &orbit.points).pop().unwrap();
        let frames = transported_frames(&sys, &pts, &eu).unwrap();
        let product: f64 = frames.windows(2).map(|w| unstable_jacobian(&sys, &field, &w[0], &w[1]).unwrap()).product();
        let mut dfn = DMatrix::identity(3, 3);
        for p in &pts[..6] {
            dfn = sys.derivative(p) * dfn;
        }
        let eta0 = field.basis_at(&sys, &frames[0]).unwrap();
        let eta6 = field.basis_at(&sys, &frames[6]).unwrap();
        let direct = det_between_bases(&dfn, &eta0, &eta6).unwrap().abs();
        assert!((product - direct).abs() <= 1e-9 * direct, "{product} vs {direct}");
    }
}

#[test]
fn solenoid_unstable_exponent_is_log_two() {
    let sys = Solenoid::new(0.25, None, None).unwrap();
    let sample = sample_attractor(&sys, 600, 100, 64, 2, Execution::Sequential).unwrap();
    let split = compute_splitting(&sys, &sample, 40, Execution::Sequential).unwrap();
    let field = build_basis_field(&sys, &split, 0.1, 1.0, Execution::Sequential).unwrap();
    let rate = lyapunov_unstable_sum(&sys, &field, &sample.orbits[3], 100).unwrap();
    assert!((rate - 2f64.ln()).abs() < 0.05, "rate {rate}");
}

#[test]
fn solenoid_disc_chain_invariants() {
    let sys = Solenoid::new(0.25, None, None).unwrap();
    let sample = sample_attractor(&sys, 4, 100, 64, 9, Execution::Sequential).unwrap();
    let delta = 0.75 * std::f64::consts::PI;
    for orbit in &sample.orbits {
        let chain = compute_disc_chain(&sys, orbit, delta, 1e-10, 10).unwrap();
        for d in &chain.discs {
            assert!(d.max_slope(sys.space()) <= MAX_SLOPE);
        }
        for j in 0..10 {
            let r = invariance_residual(&sys, &chain.discs[j + 1], &chain.discs[j]).unwrap();
            assert!(r < 1e-6, "residual {r} at depth {j}");
        }
        // pulled-back points return to the starting point under f^n
        let xi = DVector::from_element(1, 0.3 * delta);
        let seg = chain.orbit_of(&sys, &xi, 10).unwrap();
        let y = chain.disc().point(&sys, &xi);
        let back = forward_orbit(&sys, &seg.points[0], 10).unwrap();
        assert!(sys.distance(back.last().unwrap(), &y) < 1e-6);
    }
}

#[test]
fn radical_inverse_oracle() {
    assert_eq!(radical_inverse(1, 2), 0.5);
    assert_eq!(radical_inverse(3, 2), 0.75);
    assert!((radical_inverse(5, 3) - 7.0 / 9.0).abs() < 1e-15);
    let a = Halton::new(3, 7, "stage");
    let b = Halton::new(3, 7, "stage");
    assert_eq!(a.point(42), b.point(42));
    assert_ne!(a.point(42), Halton::new(3, 7, "other").point(42));
}
