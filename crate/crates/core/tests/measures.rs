use proptest::prelude::*;
use srb_core::manifolds::compute_disc_chain;
use srb_core::par::Execution;
use srb_core::srb::*;
use srb_core::system::{sample_attractor, LinearHyperbolic, Solenoid, TWO_PI};
use srb_core::weakstar::*;

fn square() -> Domain {
    Domain::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![false, true]).unwrap()
}

fn cloud() -> impl Strategy<Value = PointMeasure> {
    prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.1f64..1.0), 1..40).prop_map(|v| {
        let points = v.iter().flat_map(|(x, y, _)| [*x, *y]).collect();
        let weights = v.iter().map(|t| t.2).collect();
        PointMeasure::new(2, points, weights).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn levy_prokhorov_is_a_bounded_symmetric_distance(a in cloud(), b in cloud()) {
        let d = square();
        let ab = levy_prokhorov(&a, &b, &d, 64).unwrap().distance;
        let ba = levy_prokhorov(&b, &a, &d, 64).unwrap().distance;
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(levy_prokhorov(&a, &a, &d, 64).unwrap().distance, 0.0);
    }

    #[test]
    fn box_mass_is_monotone_in_growth(a in cloud(), lo in 0.0f64..0.5, w in 0.05f64..0.5, g in 0.0f64..0.1) {
        let d = square();
        let set = BoxSet::single(vec![(lo, lo + w), (0.2, 0.6)]);
        let inner = set.mass(&a, &d, -g);
        let mid = set.mass(&a, &d, 0.0);
        let outer = set.mass(&a, &d, g);
        prop_assert!(inner <= mid + 1e-15 && mid <= outer + 1e-15);
        prop_assert!(outer <= 1.0 + 1e-12);
    }
}

fn linear_setup() -> (LinearHyperbolic, srb_core::manifolds::UnstableDisc) {
    let sys = LinearHyperbolic::new(2.0, 0.5, None).unwrap();
    let sample = sample_attractor(&sys, 1, 80, 40, 5, Execution::Sequential).unwrap();
    let disc = compute_disc_chain(&sys, &sample.orbits[0], 3.0, 1e-12, 0).unwrap().disc().clone();
    (sys, disc)
}

fn leak() -> LeakModel {
    LeakModel { delta: 3.0, gamma0: 1.0, lambda0: 2f64.ln(), eps0: 0.001 }
}

#[test]
fn cesaro_average_is_independent_of_execution_mode() {
    let (sys, disc) = linear_setup();
    let a = cesaro_average(&sys, None, &disc, &leak(), 10, 5000, 4, Execution::Sequential).unwrap();
    let b = cesaro_average(&sys, None, &disc, &leak(), 10, 5000, 4, Execution::Parallel).unwrap();
    assert_eq!(a.measure, b.measure);
    assert_eq!(a.leaked_by_generation, b.leaked_by_generation);
}

#[test]
fn truncation_view_matches_truncated_average() {
    let (sys, disc) = linear_setup();
    let avg = cesaro_average(&sys, None, &disc, &leak(), 12, 6000, 4, Execution::Sequential).unwrap();
    let short = avg.truncated(6).unwrap();
    let view = Truncation::new(&avg.measure, 6);
    assert_eq!(view.len(), short.measure.len());
    let d = Domain::new(vec![0.0, -1.0], vec![TWO_PI, 1.0], vec![true, false]).unwrap();
    let lp = levy_prokhorov(&view, &short.measure, &d, 64).unwrap();
    assert!(lp.distance < 1e-12);
}

#[test]
fn linear_cesaro_marginal_is_uniform_on_the_circle() {
    let (sys, disc) = linear_setup();
    let avg = cesaro_average(&sys, None, &disc, &leak(), 20, 200_000, 1, Execution::Parallel).unwrap();
    let tv = marginal_tv_uniform(&avg.measure, 0, 0.0, TWO_PI, 64);
    assert!(tv < 0.02, "tv {tv}");
    // the stable coordinate collapses onto the circle
    let late = Truncation::new(&avg.measure, 20);
    let spread = (0..late.len()).map(|i| late.coords(i)[1].abs()).fold(0.0, f64::max);
    assert!(spread <= 1.0);
}

#[test]
fn solenoid_leak_profile_decays_at_the_unstable_rate() {
    let sys = Solenoid::new(0.25, None, None).unwrap();
    let sample = sample_attractor(&sys, 1, 100, 40, 1, Execution::Sequential).unwrap();
    let delta = 0.75 * std::f64::consts::PI;
    let disc = compute_disc_chain(&sys, &sample.orbits[0], delta, 1e-10, 0).unwrap().disc().clone();
    let model = LeakModel { delta, gamma0: 1.0, lambda0: 2f64.ln(), eps0: 0.001 };
    let seed = seed_measure(&sys, &disc, 200_000, 1, Execution::Parallel).unwrap();
    let profile = leak_profile(&seed, &model, 12);
    assert!(profile.windows(2).all(|w| w[1] <= w[0]));
    let fit = fit_leak_rate(&profile, 1000.0 / 200_000.0);
    assert!(fit.rate + 2.0 * fit.rate_stderr >= model.lambda0 - model.eps0, "{fit:?}");
}
