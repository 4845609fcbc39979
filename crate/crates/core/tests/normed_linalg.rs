use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srb_core::normed_linalg::*;

fn space(d: usize, p_index: usize) -> NormedSpace {
    match p_index {
        0 => NormedSpace::lp(d, 1.0).unwrap(),
        1 => NormedSpace::euclidean(d),
        2 => NormedSpace::lp(d, 4.0).unwrap(),
        _ => NormedSpace::sup(d),
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// A unit basis of the column span of `span` mixed by a random invertible matrix.
fn basis_of(rng: &mut ChaCha8Rng, span: &DMatrix<f64>, s: &NormedSpace) -> Option<UnitBasis> {
    let k = span.ncols();
    let mix = random_matrix(rng, k, k) + DMatrix::identity(k, k) * 2.0;
    let m = span * mix;
    let cols: Vec<DVector<f64>> = m.column_iter().map(|c| c.into_owned()).collect();
    UnitBasis::normalized(&cols, s).ok().filter(|b| b.alpha() > 0.05)
}

/// A linear map of the ambient space sending span(from) into span(to).
fn map_between(rng: &mut ChaCha8Rng, from: &UnitBasis, to: &UnitBasis) -> DMatrix<f64> {
    let k = from.dim();
    let a = random_matrix(rng, k, k) + DMatrix::identity(k, k);
    let pinv = from.matrix().clone().pseudo_inverse(1e-12).unwrap();
    to.matrix() * a * pinv
}

/// Like [`map_between`] with singular values of the coordinate matrix in `[1/2, 2]`.
fn conditioned_map(rng: &mut ChaCha8Rng, from: &UnitBasis, to: &UnitBasis) -> DMatrix<f64> {
    let k = from.dim();
    let q1 = random_matrix(rng, k, k).qr().q();
    let q2 = random_matrix(rng, k, k).qr().q();
    let s = DVector::from_fn(k, |_, _| rng.gen_range(0.5..2.0));
    let pinv = from.matrix().clone().pseudo_inverse(1e-12).unwrap();
    to.matrix() * q1 * DMatrix::from_diagonal(&s) * q2 * pinv
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn product_formula(seed in any::<u64>(), k in 1usize..=6, extra in 0usize..=2, p in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = k + extra;
        let s = space(d, p);
        let spans: Vec<DMatrix<f64>> = (0..3).map(|_| random_matrix(&mut rng, d, k)).collect();
        let bases: Option<Vec<UnitBasis>> = spans.iter().map(|m| basis_of(&mut rng, m, &s)).collect();
        prop_assume!(bases.is_some());
        let b = bases.unwrap();
        let t = conditioned_map(&mut rng, &b[0], &b[1]);
        let sm = conditioned_map(&mut rng, &b[1], &b[2]);
        let lhs = det_between_bases(&(&sm * &t), &b[0], &b[2]).unwrap();
        let rhs = det_between_bases(&sm, &b[1], &b[2]).unwrap() * det_between_bases(&t, &b[0], &b[1]).unwrap();
        prop_assert!(rel_err(lhs, rhs) <= 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn norm_bound_holds(seed in any::<u64>(), k in 1usize..=4, p in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = k + 1;
        let s = space(d, p);
        let mv = random_matrix(&mut rng, d, k);
        let v = basis_of(&mut rng, &mv, &s);
        let mw = random_matrix(&mut rng, d, k);
        let w = basis_of(&mut rng, &mw, &s);
        prop_assume!(v.is_some() && w.is_some());
        let (v, w) = (v.unwrap(), w.unwrap());
        let t = map_between(&mut rng, &v, &w);
        let det = det_between_bases(&t, &v, &w).unwrap();
        let b = det_bounds(&t, &v, &w).unwrap();
        prop_assert!(det.abs() <= b.norm_bound * (1.0 + 1e-9), "|det| {} > {}", det.abs(), b.norm_bound);
    }

    #[test]
    fn lipschitz_inequality(seed in any::<u64>(), k in 1usize..=4, p in 0usize..4, scale in 1e-6f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = k + 1;
        let s = space(d, p);
        let mv = random_matrix(&mut rng, d, k);
        let v = basis_of(&mut rng, &mv, &s);
        let mw = random_matrix(&mut rng, d, k);
        let w = basis_of(&mut rng, &mw, &s);
        prop_assume!(v.is_some() && w.is_some());
        let (v, w) = (v.unwrap(), w.unwrap());
        let t1 = map_between(&mut rng, &v, &w);
        let t2 = &t1 + map_between(&mut rng, &v, &w) * scale;
        let diff = (det_between_bases(&t1, &v, &w).unwrap() - det_between_bases(&t2, &v, &w).unwrap()).abs();
        let alpha = v.alpha().min(w.alpha());
        let coeff = lipschitz_coefficient(k, restricted_norm(&t1, &v).max(restricted_norm(&t2, &v)), alpha);
        let dist = restricted_norm(&(&t1 - &t2), &v);
        prop_assert!(diff <= coeff * dist * (1.0 + 1e-3) + 1e-13, "{diff} > {coeff}·{dist}");
    }

    #[test]
    fn measure_ratios_are_reciprocal(seed in any::<u64>(), k in 1usize..=5, p in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = k + 1;
        let s = space(d, p);
        let span = random_matrix(&mut rng, d, k);
        let v = basis_of(&mut rng, &span, &s);
        let w = basis_of(&mut rng, &span, &s);
        prop_assume!(v.is_some() && w.is_some());
        let (v, w) = (v.unwrap(), w.unwrap());
        let kvw = measure_ratio(&v, &w).unwrap();
        let kwv = measure_ratio(&w, &v).unwrap();
        prop_assert!((kvw * kwv - 1.0).abs() < 1e-10);
        prop_assert!(kvw <= measure_ratio_bound(k, v.alpha().min(w.alpha())) * (1.0 + 1e-9));
    }

    #[test]
    fn basis_perturbation_bound(seed in any::<u64>(), k in 1usize..=4, p in 0usize..4, size in 1e-8f64..1e-2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = k + 2;
        let s = space(d, p);
        let mv = random_matrix(&mut rng, d, k);
        let v = basis_of(&mut rng, &mv, &s);
        prop_assume!(v.is_some());
        let v = v.unwrap();
        let perturbed: Vec<DVector<f64>> = (0..k)
            .map(|i| v.vector(i) + v.matrix() * DVector::from_fn(k, |_, _| rng.gen_range(-size..size)))
            .collect();
        let u = UnitBasis::normalized(&perturbed, &s);
        prop_assume!(u.is_ok());
        let change = basis_change_det(&v, &u.unwrap()).unwrap();
        prop_assert!(change.within_bound(), "{change:?}");
        prop_assert!(change.measure_within_bound());
    }

    #[test]
    fn distance_to_span_is_a_seminorm_bound(seed in any::<u64>(), d in 2usize..=5, p in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = space(d, p);
        let v = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let w: Vec<DVector<f64>> = (0..d - 1).map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let dist = dist_to_span(&v, &w, &s).unwrap();
        prop_assert!(dist <= s.norm(&v) + 1e-12);
        for c in [-0.7, 0.3, 1.1] {
            let candidate = &v - &w[0] * c;
            prop_assert!(dist <= s.norm(&candidate) + 1e-9);
        }
    }
}

#[test]
fn monte_carlo_volume_matches_measure_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = NormedSpace::lp(3, 4.0).unwrap();
    let span = random_matrix(&mut rng, 3, 2);
    let v = basis_of(&mut rng, &span, &s).unwrap();
    let w = basis_of(&mut rng, &span, &s).unwrap();
    let k = measure_ratio(&v, &w).unwrap();
    // A = L_V([0,1]²); μ_W(A) is the Lebesgue area of its W-coordinates.
    let corners: Vec<DVector<f64>> =
        [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]].iter().map(|c| w.coordinates(&v.embed(&DVector::from_row_slice(c))).0).collect();
    let lo: Vec<f64> = (0..2).map(|j| corners.iter().map(|c| c[j]).fold(f64::INFINITY, f64::min)).collect();
    let hi: Vec<f64> = (0..2).map(|j| corners.iter().map(|c| c[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let n = 200_000;
    let mut hits = 0usize;
    for _ in 0..n {
        let c = DVector::from_fn(2, |j, _| rng.gen_range(lo[j]..hi[j]));
        let (cv, _) = v.coordinates(&w.embed(&c));
        if cv.iter().all(|x| (0.0..=1.0).contains(x)) {
            hits += 1;
        }
    }
    let box_area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
    let frac = hits as f64 / n as f64;
    let estimate = box_area * frac;
    let sigma = box_area * (frac * (1.0 - frac) / n as f64).sqrt();
    assert!((estimate - k).abs() <= 3.0 * sigma, "MC {estimate} ± {sigma} vs K {k}");
}
