//! Piecewise-continuous unit bases of the unstable fibres, the unstable
//! Jacobian `J^u` and bounded-distortion estimates along backward orbits.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::manifolds::DiscChain;
use crate::normed_linalg::{det_between_bases, dist_to_column_span, make_unit_basis, maximize_over_directions, operator_norm, UnitBasis};
use crate::par::{self, pairwise_sum, Execution};
use crate::system::{
    center_stable_frame, normalize_columns, unstable_frames_along, DynamicalSystem, LocalFrame, OrbitSegment, SplittingField,
};

/// Products of Jacobian ratios beyond this are treated as broken inputs.
pub const DISTORTION_LIMIT: f64 = 1e6;
const MAX_REFINEMENTS: usize = 4;

#[derive(Clone, Debug)]
struct Chart {
    anchor: DVector<f64>,
    /// Reference unit basis of `E^u` at the anchor.
    reference: DMatrix<f64>,
}

/// Unit bases `η_y` of `E^u_y`, continuous inside each nearest-anchor chart.
#[derive(Clone, Debug)]
pub struct BasisField {
    charts: Vec<Chart>,
    pub radius: f64,
    pub epsilon: f64,
    pub refinements: usize,
    /// Smallest `dist(v_i, span{v_j}_{j<i})` observed on the sample.
    pub min_separation: f64,
    /// Smallest separation constant `α` observed on the sample.
    pub min_alpha: f64,
    /// Largest observed `|η_y − η_z| / |y − z|` within a chart.
    pub lipschitz: f64,
}

/// `((1−ε)/(2−ε))^{k−1}(1−ε)`, the guaranteed separation constant.
pub fn alpha_lower_bound(k: usize, epsilon: f64) -> f64 {
    ((1.0 - epsilon) / (2.0 - epsilon)).powi(k as i32 - 1) * (1.0 - epsilon)
}

/// Sequential selection inside `span(frame)`: each vector maximizes its
/// distance to the span of the previous ones and is normalized.
fn reference_basis(frame: &DMatrix<f64>, sys: &dyn DynamicalSystem) -> DMatrix<f64> {
    let space = sys.space();
    let k = frame.ncols();
    let mut out = frame.clone();
    normalize_columns(&mut out, space);
    for i in 1..k {
        let prev = out.columns(0, i).into_owned();
        let (_, c) = maximize_over_directions(k, |c| {
            let v = frame * c;
            let n = space.norm(&v);
            if n == 0.0 {
                f64::NEG_INFINITY
            } else {
                dist_to_column_span(&(v / n), &prev, space)
            }
        });
        let v = frame * c;
        let n = space.norm(&v);
        out.set_column(i, &(v / n));
    }
    out
}

/// `dist(v_i, span{v_j}_{j<i})` minimized over `i ≥ 1`; `1` for `k = 1`.
fn sequential_separation(basis: &DMatrix<f64>, sys: &dyn DynamicalSystem) -> f64 {
    (1..basis.ncols())
        .map(|i| {
            let prev = basis.columns(0, i).into_owned();
            dist_to_column_span(&basis.column(i).into_owned(), &prev, sys.space())
        })
        .fold(1.0, f64::min)
}

impl BasisField {
    pub fn chart_count(&self) -> usize {
        self.charts.len()
    }

    /// Nearest anchor, lowest index on ties.
    pub fn chart_of(&self, sys: &dyn DynamicalSystem, y: &DVector<f64>) -> Result<usize> {
        let mut best = (f64::INFINITY, 0usize);
        for (i, c) in self.charts.iter().enumerate() {
            let d = sys.distance(&c.anchor, y);
            if d < best.0 {
                best = (d, i);
            }
        }
        if best.0 > 2.0 * self.radius {
            return Err(Error::Coverage(format!(
                "point at distance {:.4} from the nearest chart anchor (radius {:.4})",
                best.0, self.radius
            )));
        }
        Ok(best.1)
    }

    fn raw_basis(&self, chart: usize, frame: &LocalFrame, sys: &dyn DynamicalSystem) -> DMatrix<f64> {
        let mut b = frame.pi_u() * &self.charts[chart].reference;
        normalize_columns(&mut b, sys.space());
        b
    }

    /// `η_y` for the point of `frame`.
    pub fn basis_at(&self, sys: &dyn DynamicalSystem, frame: &LocalFrame) -> Result<UnitBasis> {
        let chart = self.chart_of(sys, &frame.point)?;
        make_unit_basis(&self.raw_basis(chart, frame, sys).column_iter().map(|c| c.into_owned()).collect::<Vec<_>>(), sys.space())
    }
}

pub fn build_basis_field(
    sys: &dyn DynamicalSystem,
    splitting: &SplittingField,
    epsilon: f64,
    chart_radius: f64,
    exec: Execution,
) -> Result<BasisField> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidInput(format!("epsilon {epsilon} must lie in (0, 1)")));
    }
    if splitting.is_empty() {
        return Err(Error::InvalidInput("empty splitting sample".into()));
    }
    let mut radius = chart_radius;
    for refinement in 0..=MAX_REFINEMENTS {
        let mut anchors: Vec<usize> = Vec::new();
        for (i, f) in splitting.frames.iter().enumerate() {
            if anchors.iter().all(|&a| sys.distance(&splitting.frames[a].point, &f.point) > radius) {
                anchors.push(i);
            }
        }
        let charts: Vec<Chart> = anchors
            .iter()
            .map(|&a| Chart { anchor: splitting.frames[a].point.clone(), reference: reference_basis(&splitting.frames[a].eu, sys) })
            .collect();
        let mut field =
            BasisField { charts, radius, epsilon, refinements: refinement, min_separation: 1.0, min_alpha: f64::INFINITY, lipschitz: 0.0 };
        let stats = par::try_map_indexed(exec, splitting.len(), |i| -> Result<(f64, f64, usize, DMatrix<f64>)> {
            let fr = &splitting.frames[i];
            let chart = field.chart_of(sys, &fr.point)?;
            let b = field.raw_basis(chart, fr, sys);
            let sep = sequential_separation(&b, sys);
            let alpha = make_unit_basis(&b.column_iter().map(|c| c.into_owned()).collect::<Vec<_>>(), sys.space())
                .map(|u| u.alpha())
                .unwrap_or(0.0);
            Ok((sep, alpha, chart, b))
        })?;
        let min_sep = stats.iter().map(|s| s.0).fold(1.0, f64::min);
        let min_alpha = stats.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        if min_sep > 1.0 - epsilon {
            field.min_separation = min_sep;
            field.min_alpha = min_alpha;
            field.lipschitz = chart_lipschitz(sys, splitting, &stats);
            return Ok(field);
        }
        radius *= 0.5;
    }
    Err(Error::ChartRefinement(format!("separation above 1 − ε = {} not reached after {MAX_REFINEMENTS} refinements", 1.0 - epsilon)))
}

fn chart_lipschitz(sys: &dyn DynamicalSystem, splitting: &SplittingField, stats: &[(f64, f64, usize, DMatrix<f64>)]) -> f64 {
    let probes = stats.len().min(256);
    let space = sys.space();
    let mut worst = 0.0f64;
    for i in 0..probes {
        let nearest = (0..stats.len())
            .filter(|&j| j != i && stats[j].2 == stats[i].2)
            .map(|j| (sys.distance(&splitting.frames[i].point, &splitting.frames[j].point), j))
            .filter(|(d, _)| *d > 0.0)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((d, j)) = nearest {
            // orientation of a basis vector is fixed by the chart reference
            let diff = (&stats[i].3 - &stats[j].3).column_iter().map(|c| space.norm_slice(c.into_owned().as_slice())).fold(0.0, f64::max);
            worst = worst.max(diff / d);
        }
    }
    worst
}

/// `J^u(x) = |det_{η_x,η_{fx}}(Df_x|_{E^u_x})|`.
pub fn unstable_jacobian(sys: &dyn DynamicalSystem, field: &BasisField, at_x: &LocalFrame, at_fx: &LocalFrame) -> Result<f64> {
    let eta_x = field.basis_at(sys, at_x)?;
    let eta_fx = field.basis_at(sys, at_fx)?;
    Ok(det_between_bases(&sys.derivative(&at_x.point), &eta_x, &eta_fx)?.abs())
}

/// Frames along `points` with `E^u` transported from `eu0` by `Df`.
pub fn transported_frames(sys: &dyn DynamicalSystem, points: &[DVector<f64>], eu0: &DMatrix<f64>) -> Result<Vec<LocalFrame>> {
    let mut eu = eu0.clone();
    normalize_columns(&mut eu, sys.space());
    let mut out = Vec::with_capacity(points.len());
    for (j, p) in points.iter().enumerate() {
        if j > 0 {
            eu = sys.derivative(&points[j - 1]) * eu;
            normalize_columns(&mut eu, sys.space());
        }
        out.push(LocalFrame::new(p.clone(), eu.clone(), center_stable_frame(sys, p, 40)?)?);
    }
    Ok(out)
}

/// `J^u` at `points[j]` for `j < len − 1`, with `E^u` transported from `eu0`.
pub fn jacobians_along(sys: &dyn DynamicalSystem, field: &BasisField, points: &[DVector<f64>], eu0: &DMatrix<f64>) -> Result<Vec<f64>> {
    let frames = transported_frames(sys, points, eu0)?;
    frames.windows(2).map(|w| unstable_jacobian(sys, field, &w[0], &w[1])).collect()
}

/// `(1/n) Σ_{j<n} log J^u(f^j x)` along the forward orbit of the last point
/// of `orbit`, whose history seeds the `E^u` frame.
pub fn lyapunov_unstable_sum(sys: &dyn DynamicalSystem, field: &BasisField, orbit: &OrbitSegment, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("orbit length must be positive".into()));
    }
    let eu = unstable_frames_along(sys, &orbit.points).pop().expect("non-empty orbit");
    let mut x = orbit.point().clone();
    let mut frame = LocalFrame::new(x.clone(), eu, center_stable_frame(sys, &x, 40)?)?;
    let mut logs = Vec::with_capacity(n);
    for j in 0..n {
        let fx = sys.map(&x);
        if !sys.in_trapping_region(&fx) {
            return Err(Error::Domain(format!("orbit escaped the trapping region at step {}", j + 1)));
        }
        let mut eu_next = sys.derivative(&x) * &frame.eu;
        normalize_columns(&mut eu_next, sys.space());
        let next = LocalFrame::new(fx.clone(), eu_next, center_stable_frame(sys, &fx, 40)?)?;
        logs.push(unstable_jacobian(sys, field, &frame, &next)?.ln());
        x = fx;
        frame = next;
    }
    Ok(pairwise_sum(&logs) / n as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct DistortionRecord {
    pub horizon: usize,
    /// `Π_{k≤m} J^u(y_{−k}) / J^u(z_{−k})` for `m = 1..=n`.
    pub partial_products: Vec<f64>,
    /// `|P_n − P_{n−1}|`.
    pub cauchy_tail: f64,
    pub c_estimate: f64,
}

impl DistortionRecord {
    pub fn extreme(&self) -> f64 {
        self.partial_products.iter().map(|p| p.max(1.0 / p)).fold(1.0, f64::max)
    }

    pub fn within(&self, c: f64) -> bool {
        self.partial_products.iter().all(|p| *p >= 1.0 / c && *p <= c)
    }
}

/// Backward orbit of a disc point with its `E^u` frames, from `y_{−n}` to `y`.
struct BackwardOrbit {
    frames: Vec<LocalFrame>,
}

fn backward_orbit(sys: &dyn DynamicalSystem, chain: &DiscChain, xi: &DVector<f64>, n: usize) -> Result<BackwardOrbit> {
    let coords = chain.pull_back(sys, xi, n)?;
    let mut pts: Vec<DVector<f64>> = (0..=n).rev().map(|j| chain.discs[j].point(sys, &coords[j])).collect();
    let tangent = chain.discs[n].tangent(&coords[n]);
    let frames = transported_frames(sys, &pts, &tangent)?;
    pts.clear();
    Ok(BackwardOrbit { frames })
}

fn log_jacobians(sys: &dyn DynamicalSystem, field: &BasisField, orbit: &BackwardOrbit) -> Result<Vec<f64>> {
    // frames run from y_{−n} to y; entry k−1 of the result is log J^u(y_{−k})
    let n = orbit.frames.len() - 1;
    let mut out = vec![0.0; n];
    for k in 1..=n {
        let at = &orbit.frames[n - k];
        let next = &orbit.frames[n - k + 1];
        out[k - 1] = unstable_jacobian(sys, field, at, next)?.ln();
    }
    Ok(out)
}

/// Partial products of Jacobian ratios along the backward orbits of two
/// points of one disc.
pub fn distortion_product(
    sys: &dyn DynamicalSystem,
    field: &BasisField,
    chain: &DiscChain,
    y: &DVector<f64>,
    z: &DVector<f64>,
    n: usize,
) -> Result<DistortionRecord> {
    if n == 0 {
        return Err(Error::InvalidInput("horizon must be positive".into()));
    }
    let oy = backward_orbit(sys, chain, y, n)?;
    let oz = backward_orbit(sys, chain, z, n)?;
    let ly = log_jacobians(sys, field, &oy)?;
    let lz = log_jacobians(sys, field, &oz)?;
    let mut acc = 0.0;
    let mut products = Vec::with_capacity(n);
    for k in 0..n {
        acc += ly[k] - lz[k];
        products.push(acc.exp());
    }
    let tail = if n >= 2 { (products[n - 1] - products[n - 2]).abs() } else { (products[0] - 1.0).abs() };
    let rec = DistortionRecord { horizon: n, partial_products: products, cauchy_tail: tail, c_estimate: f64::NAN };
    if rec.extreme() > DISTORTION_LIMIT {
        return Err(Error::Distortion(format!("Jacobian ratio product {:.3e} exceeds 1e6", rec.extreme())));
    }
    Ok(rec)
}

/// A pair of points on one disc chain, in `E^u` coordinates.
#[derive(Clone, Debug)]
pub struct DiscPair {
    pub chain: usize,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DistortionEstimate {
    /// `2 × sup max(P, 1/P)` over pairs and horizons.
    pub c: f64,
    pub measured_sup: f64,
    /// Sup over pairs of `max(P_m, 1/P_m)` for each horizon `m = 1..=n`.
    pub sup_by_horizon: Vec<f64>,
    pub max_cauchy_tail: f64,
    /// Measured uniform bound `M`.
    pub m_bound: f64,
    /// Largest of `‖P_k‖`, `‖P_k^{-1}‖`, `‖π^u|_{E^u_y}‖`, `‖(π^u|_{E^u_y})^{-1}‖`.
    pub max_comparison_norm: f64,
    /// Largest `‖π^u P_k − I‖`.
    pub max_projection_deviation: f64,
    /// Largest `‖π^u P_k − I‖ / (M³|y_{−k} − x_{−k}|)`; at most 1 when the
    /// bound holds.
    pub projection_bound_ratio: f64,
    pub records: Vec<DistortionRecord>,
}

/// Comparison operator norms at one point `y_{−k}` of the disc based at `x_{−k}`.
fn comparison_norms(sys: &dyn DynamicalSystem, chain: &DiscChain, level: usize, xi: &DVector<f64>) -> (f64, f64) {
    let disc = &chain.discs[level];
    let space = sys.space();
    let fr = &disc.frame;
    let tangent = disc.tangent(xi);
    let p_amb = &tangent * fr.u_rows();
    let pi_u = fr.pi_u();
    let p_norm = operator_norm(&p_amb, &fr.eu, space);
    let pi_norm = operator_norm(&pi_u, &tangent, space);
    let deviation = operator_norm(&(&pi_u * &p_amb - DMatrix::identity(fr.eu.nrows(), fr.eu.nrows())), &fr.eu, space);
    (p_norm.max(pi_norm), deviation)
}

/// The uniform bound `M`: the largest of `‖Df‖`, `‖π^u‖`, `‖π^cs‖` and 1
/// over the splitting sample.
pub fn measure_m_bound(sys: &dyn DynamicalSystem, splitting: &SplittingField) -> f64 {
    let d = sys.dim();
    let id = DMatrix::identity(d, d);
    splitting
        .frames
        .iter()
        .take(512)
        .map(|f| {
            let s = sys.space();
            operator_norm(&sys.derivative(&f.point), &id, s).max(operator_norm(&f.pi_u(), &id, s)).max(operator_norm(&f.pi_cs(), &id, s))
        })
        .fold(1.0, f64::max)
}

pub fn estimate_distortion_constant(
    sys: &dyn DynamicalSystem,
    field: &BasisField,
    chains: &[DiscChain],
    pairs: &[DiscPair],
    n: usize,
    m_bound: f64,
    exec: Execution,
) -> Result<DistortionEstimate> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no sample pairs".into()));
    }
    let results = par::try_map_indexed(exec, pairs.len(), |i| -> Result<(DistortionRecord, f64, f64, f64)> {
        let pair = &pairs[i];
        let chain = chains.get(pair.chain).ok_or_else(|| Error::InvalidInput(format!("pair refers to missing chain {}", pair.chain)))?;
        let rec = distortion_product(sys, field, chain, &pair.y, &pair.z, n)?;
        let ys = chain.pull_back(sys, &pair.y, n)?;
        let mut max_norm = 0.0f64;
        let mut max_dev = 0.0f64;
        let mut ratio = 0.0f64;
        for (k, xi) in ys.iter().enumerate() {
            let (nrm, dev) = comparison_norms(sys, chain, k, xi);
            max_norm = max_norm.max(nrm);
            max_dev = max_dev.max(dev);
            let dist = sys.distance(&chain.discs[k].point(sys, xi), chain.discs[k].base());
            let bound = m_bound.powi(3) * dist;
            if dev > 0.0 {
                ratio = ratio.max(if bound > 0.0 { dev / bound } else { f64::INFINITY });
            }
        }
        Ok((rec, max_norm, max_dev, ratio))
    })?;
    let mut sup_by_horizon = vec![1.0f64; n];
    let mut tail = 0.0f64;
    for (rec, ..) in &results {
        for (m, p) in rec.partial_products.iter().enumerate() {
            sup_by_horizon[m] = sup_by_horizon[m].max(p.max(1.0 / p));
        }
        tail = tail.max(rec.cauchy_tail);
    }
    let measured_sup = sup_by_horizon.iter().copied().fold(1.0, f64::max);
    let c = 2.0 * measured_sup;
    let max_comparison_norm = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let max_projection_deviation = results.iter().map(|r| r.2).fold(0.0, f64::max);
    let projection_bound_ratio = results.iter().map(|r| r.3).fold(0.0, f64::max);
    let records = results
        .into_iter()
        .map(|(mut r, ..)| {
            r.c_estimate = c;
            r
        })
        .collect();
    Ok(DistortionEstimate {
        c,
        measured_sup,
        sup_by_horizon,
        max_cauchy_tail: tail,
        m_bound,
        max_comparison_norm,
        max_projection_deviation,
        projection_bound_ratio,
        records,
    })
}

/// `k^{−k/2} M^{−k} e^{kλ0}`, the lower bound on `J^u`.
pub fn jacobian_lower_bound(k: usize, m_bound: f64, lambda0: f64) -> f64 {
    let kf = k as f64;
    kf.powf(-kf / 2.0) * m_bound.powf(-kf) * (kf * lambda0).exp()
}
