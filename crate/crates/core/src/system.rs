//! Dynamical systems, built-in models and validators for the standing
//! conditions (injectivity, injective derivative, trapping region) and for
//! partial hyperbolicity.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::normed_linalg::{dist_to_column_span, min_stretch, operator_norm, NormKind, NormedSpace};
use crate::par::{self, Execution};
use crate::qmc::Halton;

pub const TWO_PI: f64 = 2.0 * PI;

/// A `C²` map on a finite-dimensional normed space with a box-shaped
/// trapping region. Coordinates may be periodic.
pub trait DynamicalSystem: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn space(&self) -> &NormedSpace;
    /// `dim E^u`.
    fn unstable_dim(&self) -> usize;
    fn map(&self, x: &DVector<f64>) -> DVector<f64>;
    fn derivative(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn analytic_unstable(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    fn analytic_center_stable(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    /// Period of each coordinate, `None` for linear coordinates.
    fn periods(&self) -> Vec<Option<f64>>;
    /// Trapping region `U` as per-coordinate bounds.
    fn trapping_box(&self) -> Vec<(f64, f64)>;

    fn dim(&self) -> usize {
        self.space().dim
    }

    fn in_trapping_region(&self, x: &DVector<f64>) -> bool {
        let periods = self.periods();
        x.iter().all(|v| v.is_finite())
            && self
                .trapping_box()
                .iter()
                .zip(periods)
                .zip(x.iter())
                .all(|(((lo, hi), p), v)| p.is_some() || (*v >= lo - 1e-12 && *v <= hi + 1e-12))
    }

    /// Maps a point of the unit cube onto `U`.
    fn sample_trapping_region(&self, unit: &[f64]) -> DVector<f64> {
        let b = self.trapping_box();
        DVector::from_fn(b.len(), |i, _| b[i].0 + unit[i] * (b[i].1 - b[i].0))
    }

    /// `to − from` with periodic coordinates reduced to `[−P/2, P/2)`.
    fn displacement(&self, from: &DVector<f64>, to: &DVector<f64>) -> DVector<f64> {
        let mut d = to - from;
        for (i, p) in self.periods().into_iter().enumerate() {
            if let Some(p) = p {
                d[i] -= p * (d[i] / p).round();
            }
        }
        d
    }

    /// `x + v` reduced to the fundamental domain.
    fn exp(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.wrap(x + v)
    }

    fn wrap(&self, mut x: DVector<f64>) -> DVector<f64> {
        for (i, p) in self.periods().into_iter().enumerate() {
            if let Some(p) = p {
                x[i] = x[i].rem_euclid(p);
                if x[i] >= p {
                    x[i] = 0.0;
                }
            }
        }
        x
    }

    fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.space().norm(&self.displacement(a, b))
    }

    /// Diameter of `U` in the ambient norm.
    fn trapping_diameter(&self) -> f64 {
        let periods = self.periods();
        let ext: Vec<f64> = self.trapping_box().iter().zip(periods).map(|((lo, hi), p)| p.map_or(hi - lo, |p| p / 2.0)).collect();
        self.space().norm_slice(&ext)
    }
}

pub type SharedSystem = Arc<dyn DynamicalSystem>;

fn checked_norm(dim: usize, norm: Option<NormKind>) -> Result<NormedSpace> {
    NormedSpace::new(dim, norm.unwrap_or(NormKind::Sup))
}

/// `(u, s) ↦ (a·u mod 2π, b·s)` on the cylinder `[0,2π) × [−1,1]`.
#[derive(Clone, Debug)]
pub struct LinearHyperbolic {
    pub expansion: f64,
    pub contraction: f64,
    space: NormedSpace,
}

impl LinearHyperbolic {
    pub fn new(expansion: f64, contraction: f64, norm: Option<NormKind>) -> Result<Self> {
        if !(expansion >= 2.0 && expansion.fract() == 0.0) {
            return Err(Error::Parameter(format!("linear_hyperbolic expansion {expansion} must be an integer ≥ 2")));
        }
        if !(contraction > 0.0 && contraction <= 1.0) {
            return Err(Error::Parameter(format!("linear_hyperbolic contraction {contraction} must lie in (0, 1]")));
        }
        Ok(Self { expansion, contraction, space: checked_norm(2, norm)? })
    }

    /// No admissibility checks; used to build deliberately broken models.
    pub fn unchecked(expansion: f64, contraction: f64) -> Self {
        Self { expansion, contraction, space: NormedSpace::sup(2) }
    }
}

impl DynamicalSystem for LinearHyperbolic {
    fn name(&self) -> &str {
        "linear_hyperbolic"
    }
    fn space(&self) -> &NormedSpace {
        &self.space
    }
    fn unstable_dim(&self) -> usize {
        1
    }
    fn map(&self, x: &DVector<f64>) -> DVector<f64> {
        self.wrap(DVector::from_vec(vec![self.expansion * x[0], self.contraction * x[1]]))
    }
    fn derivative(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(vec![self.expansion, self.contraction]))
    }
    fn analytic_unstable(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]))
    }
    fn analytic_center_stable(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_column_slice(2, 1, &[0.0, 1.0]))
    }
    fn periods(&self) -> Vec<Option<f64>> {
        vec![Some(TWO_PI), None]
    }
    fn trapping_box(&self) -> Vec<(f64, f64)> {
        vec![(0.0, TWO_PI), (-1.0, 1.0)]
    }
}

/// Solid-torus solenoid `(Θ, x, y) ↦ (2Θ mod 2π, λx + ½cos Θ, λy + ½sin Θ)`,
/// optionally times an isometric rotation `t ↦ t + ω mod 2π`.
#[derive(Clone, Debug)]
pub struct Solenoid {
    pub lambda: f64,
    pub rotation: Option<f64>,
    space: NormedSpace,
}

impl Solenoid {
    pub fn new(lambda: f64, rotation: Option<f64>, norm: Option<NormKind>) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 0.5) {
            return Err(Error::Parameter(format!("solenoid lambda {lambda} must lie in (0, 1/2)")));
        }
        if let Some(w) = rotation {
            if !w.is_finite() {
                return Err(Error::Parameter("rotation number must be finite".into()));
            }
        }
        let dim = if rotation.is_some() { 4 } else { 3 };
        Ok(Self { lambda, rotation, space: checked_norm(dim, norm)? })
    }
}

impl DynamicalSystem for Solenoid {
    fn name(&self) -> &str {
        if self.rotation.is_some() {
            "solenoid_neutral"
        } else {
            "solenoid"
        }
    }
    fn space(&self) -> &NormedSpace {
        &self.space
    }
    fn unstable_dim(&self) -> usize {
        1
    }
    fn map(&self, p: &DVector<f64>) -> DVector<f64> {
        let (s, c) = p[0].sin_cos();
        let mut out = vec![2.0 * p[0], self.lambda * p[1] + 0.5 * c, self.lambda * p[2] + 0.5 * s];
        if let Some(w) = self.rotation {
            out.push(p[3] + w);
        }
        self.wrap(DVector::from_vec(out))
    }
    fn derivative(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let (s, c) = p[0].sin_cos();
        let mut m = DMatrix::zeros(d, d);
        m[(0, 0)] = 2.0;
        m[(1, 0)] = -0.5 * s;
        m[(2, 0)] = 0.5 * c;
        m[(1, 1)] = self.lambda;
        m[(2, 2)] = self.lambda;
        if d == 4 {
            m[(3, 3)] = 1.0;
        }
        m
    }
    fn analytic_center_stable(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let d = self.dim();
        Some(DMatrix::from_fn(d, d - 1, |i, j| if i == j + 1 { 1.0 } else { 0.0 }))
    }
    fn periods(&self) -> Vec<Option<f64>> {
        let mut p = vec![Some(TWO_PI), None, None];
        if self.rotation.is_some() {
            p.push(Some(TWO_PI));
        }
        p
    }
    fn trapping_box(&self) -> Vec<(f64, f64)> {
        let mut b = vec![(0.0, TWO_PI), (-1.0, 1.0), (-1.0, 1.0)];
        if self.rotation.is_some() {
            b.push((0.0, TWO_PI));
        }
        b
    }
}

/// `θ ↦ 2θ mod 2π`; expanding but two-to-one.
#[derive(Clone, Debug)]
pub struct CircleDoubling {
    space: NormedSpace,
}

impl Default for CircleDoubling {
    fn default() -> Self {
        Self { space: NormedSpace::sup(1) }
    }
}

impl DynamicalSystem for CircleDoubling {
    fn name(&self) -> &str {
        "circle_doubling"
    }
    fn space(&self) -> &NormedSpace {
        &self.space
    }
    fn unstable_dim(&self) -> usize {
        1
    }
    fn map(&self, x: &DVector<f64>) -> DVector<f64> {
        self.wrap(x * 2.0)
    }
    fn derivative(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 2.0)
    }
    fn analytic_unstable(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, 1.0))
    }
    fn analytic_center_stable(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(1, 0))
    }
    fn periods(&self) -> Vec<Option<f64>> {
        vec![Some(TWO_PI)]
    }
    fn trapping_box(&self) -> Vec<(f64, f64)> {
        vec![(0.0, TWO_PI)]
    }
}

/// Default rotation number of the neutral solenoid (golden mean turn).
pub const GOLDEN_ROTATION: f64 = TWO_PI * 0.618_033_988_749_894_8;

pub fn builtin_system(name: &str, params: &BTreeMap<String, f64>, norm: Option<NormKind>) -> Result<SharedSystem> {
    let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
    let allowed: &[&str] = match name {
        "linear_hyperbolic" => &["expansion", "contraction"],
        "solenoid" => &["lambda"],
        "solenoid_neutral" => &["lambda", "omega"],
        other => return Err(Error::UnknownSystem(other.to_string())),
    };
    if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::Parameter(format!("unknown parameter '{bad}' for {name}")));
    }
    Ok(match name {
        "linear_hyperbolic" => Arc::new(LinearHyperbolic::new(get("expansion", 2.0), get("contraction", 0.5), norm)?),
        "solenoid" => Arc::new(Solenoid::new(get("lambda", 0.25), None, norm)?),
        _ => Arc::new(Solenoid::new(get("lambda", 0.25), Some(get("omega", GOLDEN_ROTATION)), norm)?),
    })
}

/// `x, f(x), …, f^n(x)`.
pub fn forward_orbit(sys: &dyn DynamicalSystem, x: &DVector<f64>, n: usize) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(x.clone());
    for j in 0..n {
        let y = sys.map(&out[j]);
        if !sys.in_trapping_region(&y) {
            return Err(Error::Domain(format!("orbit left the trapping region at step {}", j + 1)));
        }
        out.push(y);
    }
    Ok(out)
}

/// Stored orbit segment `x_{−H}, …, x_{−1}, x_0`; the last entry is the point.
#[derive(Clone, Debug, Serialize)]
pub struct OrbitSegment {
    pub points: Vec<DVector<f64>>,
}

impl OrbitSegment {
    pub fn point(&self) -> &DVector<f64> {
        self.points.last().expect("orbit segment is never empty")
    }

    /// Available backward steps.
    pub fn history(&self) -> usize {
        self.points.len() - 1
    }

    /// `x_{−j}`.
    pub fn back(&self, j: usize) -> &DVector<f64> {
        &self.points[self.points.len() - 1 - j]
    }
}

/// Finite representative of the attractor `Λ`.
#[derive(Clone, Debug)]
pub struct AttractorSample {
    pub orbits: Vec<OrbitSegment>,
    pub transient: usize,
}

impl AttractorSample {
    pub fn len(&self) -> usize {
        self.orbits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orbits.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.orbits.iter().map(|o| o.point())
    }
}

/// Pushes `n_points` quasi-random points of `U` forward `transient` steps and
/// keeps the last `history` steps of every orbit.
pub fn sample_attractor(
    sys: &dyn DynamicalSystem,
    n_points: usize,
    transient: usize,
    history: usize,
    seed: u64,
    exec: Execution,
) -> Result<AttractorSample> {
    if history > transient {
        return Err(Error::InvalidInput("history longer than transient".into()));
    }
    let halton = Halton::new(sys.dim(), seed, "attractor");
    let orbits = par::try_map_indexed(exec, n_points, |i| {
        let mut x = sys.sample_trapping_region(&halton.point(i as u64));
        let mut pts = Vec::with_capacity(history + 1);
        for step in 0..transient {
            if step + history >= transient {
                pts.push(x.clone());
            }
            x = sys.map(&x);
            if !sys.in_trapping_region(&x) {
                return Err(Error::Domain(format!("sample {i} left the trapping region at step {}", step + 1)));
            }
        }
        pts.push(x);
        Ok(OrbitSegment { points: pts })
    })?;
    Ok(AttractorSample { orbits, transient })
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub passed: bool,
    pub detail: String,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionsReport {
    pub system: String,
    pub samples: usize,
    pub seed: u64,
    pub injectivity: CheckOutcome,
    pub derivative_injectivity: CheckOutcome,
    pub trapping: CheckOutcome,
    pub attractor_capture: CheckOutcome,
    pub kuratowski: String,
    pub violations: Vec<String>,
}

impl ConditionsReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Statistical checks of the standing conditions; failures are reported as
/// named violations.
pub fn validate_conditions(sys: &dyn DynamicalSystem, n_samples: usize, seed: u64) -> ConditionsReport {
    let d = sys.dim();
    let halton = Halton::new(d, seed, "validate");
    let pts: Vec<DVector<f64>> = (0..n_samples as u64).map(|i| sys.sample_trapping_region(&halton.point(i))).collect();
    let images: Vec<DVector<f64>> = pts.iter().map(|p| sys.map(p)).collect();
    let diam = sys.trapping_diameter();

    let collisions = image_collisions(sys, &pts, &images, 1e-9 * diam, 1e-3 * diam);
    let injectivity = CheckOutcome {
        passed: collisions.is_empty(),
        detail: if collisions.is_empty() {
            "no image collisions between separated samples".into()
        } else {
            format!("{} colliding pairs, first ({}, {})", collisions.len(), collisions[0].0, collisions[0].1)
        },
        value: collisions.len() as f64,
    };

    let min_sv = pts
        .iter()
        .map(|p| {
            let sv = sys.derivative(p).singular_values();
            sv.iter().fold(f64::INFINITY, |m, &s| m.min(s))
        })
        .fold(f64::INFINITY, f64::min);
    let derivative_injectivity =
        CheckOutcome { passed: min_sv > 1e-12, detail: format!("smallest singular value of Df over samples: {min_sv:.6e}"), value: min_sv };

    let escaped = boundary_samples(sys, n_samples.min(4096), seed).iter().filter(|p| !sys.in_trapping_region(&sys.map(p))).count();
    let trapping =
        CheckOutcome { passed: escaped == 0, detail: format!("{escaped} boundary samples mapped outside U"), value: escaped as f64 };

    let capture = attractor_capture(sys, &pts[..pts.len().min(1000)]);

    let mut violations = Vec::new();
    for (name, c) in [
        ("injectivity", &injectivity),
        ("derivative_injectivity", &derivative_injectivity),
        ("trapping", &trapping),
        ("attractor_capture", &capture),
    ] {
        if !c.passed {
            violations.push(format!("{name}: {}", c.detail));
        }
    }
    ConditionsReport {
        system: sys.name().to_string(),
        samples: n_samples,
        seed,
        injectivity,
        derivative_injectivity,
        trapping,
        attractor_capture: capture,
        kuratowski: "trivially satisfied: finite dimension, every bounded operator is compact".into(),
        violations,
    }
}

fn image_collisions(
    sys: &dyn DynamicalSystem,
    pts: &[DVector<f64>],
    images: &[DVector<f64>],
    image_tol: f64,
    preimage_sep: f64,
) -> Vec<(usize, usize)> {
    let period0 = sys.periods()[0];
    let mut keyed: Vec<(f64, usize)> = images.iter().enumerate().map(|(i, y)| (y[0], i)).collect();
    if let Some(p) = period0 {
        let wrapped: Vec<(f64, usize)> = keyed.iter().filter(|(k, _)| *k < image_tol).map(|(k, i)| (k + p, *i)).collect();
        keyed.extend(wrapped);
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = Vec::new();
    for a in 0..keyed.len() {
        for b in a + 1..keyed.len() {
            if keyed[b].0 - keyed[a].0 > image_tol {
                break;
            }
            let (i, j) = (keyed[a].1.min(keyed[b].1), keyed[a].1.max(keyed[b].1));
            if i != j
                && sys.distance(&images[i], &images[j]) <= image_tol
                && sys.distance(&pts[i], &pts[j]) >= preimage_sep
                && !out.contains(&(i, j))
            {
                out.push((i, j));
            }
        }
    }
    out
}

/// Quasi-random points on the non-periodic faces of `U`.
fn boundary_samples(sys: &dyn DynamicalSystem, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let d = sys.dim();
    let faces: Vec<usize> = sys.periods().iter().enumerate().filter(|(_, p)| p.is_none()).map(|(i, _)| i).collect();
    if faces.is_empty() {
        return Vec::new();
    }
    let halton = Halton::new(d, seed, "boundary");
    (0..n)
        .map(|i| {
            let mut u = halton.point(i as u64);
            let face = faces[i % faces.len()];
            u[face] = if (i / faces.len()).is_multiple_of(2) { 0.0 } else { 1.0 };
            sys.sample_trapping_region(&u)
        })
        .collect()
}

fn cloud_diameter(sys: &dyn DynamicalSystem, pts: &[DVector<f64>]) -> f64 {
    let periods = sys.periods();
    let ext: Vec<f64> = (0..sys.dim())
        .map(|i| match periods[i] {
            Some(p) => {
                let mut v: Vec<f64> = pts.iter().map(|x| x[i]).collect();
                v.sort_by(f64::total_cmp);
                let mut gap = p - (v[v.len() - 1] - v[0]);
                for w in v.windows(2) {
                    gap = gap.max(w[1] - w[0]);
                }
                (p - gap).min(p / 2.0)
            }
            None => {
                let lo = pts.iter().map(|x| x[i]).fold(f64::INFINITY, f64::min);
                let hi = pts.iter().map(|x| x[i]).fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            }
        })
        .collect();
    sys.space().norm_slice(&ext)
}

fn attractor_capture(sys: &dyn DynamicalSystem, start: &[DVector<f64>]) -> CheckOutcome {
    let mut pts = start.to_vec();
    let mut diams = Vec::with_capacity(101);
    diams.push(cloud_diameter(sys, &pts));
    for step in 0..100 {
        for p in pts.iter_mut() {
            *p = sys.map(p);
        }
        if pts.iter().any(|p| !sys.in_trapping_region(p)) {
            return CheckOutcome { passed: false, detail: format!("samples escaped U at step {}", step + 1), value: f64::NAN };
        }
        diams.push(cloud_diameter(sys, &pts));
    }
    let tail = &diams[90..];
    let hi = tail.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lo = tail.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let spread = (hi - lo) / hi.max(f64::MIN_POSITIVE);
    CheckOutcome {
        passed: spread < 1e-6,
        detail: format!("diameter {:.6} -> {:.6}, tail relative spread {spread:.3e}", diams[0], diams[100]),
        value: spread,
    }
}

/// Splitting frames at one point with the projections of the direct sum.
#[derive(Clone, Debug)]
pub struct LocalFrame {
    pub point: DVector<f64>,
    pub eu: DMatrix<f64>,
    pub ecs: DMatrix<f64>,
    inverse: DMatrix<f64>,
}

impl LocalFrame {
    pub fn new(point: DVector<f64>, eu: DMatrix<f64>, ecs: DMatrix<f64>) -> Result<Self> {
        let d = point.len();
        let k = eu.ncols();
        if eu.nrows() != d || ecs.nrows() != d || k + ecs.ncols() != d {
            return Err(Error::Contract("splitting frames do not match the ambient dimension".into()));
        }
        let mut full = DMatrix::zeros(d, d);
        full.columns_mut(0, k).copy_from(&eu);
        full.columns_mut(k, d - k).copy_from(&ecs);
        let inverse = full.try_inverse().ok_or_else(|| Error::SplittingFailure("E^u and E^cs frames are not complementary".into()))?;
        let scale = inverse.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if !scale.is_finite() || scale > 1e10 {
            return Err(Error::SplittingFailure(format!("splitting is ill-conditioned (inverse entry {scale:.3e})")));
        }
        Ok(Self { point, eu, ecs, inverse })
    }

    pub fn k(&self) -> usize {
        self.eu.ncols()
    }

    /// Rows of `[E^u E^cs]^{-1}` returning `E^u` coefficients.
    pub fn u_rows(&self) -> DMatrix<f64> {
        self.inverse.rows(0, self.k()).into_owned()
    }

    /// Rows of `[E^u E^cs]^{-1}` returning `E^cs` coefficients.
    pub fn cs_rows(&self) -> DMatrix<f64> {
        let k = self.k();
        self.inverse.rows(k, self.inverse.nrows() - k).into_owned()
    }

    /// Coefficients `(a, b)` with `v = E^u a + E^cs b`.
    pub fn split(&self, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let c = &self.inverse * v;
        let k = self.k();
        (c.rows(0, k).into_owned(), c.rows(k, c.len() - k).into_owned())
    }

    /// Projection `π^u` along `E^cs`, as an ambient matrix.
    pub fn pi_u(&self) -> DMatrix<f64> {
        &self.eu * self.inverse.rows(0, self.k())
    }

    pub fn pi_cs(&self) -> DMatrix<f64> {
        let k = self.k();
        &self.ecs * self.inverse.rows(k, self.inverse.nrows() - k)
    }

    pub fn compose(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        &self.eu * a + &self.ecs * b
    }
}

/// Normalizes each column in the ambient norm.
pub fn normalize_columns(m: &mut DMatrix<f64>, space: &NormedSpace) {
    for mut c in m.column_iter_mut() {
        let n = space.norm_slice(c.as_slice());
        if n > 0.0 {
            c /= n;
        }
    }
}

/// Largest distance from a unit column of `a` to the span of `b`.
pub fn frame_gap(a: &DMatrix<f64>, b: &DMatrix<f64>, space: &NormedSpace) -> f64 {
    let mut worst = 0.0f64;
    for c in a.column_iter() {
        let v = c.into_owned();
        let n = space.norm(&v);
        if n > 0.0 {
            worst = worst.max(dist_to_column_span(&(v / n), b, space));
        }
    }
    worst
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    let k = m.ncols();
    let q = m.qr().q();
    q.columns(0, k).into_owned()
}

fn initial_unstable_guess(sys: &dyn DynamicalSystem, x: &DVector<f64>) -> DMatrix<f64> {
    let d = sys.dim();
    let k = sys.unstable_dim();
    if let Some(cs) = sys.analytic_center_stable(x) {
        if cs.ncols() == d - k && d > k {
            let q = orthonormalize(cs);
            let complement = DMatrix::identity(d, d) - &q * q.transpose();
            if let Some(u) = complement.svd(true, false).u {
                return u.columns(0, k).into_owned();
            }
        }
    }
    DMatrix::from_fn(d, k, |i, j| if i == j { 1.0 } else { 0.1 })
}

/// `E^u` frames along a stored orbit by forward power iteration of `Df`.
/// Entry `j` is the frame at `points[j]`; frames late in the segment are the
/// converged ones.
pub fn unstable_frames_along(sys: &dyn DynamicalSystem, points: &[DVector<f64>]) -> Vec<DMatrix<f64>> {
    let space = sys.space();
    let mut out = Vec::with_capacity(points.len());
    let mut f = match sys.analytic_unstable(&points[0]) {
        Some(m) => m,
        None => initial_unstable_guess(sys, &points[0]),
    };
    normalize_columns(&mut f, space);
    out.push(f.clone());
    for j in 1..points.len() {
        f = match sys.analytic_unstable(&points[j]) {
            Some(m) => m,
            None => orthonormalize(sys.derivative(&points[j - 1]) * &f),
        };
        normalize_columns(&mut f, space);
        out.push(f.clone());
    }
    out
}

/// `E^cs` at `x` as the orthogonal complement of the dominant subspace of
/// `(Df^m_x)ᵀ`, computed by adjoint QR iteration along the forward orbit.
pub fn center_stable_frame(sys: &dyn DynamicalSystem, x: &DVector<f64>, iterations: usize) -> Result<DMatrix<f64>> {
    if let Some(cs) = sys.analytic_center_stable(x) {
        let mut cs = cs;
        normalize_columns(&mut cs, sys.space());
        return Ok(cs);
    }
    let d = sys.dim();
    let k = sys.unstable_dim();
    let orbit = forward_orbit(sys, x, iterations)?;
    let mut g = DMatrix::from_fn(d, k, |i, j| if i == j { 1.0 } else { 0.1 });
    for j in (0..iterations).rev() {
        g = orthonormalize(sys.derivative(&orbit[j]).transpose() * g);
    }
    let mut full = DMatrix::zeros(d, d);
    full.columns_mut(0, k).copy_from(&g);
    let q = full.qr().q();
    let mut cs = q.columns(k, d - k).into_owned();
    let proj = DMatrix::identity(d, d) - &g * g.transpose();
    cs = orthonormalize(proj * cs);
    normalize_columns(&mut cs, sys.space());
    Ok(cs)
}

/// Splitting frames on the attractor sample.
#[derive(Clone, Debug)]
pub struct SplittingField {
    pub frames: Vec<LocalFrame>,
    /// `max dist(Df E^u_x, E^u_{fx})` and the `E^cs` analogue over the sample.
    pub invariance_residual: f64,
    pub cs_invariance_residual: f64,
    /// Largest observed `gap(E^u_x, E^u_y) / |x − y|` between nearby samples.
    pub continuity_modulus: f64,
}

impl SplittingField {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Frames at the end of one orbit segment together with the invariance
/// residuals measured at that point.
pub fn splitting_at(sys: &dyn DynamicalSystem, orbit: &OrbitSegment, cone_iterations: usize) -> Result<(LocalFrame, f64, f64)> {
    let k = sys.unstable_dim();
    let space = sys.space();
    let x = orbit.point();
    let analytic = sys.analytic_unstable(x).is_some();
    if !analytic && cone_iterations < 20 {
        return Err(Error::InvalidInput("cone iterations must be at least 20".into()));
    }
    let h = orbit.history();
    if !analytic && h < cone_iterations {
        return Err(Error::Itinerary(format!("orbit history {h} shorter than {cone_iterations} cone iterations")));
    }
    let seg = &orbit.points[h - cone_iterations.min(h)..];
    let frames = unstable_frames_along(sys, seg);
    let eu = frames.last().unwrap().clone();
    let mut residual = 0.0;
    if frames.len() >= 2 {
        let prev = &frames[frames.len() - 2];
        let pushed = sys.derivative(&seg[seg.len() - 2]) * prev;
        residual = frame_gap(&pushed, &eu, space);
    }
    if !analytic && residual > 1e-6 {
        return Err(Error::SplittingFailure(format!("cone iteration did not settle (invariance residual {residual:.3e})")));
    }
    let ecs = center_stable_frame(sys, x, cone_iterations.max(20))?;
    let fx = sys.map(x);
    let ecs_next = center_stable_frame(sys, &fx, cone_iterations.max(20))?;
    let cs_res = if ecs.ncols() > 0 { frame_gap(&(sys.derivative(x) * &ecs), &ecs_next, space) } else { 0.0 };
    if k == 0 {
        return Err(Error::Contract("unstable dimension must be positive".into()));
    }
    let frame = LocalFrame::new(x.clone(), eu, ecs)?;
    Ok((frame, residual, cs_res))
}

pub fn compute_splitting(
    sys: &dyn DynamicalSystem,
    sample: &AttractorSample,
    cone_iterations: usize,
    exec: Execution,
) -> Result<SplittingField> {
    let results = par::try_map_indexed(exec, sample.len(), |i| splitting_at(sys, &sample.orbits[i], cone_iterations))?;
    let invariance_residual = results.iter().fold(0.0f64, |m, r| m.max(r.1));
    let cs_invariance_residual = results.iter().fold(0.0f64, |m, r| m.max(r.2));
    let frames: Vec<LocalFrame> = results.into_iter().map(|r| r.0).collect();
    let continuity_modulus = continuity_modulus(sys, &frames, exec);
    Ok(SplittingField { frames, invariance_residual, cs_invariance_residual, continuity_modulus })
}

fn continuity_modulus(sys: &dyn DynamicalSystem, frames: &[LocalFrame], exec: Execution) -> f64 {
    let probes = frames.len().min(256);
    let space = sys.space();
    let per = par::map_indexed(exec, probes, |i| {
        let a = &frames[i];
        let nearest = frames
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, b)| (sys.distance(&a.point, &b.point), j))
            .filter(|(d, _)| *d > 0.0)
            .min_by(|x, y| x.0.total_cmp(&y.0));
        match nearest {
            Some((dist, j)) => frame_gap(&a.eu, &frames[j].eu, space) / dist,
            None => 0.0,
        }
    });
    per.into_iter().fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct HyperbolicityReport {
    pub lambda0_estimate: f64,
    pub cs_bound: f64,
    pub samples: usize,
    pub violations: Vec<String>,
}

impl HyperbolicityReport {
    pub fn accepted(&self) -> bool {
        self.lambda0_estimate > 0.0 && self.cs_bound <= 1.0 + 1e-9
    }
}

pub fn hyperbolicity_report(sys: &dyn DynamicalSystem, splitting: &SplittingField, n_samples: usize) -> Result<HyperbolicityReport> {
    let n = n_samples.min(splitting.len());
    if n == 0 {
        return Err(Error::InvalidInput("no splitting samples".into()));
    }
    let space = sys.space();
    let mut lambda0 = f64::INFINITY;
    let mut cs_bound = 0.0f64;
    for fr in &splitting.frames[..n] {
        let df = sys.derivative(&fr.point);
        lambda0 = lambda0.min(min_stretch(&df, &fr.eu, space).ln());
        if fr.ecs.ncols() > 0 {
            cs_bound = cs_bound.max(operator_norm(&df, &fr.ecs, space));
        }
    }
    if !(lambda0 > 0.0) {
        return Err(Error::NotPartiallyHyperbolic { lambda0 });
    }
    let mut violations = Vec::new();
    if cs_bound > 1.0 + 1e-9 {
        violations.push(format!("center-stable growth {cs_bound} exceeds 1"));
    }
    Ok(HyperbolicityReport { lambda0_estimate: lambda0, cs_bound, samples: n, violations })
}
