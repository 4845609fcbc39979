//! Local unstable discs `W^u_δ(x)` as graphs over `E^u_x(δ)`, computed by the
//! graph transform along stored backward orbits.
//!
//! A disc is stored on a regular grid of `E^u` coefficients with the graph
//! value and its derivative at every node. One-dimensional discs are
//! interpolated by cubic Hermite splines, higher-dimensional ones
//! multilinearly.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::normed_linalg::{operator_norm, NormedSpace};
use crate::par::{self, Execution};
use crate::system::{center_stable_frame, unstable_frames_along, DynamicalSystem, LocalFrame, OrbitSegment};

pub const DEFAULT_NODES: usize = 33;
pub const MAX_SLOPE: f64 = 1.0 / 3.0;
pub const MIN_DEPTH: usize = 20;
pub const MAX_DEPTH: usize = 200;
const NEWTON_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct UnstableDisc {
    pub frame: LocalFrame,
    pub delta: f64,
    pub rho: f64,
    pub depth: usize,
    /// Sup distance between the graph and the image of the previous disc,
    /// measured between grid nodes; `NaN` when not measured.
    pub invariance_residual: f64,
    nodes: usize,
    values: Vec<DVector<f64>>,
    slopes: Vec<DMatrix<f64>>,
}

#[derive(Serialize)]
struct DiscRecord<'a> {
    schema: &'static str,
    base: &'a [f64],
    eu: Vec<Vec<f64>>,
    ecs: Vec<Vec<f64>>,
    delta: f64,
    rho: f64,
    nodes: usize,
    values: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
}

fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

impl UnstableDisc {
    /// The graph `h ≡ 0` over `E^u_x(δ)`.
    pub fn flat(frame: LocalFrame, delta: f64, nodes: usize) -> Self {
        let k = frame.k();
        let c = frame.ecs.ncols();
        let count = nodes.pow(k as u32);
        Self {
            frame,
            delta,
            rho: delta / 4.0,
            depth: 0,
            invariance_residual: f64::NAN,
            nodes,
            values: vec![DVector::zeros(c); count],
            slopes: vec![DMatrix::zeros(c, k); count],
        }
    }

    pub fn k(&self) -> usize {
        self.frame.k()
    }

    pub fn base(&self) -> &DVector<f64> {
        &self.frame.point
    }

    pub fn nodes_per_dim(&self) -> usize {
        self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.values.len()
    }

    fn spacing(&self) -> f64 {
        2.0 * self.delta / (self.nodes - 1) as f64
    }

    /// `E^u` coefficients of grid node `idx`.
    pub fn node_coords(&self, idx: usize) -> DVector<f64> {
        let h = self.spacing();
        let mut rem = idx;
        DVector::from_fn(self.k(), |_, _| {
            let i = rem % self.nodes;
            rem /= self.nodes;
            -self.delta + h * i as f64
        })
    }

    pub fn node_value(&self, idx: usize) -> &DVector<f64> {
        &self.values[idx]
    }

    pub fn node_slope(&self, idx: usize) -> &DMatrix<f64> {
        &self.slopes[idx]
    }

    pub fn contains_coords(&self, xi: &DVector<f64>) -> bool {
        xi.iter().all(|v| v.abs() <= self.delta * (1.0 + 1e-12))
    }

    fn cell(&self, x: f64) -> (usize, f64) {
        let h = self.spacing();
        let pos = (x + self.delta) / h;
        let c = (pos.floor().max(0.0) as usize).min(self.nodes - 2);
        (c, pos - c as f64)
    }

    /// `(h(ξ), Dh(ξ))`.
    pub fn eval(&self, xi: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let k = self.k();
        if k == 1 {
            let (c, t) = self.cell(xi[0]);
            let h = self.spacing();
            let (t2, t3) = (t * t, t * t * t);
            let (h00, h10, h01, h11) = (2.0 * t3 - 3.0 * t2 + 1.0, t3 - 2.0 * t2 + t, -2.0 * t3 + 3.0 * t2, t3 - t2);
            let (d00, d10, d01, d11) = (6.0 * t2 - 6.0 * t, 3.0 * t2 - 4.0 * t + 1.0, -6.0 * t2 + 6.0 * t, 3.0 * t2 - 2.0 * t);
            let (v0, v1) = (&self.values[c], &self.values[c + 1]);
            let m0 = self.slopes[c].column(0);
            let m1 = self.slopes[c + 1].column(0);
            let val = v0 * h00 + m0 * (h10 * h) + v1 * h01 + m1 * (h11 * h);
            let der = (v0 * d00 + v1 * d01) / h + m0 * d10 + m1 * d11;
            return (val, DMatrix::from_column_slice(der.len(), 1, der.as_slice()));
        }
        let cells: Vec<(usize, f64)> = (0..k).map(|j| self.cell(xi[j])).collect();
        let mut val = DVector::zeros(self.values[0].len());
        let mut der = DMatrix::zeros(self.values[0].len(), k);
        for corner in 0..(1usize << k) {
            let mut w = 1.0;
            let mut idx = 0;
            let mut stride = 1;
            for (j, (c, t)) in cells.iter().enumerate() {
                let hi = (corner >> j) & 1 == 1;
                w *= if hi { *t } else { 1.0 - t };
                idx += (c + hi as usize) * stride;
                stride *= self.nodes;
            }
            val += &self.values[idx] * w;
            der += &self.slopes[idx] * w;
        }
        (val, der)
    }

    /// Tangent frame `E^u + E^cs Dh(ξ)` of the disc at `ξ`.
    pub fn tangent(&self, xi: &DVector<f64>) -> DMatrix<f64> {
        let (_, dh) = self.eval(xi);
        &self.frame.eu + &self.frame.ecs * dh
    }

    pub fn point(&self, sys: &dyn DynamicalSystem, xi: &DVector<f64>) -> DVector<f64> {
        let (h, _) = self.eval(xi);
        sys.exp(&self.frame.point, &self.frame.compose(xi, &h))
    }

    /// Splitting coordinates `(ξ, η)` of `p` relative to the base point.
    pub fn local_coords(&self, sys: &dyn DynamicalSystem, p: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        self.frame.split(&sys.displacement(&self.frame.point, p))
    }

    /// Ambient length of the `E^cs` offset between `p` and the graph above
    /// its `E^u` coordinate, with that coordinate.
    pub fn vertical_offset(&self, sys: &dyn DynamicalSystem, p: &DVector<f64>) -> (DVector<f64>, f64) {
        let (xi, eta) = self.local_coords(sys, p);
        let (h, _) = self.eval(&xi);
        let off = sys.space().norm(&(&self.frame.ecs * (eta - h)));
        (xi, off)
    }

    /// `‖Dh(ξ)‖` as a map `E^u_x → E^cs_x` in the ambient norm.
    pub fn slope_at(&self, space: &NormedSpace, dh: &DMatrix<f64>) -> f64 {
        if dh.nrows() == 0 {
            return 0.0;
        }
        let amb = &self.frame.ecs * dh * self.frame.u_rows();
        operator_norm(&amb, &self.frame.eu, space)
    }

    /// Largest slope over grid nodes and cell midpoints.
    pub fn max_slope(&self, space: &NormedSpace) -> f64 {
        let mut worst = 0.0f64;
        for idx in 0..self.node_count() {
            worst = worst.max(self.slope_at(space, &self.slopes[idx]));
        }
        if self.k() == 1 {
            let h = self.spacing();
            for c in 0..self.nodes - 1 {
                let xi = DVector::from_element(1, -self.delta + h * (c as f64 + 0.5));
                worst = worst.max(self.slope_at(space, &self.eval(&xi).1));
            }
        }
        worst
    }

    /// Largest ambient length of `E^cs (h_1 − h_2)` over grid nodes.
    pub fn sup_distance(&self, other: &UnstableDisc, space: &NormedSpace) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| space.norm(&(&self.frame.ecs * (a - b)))).fold(0.0, f64::max)
    }

    /// Discrete second differences of the graph along each axis (monitored,
    /// not certified).
    pub fn max_second_difference(&self, space: &NormedSpace) -> f64 {
        if self.k() != 1 {
            return f64::NAN;
        }
        let h = self.spacing();
        (1..self.nodes - 1)
            .map(|i| {
                let dd = (&self.values[i + 1] - &self.values[i] * 2.0 + &self.values[i - 1]) / (h * h);
                space.norm(&(&self.frame.ecs * dd))
            })
            .fold(0.0, f64::max)
    }

    /// Length along the disc of the lifted segment from `a` to `b`, by a
    /// 128-interval composite trapezoid rule.
    pub fn arclength(&self, space: &NormedSpace, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let dir = b - a;
        if dir.iter().all(|v| *v == 0.0) {
            return 0.0;
        }
        let n = 128;
        let vals: Vec<f64> = (0..=n)
            .map(|i| {
                let xi = a + &dir * (i as f64 / n as f64);
                space.norm(&(self.tangent(&xi) * &dir))
            })
            .collect();
        let inner: f64 = vals[1..n].iter().sum();
        (0.5 * (vals[0] + vals[n]) + inner) / n as f64
    }

    /// Serializes base point, frames and grid data.
    pub fn to_json(&self) -> String {
        let rec = DiscRecord {
            schema: "srb-disc/1",
            base: self.frame.point.as_slice(),
            eu: columns(&self.frame.eu),
            ecs: columns(&self.frame.ecs),
            delta: self.delta,
            rho: self.rho,
            nodes: self.nodes,
            values: self.values.iter().map(|v| v.iter().copied().collect()).collect(),
            slopes: self.slopes.iter().map(|m| m.iter().copied().collect()).collect(),
        };
        serde_json::to_string(&rec).expect("disc serializes")
    }
}

/// Result of inverting the `E^u` coordinate of the image of a disc.
struct Inversion {
    xi: DVector<f64>,
    eta: DVector<f64>,
    da: DMatrix<f64>,
    db: DMatrix<f64>,
}

/// Finds `ξ` on `prev` whose image has `E^u` coordinate `target_xi` in the
/// target frame.
fn invert(
    sys: &dyn DynamicalSystem,
    prev: &UnstableDisc,
    target: &LocalFrame,
    u_rows: &DMatrix<f64>,
    cs_rows: &DMatrix<f64>,
    target_xi: &DVector<f64>,
    guess: DVector<f64>,
) -> Result<Inversion> {
    let mut xi = guess;
    let scale = prev.delta.max(1.0);
    let mut last_res = f64::INFINITY;
    for _ in 0..60 {
        let (h, dh) = prev.eval(&xi);
        let p = sys.exp(&prev.frame.point, &prev.frame.compose(&xi, &h));
        let fp = sys.map(&p);
        let disp = sys.displacement(&target.point, &fp);
        let a = u_rows * &disp;
        let tangent = &prev.frame.eu + &prev.frame.ecs * dh;
        let dft = sys.derivative(&p) * tangent;
        let da = u_rows * &dft;
        let r = &a - target_xi;
        let res = r.amax();
        if res <= 1e-13 * scale || (res <= NEWTON_TOL * scale && res >= last_res) {
            if !prev.contains_coords(&xi) && xi.amax() > prev.delta * (1.0 + 1e-9) {
                return Err(Error::DeltaTooLarge(format!(
                    "preimage coordinate {:.6} leaves the previous disc of radius {:.6}",
                    xi.amax(),
                    prev.delta
                )));
            }
            return Ok(Inversion { xi, eta: cs_rows * &disp, db: cs_rows * &dft, da });
        }
        last_res = res;
        let step = da.lu().solve(&r).ok_or_else(|| Error::DeltaTooLarge("singular expansion in graph transform".into()))?;
        xi -= step;
        if xi.amax() > 4.0 * prev.delta + 1.0 {
            break;
        }
    }
    Err(Error::DeltaTooLarge(format!("coordinate inversion failed near {:?} (radius {})", target_xi.as_slice(), prev.delta)))
}

/// One graph-transform step: the image of `prev` under `f`, re-expressed as
/// a graph over `E^u(δ)` of the target frame.
pub fn graph_transform_step(sys: &dyn DynamicalSystem, prev: &UnstableDisc, target: &LocalFrame, delta: f64) -> Result<UnstableDisc> {
    let space = sys.space();
    let slope = prev.max_slope(space);
    if slope > MAX_SLOPE + 1e-9 {
        return Err(Error::InvalidInput(format!("input graph slope {slope:.4} exceeds 1/3")));
    }
    let fx = sys.map(&prev.frame.point);
    let mismatch = sys.distance(&fx, &target.point);
    if mismatch > 1e-8 * (1.0 + space.norm(&fx)) {
        return Err(Error::Contract(format!("target is not the image of the disc base (offset {mismatch:.3e})")));
    }
    let u_rows = target.u_rows();
    let cs_rows = target.cs_rows();
    let a0 = &u_rows * sys.derivative(&prev.frame.point) * &prev.frame.eu;
    let a0_inv = a0.clone().try_inverse().ok_or_else(|| Error::DeltaTooLarge("derivative degenerate on E^u".into()))?;
    let mut out = UnstableDisc::flat(target.clone(), delta, prev.nodes);
    out.rho = delta / 4.0;
    for idx in 0..out.node_count() {
        let xi_t = out.node_coords(idx);
        let guess = &a0_inv * &xi_t;
        let inv = invert(sys, prev, target, &u_rows, &cs_rows, &xi_t, guess)?;
        let da_inv = inv.da.clone().try_inverse().ok_or_else(|| Error::DeltaTooLarge("singular expansion in graph transform".into()))?;
        out.values[idx] = inv.eta;
        out.slopes[idx] = &inv.db * da_inv;
    }
    Ok(out)
}

/// Splitting frames at every point of a stored orbit segment.
pub fn orbit_frames(sys: &dyn DynamicalSystem, orbit: &OrbitSegment) -> Result<Vec<LocalFrame>> {
    let eu = unstable_frames_along(sys, &orbit.points);
    orbit.points.iter().zip(eu).map(|(p, u)| LocalFrame::new(p.clone(), u, center_stable_frame(sys, p, 40)?)).collect()
}

/// Discs `W^u_δ(x_{−j})` for `j = 0..=back` along one stored orbit.
#[derive(Clone, Debug)]
pub struct DiscChain {
    /// `discs[j]` is based at `x_{−j}`.
    pub discs: Vec<UnstableDisc>,
}

impl DiscChain {
    pub fn disc(&self) -> &UnstableDisc {
        &self.discs[0]
    }

    pub fn len(&self) -> usize {
        self.discs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.discs.is_empty()
    }

    /// `E^u` coordinates of the backward orbit of the disc point with
    /// coordinates `xi`; entry `j` lies on `discs[j]`.
    pub fn pull_back(&self, sys: &dyn DynamicalSystem, xi: &DVector<f64>, n: usize) -> Result<Vec<DVector<f64>>> {
        if n >= self.discs.len() {
            return Err(Error::Itinerary(format!("{n} backward steps requested, chain holds {}", self.discs.len() - 1)));
        }
        if !self.discs[0].contains_coords(xi) {
            return Err(Error::Itinerary("point is not on the disc".into()));
        }
        let mut out = vec![xi.clone()];
        for j in 0..n {
            let prev = &self.discs[j + 1];
            let target = &self.discs[j].frame;
            let u_rows = target.u_rows();
            let cs_rows = target.cs_rows();
            let a0 = &u_rows * sys.derivative(&prev.frame.point) * &prev.frame.eu;
            let guess = a0.try_inverse().map(|m| m * &out[j]).unwrap_or_else(|| out[j].clone());
            let inv = invert(sys, prev, target, &u_rows, &cs_rows, &out[j], guess)?;
            out.push(inv.xi);
        }
        Ok(out)
    }

    /// Orbit segment `y_{−n}, …, y_0` of the disc point with coordinates `xi`.
    pub fn orbit_of(&self, sys: &dyn DynamicalSystem, xi: &DVector<f64>, n: usize) -> Result<OrbitSegment> {
        let coords = self.pull_back(sys, xi, n)?;
        let mut points: Vec<DVector<f64>> = coords.iter().enumerate().map(|(j, c)| self.discs[j].point(sys, c)).collect();
        points.reverse();
        Ok(OrbitSegment { points })
    }
}

fn transform_chain(
    sys: &dyn DynamicalSystem,
    frames: &[LocalFrame],
    start: usize,
    delta: f64,
    nodes: usize,
    keep: usize,
) -> Result<Vec<UnstableDisc>> {
    let last = frames.len() - 1;
    let mut disc = UnstableDisc::flat(frames[start].clone(), delta, nodes);
    let mut kept = Vec::new();
    for (j, frame) in frames.iter().enumerate().skip(start + 1) {
        disc = graph_transform_step(sys, &disc, frame, delta).map_err(|e| match e {
            Error::InvalidInput(m) => Error::DeltaTooLarge(m),
            other => other,
        })?;
        disc.depth = j - start;
        if last - j <= keep {
            kept.push(disc.clone());
        }
    }
    kept.reverse();
    Ok(kept)
}

/// Fixed point of the graph transform along the stored backward orbit,
/// returned with the discs at the last `back` preimages.
pub fn compute_disc_chain(sys: &dyn DynamicalSystem, orbit: &OrbitSegment, delta: f64, tol: f64, back: usize) -> Result<DiscChain> {
    compute_disc_chain_with(sys, orbit, delta, tol, back, DEFAULT_NODES)
}

pub fn compute_disc_chain_with(
    sys: &dyn DynamicalSystem,
    orbit: &OrbitSegment,
    delta: f64,
    tol: f64,
    back: usize,
    nodes: usize,
) -> Result<DiscChain> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidInput(format!("disc radius {delta} must be positive")));
    }
    if nodes < 3 {
        return Err(Error::InvalidInput("at least 3 grid nodes per dimension".into()));
    }
    let h = orbit.history();
    if h < MIN_DEPTH + back {
        return Err(Error::Itinerary(format!("stored backward orbit of length {h} is shorter than {}", MIN_DEPTH + back)));
    }
    let frames = orbit_frames(sys, orbit)?;
    let last = frames.len() - 1;
    let max_depth = MAX_DEPTH.min(h - back);
    let mut previous = transform_chain(sys, &frames, last - back - MIN_DEPTH, delta, nodes, back)?;
    let space = sys.space();
    for depth in MIN_DEPTH + 1..=max_depth {
        let chain = transform_chain(sys, &frames, last - back - depth, delta, nodes, back)?;
        let change = chain[0].sup_distance(&previous[0], space);
        if change < tol {
            let mut discs = chain;
            let slope = discs[0].max_slope(space);
            if slope > MAX_SLOPE + 1e-9 {
                return Err(Error::DeltaTooLarge(format!("disc slope {slope:.4} exceeds 1/3")));
            }
            if discs.len() > 1 {
                let r = invariance_residual(sys, &discs[1], &discs[0])?;
                discs[0].invariance_residual = r;
            }
            return Ok(DiscChain { discs });
        }
        previous = chain;
    }
    Err(Error::Convergence(format!("graph transform did not reach tolerance {tol:e} within depth {max_depth}")))
}

/// `W^u_δ(x)` for the last point of `orbit`.
pub fn compute_unstable_disc(sys: &dyn DynamicalSystem, orbit: &OrbitSegment, delta: f64, tol: f64) -> Result<UnstableDisc> {
    let back = usize::from(orbit.history() > MIN_DEPTH);
    let mut chain = compute_disc_chain(sys, orbit, delta, tol, back)?;
    Ok(chain.discs.swap_remove(0))
}

/// Largest distance between points of `disc` and the image of `prev`,
/// evaluated at grid nodes and between them.
pub fn invariance_residual(sys: &dyn DynamicalSystem, prev: &UnstableDisc, disc: &UnstableDisc) -> Result<f64> {
    let target = &disc.frame;
    let u_rows = target.u_rows();
    let cs_rows = target.cs_rows();
    let a0 = &u_rows * sys.derivative(&prev.frame.point) * &prev.frame.eu;
    let a0_inv = a0.try_inverse().ok_or_else(|| Error::DeltaTooLarge("derivative degenerate on E^u".into()))?;
    let k = disc.k();
    let probes: Vec<DVector<f64>> = if k == 1 {
        (0..=4 * (disc.nodes - 1)).map(|i| DVector::from_element(1, -disc.delta + disc.spacing() * i as f64 / 4.0)).collect()
    } else {
        (0..disc.node_count()).map(|i| disc.node_coords(i) * (1.0 - 0.5 / disc.nodes as f64)).collect()
    };
    let mut worst = 0.0f64;
    for xi in probes {
        let inv = invert(sys, prev, target, &u_rows, &cs_rows, &xi, &a0_inv * &xi)?;
        let (h, _) = disc.eval(&xi);
        worst = worst.max(sys.space().norm(&(&target.ecs * (inv.eta - h))));
    }
    Ok(worst)
}

/// Largest `δ ≤ delta_max` (by bisection) for which discs exist at all given
/// orbits with slopes at most 1/3.
pub fn default_delta(sys: &dyn DynamicalSystem, orbits: &[OrbitSegment], delta_max: f64, tol: f64) -> Result<f64> {
    let ok = |delta: f64| orbits.iter().all(|o| compute_unstable_disc(sys, o, delta, tol).is_ok());
    if ok(delta_max) {
        return Ok(delta_max);
    }
    let (mut lo, mut hi) = (0.0, delta_max);
    for _ in 0..16 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo == 0.0 {
        return Err(Error::DeltaTooLarge("no admissible disc radius found".into()));
    }
    Ok(lo)
}

#[derive(Clone, Debug, Serialize)]
pub struct ContractionRecord {
    /// `d^u(y_{−j}, z_{−j})` for `j = 0..=n`.
    pub distances: Vec<f64>,
    /// `d^u(y_{−j}, z_{−j}) / d^u(y, z)`.
    pub ratios: Vec<f64>,
    pub gamma0: f64,
    /// Fitted exponential rate; `+∞` when `y = z`.
    pub rate: f64,
}

impl ContractionRecord {
    pub fn passes(&self, lambda0: f64, eps0: f64) -> bool {
        self.rate >= lambda0 - eps0
    }
}

/// Backward contraction of `d^u` between two disc points, with the fitted
/// `d^u(y_{−n}, z_{−n}) ≈ γ0 e^{−n·rate} d^u(y, z)`.
pub fn backward_contraction_check(
    sys: &dyn DynamicalSystem,
    chain: &DiscChain,
    y: &DVector<f64>,
    z: &DVector<f64>,
    n: usize,
) -> Result<ContractionRecord> {
    let ys = chain.pull_back(sys, y, n)?;
    let zs = chain.pull_back(sys, z, n)?;
    let space = sys.space();
    let distances: Vec<f64> = (0..=n).map(|j| chain.discs[j].arclength(space, &ys[j], &zs[j])).collect();
    if distances[0] == 0.0 {
        return Ok(ContractionRecord { ratios: vec![0.0; n + 1], distances, gamma0: 1.0, rate: f64::INFINITY });
    }
    let ratios: Vec<f64> = distances.iter().map(|d| d / distances[0]).collect();
    let (gamma0, rate) = fit_exponential(&ratios);
    Ok(ContractionRecord { distances, ratios, gamma0, rate })
}

/// Least-squares fit of `log r_j = log γ − rate·j` over `j ≥ 1`.
pub fn fit_exponential(ratios: &[f64]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = ratios.iter().enumerate().skip(1).filter(|(_, r)| **r > 0.0).map(|(j, r)| (j as f64, r.ln())).collect();
    if pts.len() < 2 {
        return match pts.first() {
            Some((j, l)) => (1.0, -l / j),
            None => (1.0, f64::INFINITY),
        };
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    ((my - slope * mx).exp(), -slope)
}

#[derive(Clone, Debug, Serialize)]
pub struct CoherenceReport {
    pub rho: f64,
    pub pairs_checked: usize,
    pub intersecting_pairs: usize,
    pub violations: usize,
    pub max_offset: f64,
    pub coherent: bool,
    pub no_intersections: bool,
    pub largest_rho: f64,
}

fn subdisc_probes(k: usize, rho: f64) -> Vec<DVector<f64>> {
    let per: usize = if k == 1 { 65 } else { 9 };
    let count = per.pow(k as u32);
    (0..count)
        .map(|mut idx| {
            DVector::from_fn(k, |_, _| {
                let i = idx % per;
                idx /= per;
                -rho + 2.0 * rho * i as f64 / (per - 1) as f64
            })
        })
        .collect()
}

/// (intersects, included) for the ρ-subdisc of `a` against `b`.
fn pair_status(sys: &dyn DynamicalSystem, a: &UnstableDisc, b: &UnstableDisc, rho: f64, tol: f64) -> (bool, bool, f64) {
    let mut intersects = false;
    let mut included = true;
    let mut max_off = 0.0f64;
    for xi in subdisc_probes(a.k(), rho) {
        let p = a.point(sys, &xi);
        let (xb, off) = b.vertical_offset(sys, &p);
        let inside_delta = b.contains_coords(&xb);
        if inside_delta {
            max_off = max_off.max(off);
        }
        if off <= tol && xb.amax() <= rho {
            intersects = true;
        }
        if !(inside_delta && off <= tol) {
            included = false;
        }
    }
    (intersects, included, max_off)
}

fn coherence_at(sys: &dyn DynamicalSystem, discs: &[UnstableDisc], rho: f64, tol: f64, exec: Execution) -> (usize, usize, usize, f64) {
    let n = discs.len();
    let rows = par::map_indexed(exec, n, |i| {
        let mut checked = 0;
        let mut inter = 0;
        let mut bad = 0;
        let mut off = 0.0f64;
        for j in 0..n {
            if i == j {
                continue;
            }
            if sys.distance(discs[i].base(), discs[j].base()) > 2.0 * (discs[i].delta + discs[j].delta) {
                continue;
            }
            checked += 1;
            let (hit, included, o) = pair_status(sys, &discs[i], &discs[j], rho, tol);
            if hit {
                inter += 1;
                off = off.max(o);
                if !included {
                    bad += 1;
                }
            }
        }
        (checked, inter, bad, off)
    });
    rows.into_iter().fold((0, 0, 0, 0.0), |a, r| (a.0 + r.0, a.1 + r.1, a.2 + r.2, a.3.max(r.3)))
}

/// For every pair whose `ρ`-subdiscs meet, checks that one `ρ`-subdisc lies
/// in the other's `δ`-disc within `1e-6`; reports the largest admissible
/// `ρ` found by bisection.
pub fn coherence_check(sys: &dyn DynamicalSystem, discs: &[UnstableDisc], rho: f64, exec: Execution) -> CoherenceReport {
    let tol = 1e-6;
    let (checked, inter, bad, off) = coherence_at(sys, discs, rho, tol, exec);
    let delta = discs.iter().map(|d| d.delta).fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (0.0, if delta.is_finite() { delta } else { 0.0 });
    if hi > 0.0 && coherence_at(sys, discs, hi, tol, exec).2 == 0 {
        lo = hi;
    } else {
        for _ in 0..12 {
            let mid = 0.5 * (lo + hi);
            if coherence_at(sys, discs, mid, tol, exec).2 == 0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    CoherenceReport {
        rho,
        pairs_checked: checked,
        intersecting_pairs: inter,
        violations: bad,
        max_offset: off,
        coherent: bad == 0,
        no_intersections: inter == 0,
        largest_rho: lo,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{sample_attractor, LinearHyperbolic, Solenoid};

    fn solenoid_orbit() -> (Solenoid, OrbitSegment) {
        let sys = Solenoid::new(0.25, None, None).unwrap();
        let s = sample_attractor(&sys, 1, 120, 64, 11, Execution::Sequential).unwrap();
        (sys, s.orbits[0].clone())
    }

    #[test]
    fn linear_disc_is_flat() {
        let sys = LinearHyperbolic::new(2.0, 0.5, None).unwrap();
        let s = sample_attractor(&sys, 1, 80, 40, 1, Execution::Sequential).unwrap();
        let chain = compute_disc_chain(&sys, &s.orbits[0], 1.0, 1e-12, 1).unwrap();
        let d = chain.disc();
        assert!((0..d.node_count()).all(|i| d.node_value(i)[0] == 0.0));
        assert_eq!(d.max_slope(sys.space()), 0.0);
    }

    #[test]
    fn solenoid_disc_invariants() {
        let (sys, orbit) = solenoid_orbit();
        let d = compute_unstable_disc(&sys, &orbit, 1.0, 1e-12).unwrap();
        let zero = DVector::zeros(1);
        let (h0, dh0) = d.eval(&zero);
        assert!(h0.amax() < 1e-10);
        assert!(dh0.amax() < 1e-6);
        assert!(d.max_slope(sys.space()) <= MAX_SLOPE);
        assert!(d.invariance_residual < 1e-8, "{}", d.invariance_residual);
    }

    #[test]
    fn steep_input_graph_rejected() {
        let (sys, orbit) = solenoid_orbit();
        let frames = orbit_frames(&sys, &orbit).unwrap();
        let n = frames.len();
        let mut d = UnstableDisc::flat(frames[n - 2].clone(), 0.5, 9);
        for i in 0..d.node_count() {
            let xi = d.node_coords(i)[0];
            d.values[i] = DVector::from_vec(vec![0.5 * xi, 0.0]);
            d.slopes[i] = DMatrix::from_column_slice(2, 1, &[0.5, 0.0]);
        }
        assert!(matches!(graph_transform_step(&sys, &d, &frames[n - 1], 0.5), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_tolerance_does_not_converge() {
        let (sys, orbit) = solenoid_orbit();
        assert!(matches!(compute_unstable_disc(&sys, &orbit, 1.0, 0.0), Err(Error::Convergence(_))));
    }

    #[test]
    fn short_history_is_an_itinerary_error() {
        let (sys, orbit) = solenoid_orbit();
        let short = OrbitSegment { points: orbit.points[orbit.points.len() - 10..].to_vec() };
        assert!(matches!(compute_unstable_disc(&sys, &short, 1.0, 1e-10), Err(Error::Itinerary(_))));
    }

    #[test]
    fn linear_backward_contraction_is_exact() {
        let sys = LinearHyperbolic::new(2.0, 0.5, None).unwrap();
        let s = sample_attractor(&sys, 1, 80, 60, 1, Execution::Sequential).unwrap();
        let chain = compute_disc_chain(&sys, &s.orbits[0], 1.0, 1e-12, 10).unwrap();
        let rec = backward_contraction_check(&sys, &chain, &DVector::from_element(1, 0.3), &DVector::from_element(1, -0.2), 10).unwrap();
        for (j, r) in rec.ratios.iter().enumerate() {
            assert!((r - 0.5f64.powi(j as i32)).abs() < 1e-14);
        }
        assert!((rec.gamma0 - 1.0).abs() < 1e-12);
        let same = backward_contraction_check(&sys, &chain, &DVector::from_element(1, 0.3), &DVector::from_element(1, 0.3), 5).unwrap();
        assert_eq!(same.rate, f64::INFINITY);
    }

    #[test]
    fn same_base_discs_are_coherent() {
        let (sys, orbit) = solenoid_orbit();
        let d = compute_unstable_disc(&sys, &orbit, 1.0, 1e-12).unwrap();
        let rep = coherence_check(&sys, &[d.clone(), d], 0.25, Execution::Sequential);
        assert!(rep.coherent && !rep.no_intersections);
    }
}
