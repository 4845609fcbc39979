//! Push-forward of Lebesgue measure on an unstable disc, Cesàro averaging,
//! the transversal box with its fibres, and the conditional-density checks
//! that decide whether an averaged measure looks SRB.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cocycle::{unstable_jacobian, BasisField};
use crate::error::{Error, Result};
use crate::manifolds::UnstableDisc;
use crate::par::{self, pairwise_sum, Execution};
use crate::qmc::{stream_rng, Halton};
use crate::system::{center_stable_frame, normalize_columns, DynamicalSystem, LocalFrame};

pub const MIN_SEED_PARTICLES: usize = 1000;
/// Seeds skip the bases 2 and 3, which resonate with integer expansion
/// factors under push-forward.
const SEED_PRIME_SKIP: usize = 2;
const BINARY_MAGIC: &[u8; 8] = b"SRBMEAS1";

/// Parameters of the leak threshold `(4/3)δγ0 e^{−n(λ0−ε0)}`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LeakModel {
    pub delta: f64,
    pub gamma0: f64,
    pub lambda0: f64,
    pub eps0: f64,
}

impl LeakModel {
    pub fn threshold(&self, n: usize) -> f64 {
        4.0 / 3.0 * self.delta * self.gamma0 * (-(n as f64) * (self.lambda0 - self.eps0)).exp()
    }

    /// Lebesgue fraction of `E^u(δ)` within the threshold of its boundary.
    pub fn analytic_leak(&self, n: usize, k: usize) -> f64 {
        let t = (self.threshold(n) / self.delta).min(1.0);
        1.0 - (1.0 - t).powi(k as i32)
    }
}

/// Weighted particle cloud stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    pub dim: usize,
    pub k: usize,
    /// `dim` coordinates per particle.
    pub points: Vec<f64>,
    /// Preimage of each point; equal to the point at generation 0.
    pub previous: Vec<f64>,
    /// Unit `E^u` frame (`dim × k`, column-major) transported along the orbit.
    pub tangents: Vec<f64>,
    pub weights: Vec<f64>,
    /// `E^u` coordinates of the source point on the seed disc.
    pub seeds: Vec<f64>,
    pub generations: Vec<u32>,
    /// `Σ log J^u` along the orbit from the source.
    pub log_jac: Vec<f64>,
    /// `log det(π^u_{x̂}|E^u)` at the source.
    pub seed_log_det: Vec<f64>,
}

struct ParticleState {
    point: DVector<f64>,
    previous: DVector<f64>,
    tangent: DMatrix<f64>,
    log_jac: f64,
}

impl EmpiricalMeasure {
    fn with_capacity(dim: usize, k: usize, n: usize) -> Self {
        Self {
            dim,
            k,
            points: Vec::with_capacity(n * dim),
            previous: Vec::with_capacity(n * dim),
            tangents: Vec::with_capacity(n * dim * k),
            weights: Vec::with_capacity(n),
            seeds: Vec::with_capacity(n * k),
            generations: Vec::with_capacity(n),
            log_jac: Vec::with_capacity(n),
            seed_log_det: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.points[i * self.dim..(i + 1) * self.dim])
    }

    pub fn point_slice(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn previous_point(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.previous[i * self.dim..(i + 1) * self.dim])
    }

    pub fn tangent(&self, i: usize) -> DMatrix<f64> {
        let s = self.dim * self.k;
        DMatrix::from_column_slice(self.dim, self.k, &self.tangents[i * s..(i + 1) * s])
    }

    pub fn seed(&self, i: usize) -> &[f64] {
        &self.seeds[i * self.k..(i + 1) * self.k]
    }

    pub fn total_mass(&self) -> f64 {
        pairwise_sum(&self.weights)
    }

    pub fn max_generation(&self) -> u32 {
        self.generations.iter().copied().max().unwrap_or(0)
    }

    /// Largest `|f(previous) − point|` over particles past generation 0.
    pub fn itinerary_residual(&self, sys: &dyn DynamicalSystem) -> f64 {
        (0..self.len())
            .filter(|&i| self.generations[i] > 0)
            .map(|i| sys.distance(&sys.map(&self.previous_point(i)), &self.point(i)))
            .fold(0.0, f64::max)
    }

    fn push(&mut self, s: &ParticleState, weight: f64, seed: &[f64], generation: u32, seed_log_det: f64) {
        self.points.extend(s.point.iter());
        self.previous.extend(s.previous.iter());
        self.tangents.extend(s.tangent.iter());
        self.weights.push(weight);
        self.seeds.extend_from_slice(seed);
        self.generations.push(generation);
        self.log_jac.push(s.log_jac);
        self.seed_log_det.push(seed_log_det);
    }

    fn copy_particle(&mut self, from: &EmpiricalMeasure, i: usize, weight: f64) {
        let (d, k) = (self.dim, self.k);
        self.points.extend_from_slice(&from.points[i * d..(i + 1) * d]);
        self.previous.extend_from_slice(&from.previous[i * d..(i + 1) * d]);
        self.tangents.extend_from_slice(&from.tangents[i * d * k..(i + 1) * d * k]);
        self.weights.push(weight);
        self.seeds.extend_from_slice(&from.seeds[i * k..(i + 1) * k]);
        self.generations.push(from.generations[i]);
        self.log_jac.push(from.log_jac[i]);
        self.seed_log_det.push(from.seed_log_det[i]);
    }

    /// Scales weights to unit total mass.
    pub fn normalize(&mut self) -> Result<()> {
        let total = self.total_mass();
        if !(total > 0.0) {
            return Err(Error::Contract("measure has no mass".into()));
        }
        self.weights.iter_mut().for_each(|w| *w /= total);
        Ok(())
    }

    /// One row per particle: coordinates, weight, generation.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        writeln!(w, "{},weight,generation", header.join(","))?;
        for i in 0..self.len() {
            let coords: Vec<String> = self.point_slice(i).iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{},{:.17e},{}", coords.join(","), self.weights[i], self.generations[i])?;
        }
        Ok(())
    }

    /// Little-endian snapshot of every particle field.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        for v in [self.dim as u64, self.k as u64, self.len() as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        for block in [&self.points, &self.previous, &self.tangents, &self.weights, &self.seeds, &self.log_jac, &self.seed_log_det] {
            for v in block.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for g in &self.generations {
            w.write_all(&g.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::InvalidInput("not a measure snapshot".into()));
        }
        let mut word = [0u8; 8];
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            r.read_exact(&mut word)?;
            *h = u64::from_le_bytes(word) as usize;
        }
        let [dim, k, n] = header;
        let mut read_block = |len: usize| -> Result<Vec<f64>> {
            (0..len)
                .map(|_| {
                    r.read_exact(&mut word)?;
                    Ok(f64::from_le_bytes(word))
                })
                .collect()
        };
        let points = read_block(n * dim)?;
        let previous = read_block(n * dim)?;
        let tangents = read_block(n * dim * k)?;
        let weights = read_block(n)?;
        let seeds = read_block(n * k)?;
        let log_jac = read_block(n)?;
        let seed_log_det = read_block(n)?;
        let mut half = [0u8; 4];
        let generations = (0..n)
            .map(|_| {
                r.read_exact(&mut half)?;
                Ok(u32::from_le_bytes(half))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, k, points, previous, tangents, weights, seeds, generations, log_jac, seed_log_det })
    }
}

fn log_abs_det(m: DMatrix<f64>) -> f64 {
    m.determinant().abs().ln()
}

/// Source state of a seed particle with coordinates `xi` on `disc`.
fn lift(sys: &dyn DynamicalSystem, disc: &UnstableDisc, xi: &DVector<f64>) -> (ParticleState, f64) {
    let point = disc.point(sys, xi);
    let mut tangent = disc.tangent(xi);
    normalize_columns(&mut tangent, sys.space());
    let seed_log_det = log_abs_det(disc.frame.u_rows() * &tangent);
    (ParticleState { previous: point.clone(), point, tangent, log_jac: 0.0 }, seed_log_det)
}

/// One application of `f` with the `J^u` of the step.
fn step(sys: &dyn DynamicalSystem, field: Option<&BasisField>, s: &mut ParticleState) -> Result<()> {
    let fx = sys.map(&s.point);
    let df = sys.derivative(&s.point);
    let mut next = &df * &s.tangent;
    normalize_columns(&mut next, sys.space());
    let jac = if s.tangent.ncols() == 1 {
        sys.space().norm(&(&df * s.tangent.column(0)))
    } else {
        let field = field.ok_or_else(|| Error::Contract("unstable dimension above 1 needs a basis field".into()))?;
        let at = LocalFrame::new(s.point.clone(), s.tangent.clone(), center_stable_frame(sys, &s.point, 40)?)?;
        let to = LocalFrame::new(fx.clone(), next.clone(), center_stable_frame(sys, &fx, 40)?)?;
        unstable_jacobian(sys, field, &at, &to)?
    };
    s.previous = std::mem::replace(&mut s.point, fx);
    s.tangent = next;
    s.log_jac += jac.ln();
    Ok(())
}

fn evolve(sys: &dyn DynamicalSystem, field: Option<&BasisField>, s: &mut ParticleState, steps: usize, index: usize) -> Result<()> {
    for j in 0..steps {
        step(sys, field, s)?;
        if !sys.in_trapping_region(&s.point) {
            return Err(Error::Domain(format!("particle {index} left the trapping region at step {}", j + 1)));
        }
    }
    Ok(())
}

fn seed_coords(halton: &Halton, idx: usize, delta: f64) -> DVector<f64> {
    DVector::from_iterator(halton.dim(), halton.point(idx as u64).into_iter().map(|u| delta * (2.0 * u - 1.0)))
}

/// Normalized Lebesgue measure on `disc`, sampled by a scrambled Halton
/// sequence in `E^u(δ)` coordinates and lifted through the graph.
pub fn seed_measure(
    sys: &dyn DynamicalSystem,
    disc: &UnstableDisc,
    n_particles: usize,
    seed: u64,
    exec: Execution,
) -> Result<EmpiricalMeasure> {
    if n_particles < MIN_SEED_PARTICLES {
        return Err(Error::InvalidInput(format!("at least {MIN_SEED_PARTICLES} particles required, got {n_particles}")));
    }
    check_disc(sys, disc)?;
    let halton = Halton::skipping(disc.k(), SEED_PRIME_SKIP, seed, "seed-0");
    let states = par::map_indexed(exec, n_particles, |i| {
        let xi = seed_coords(&halton, i, disc.delta);
        let (s, det) = lift(sys, disc, &xi);
        (s, det, xi)
    });
    let mut m = EmpiricalMeasure::with_capacity(sys.dim(), disc.k(), n_particles);
    let w = 1.0 / n_particles as f64;
    for (s, det, xi) in &states {
        m.push(s, w, xi.as_slice(), 0, *det);
    }
    Ok(m)
}

fn check_disc(sys: &dyn DynamicalSystem, disc: &UnstableDisc) -> Result<()> {
    if disc.frame.point.len() != sys.dim() || !(disc.delta > 0.0) || !disc.delta.is_finite() {
        return Err(Error::Contract("seed disc does not belong to this system".into()));
    }
    Ok(())
}

/// Applies `f` `steps` times to every particle.
pub fn push_forward(
    sys: &dyn DynamicalSystem,
    field: Option<&BasisField>,
    measure: &EmpiricalMeasure,
    steps: usize,
    exec: Execution,
) -> Result<EmpiricalMeasure> {
    if steps == 0 {
        return Err(Error::InvalidInput("push-forward needs at least one step".into()));
    }
    let states = par::try_map_indexed(exec, measure.len(), |i| {
        let mut s = ParticleState {
            point: measure.point(i),
            previous: measure.previous_point(i),
            tangent: measure.tangent(i),
            log_jac: measure.log_jac[i],
        };
        evolve(sys, field, &mut s, steps, i)?;
        Ok::<_, Error>(s)
    })?;
    let mut out = EmpiricalMeasure::with_capacity(measure.dim, measure.k, measure.len());
    for (i, s) in states.iter().enumerate() {
        out.push(s, measure.weights[i], measure.seed(i), measure.generations[i] + steps as u32, measure.seed_log_det[i]);
    }
    Ok(out)
}

fn boundary_distance(seed: &[f64], delta: f64) -> f64 {
    delta - seed.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Drops particles whose source lies within the leak threshold of `∂L` for
/// their generation; returns the renormalized remainder and the dropped mass.
pub fn trim_boundary_leak(measure: &EmpiricalMeasure, leak: &LeakModel) -> Result<(EmpiricalMeasure, f64)> {
    let total = measure.total_mass();
    let mut kept = EmpiricalMeasure::with_capacity(measure.dim, measure.k, measure.len());
    let mut dropped = Vec::new();
    for i in 0..measure.len() {
        if boundary_distance(measure.seed(i), leak.delta) < leak.threshold(measure.generations[i] as usize) {
            dropped.push(measure.weights[i]);
        } else {
            kept.copy_particle(measure, i, measure.weights[i]);
        }
    }
    let leaked = pairwise_sum(&dropped) / total;
    if !kept.is_empty() {
        kept.normalize()?;
    }
    Ok((kept, leaked))
}

/// Leaked fraction of a generation-0 measure for thresholds at `n = 1..=n_max`.
pub fn leak_profile(seed: &EmpiricalMeasure, leak: &LeakModel, n_max: usize) -> Vec<f64> {
    let total = seed.total_mass();
    let dist: Vec<f64> = (0..seed.len()).map(|i| boundary_distance(seed.seed(i), leak.delta)).collect();
    (1..=n_max)
        .map(|n| {
            let t = leak.threshold(n);
            let w: Vec<f64> = dist.iter().zip(&seed.weights).filter(|(d, _)| **d < t).map(|(_, w)| *w).collect();
            pairwise_sum(&w) / total
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LeakFit {
    pub gamma: f64,
    pub rate: f64,
    /// Standard error of `rate` from the least-squares residuals.
    pub rate_stderr: f64,
    pub points: usize,
}

/// Least-squares fit of `leaked(n) ≈ γ e^{−rate·n}` over entries with at
/// least `min_mass`. Saturated entries (the whole disc leaks) are skipped.
pub fn fit_leak_rate(profile: &[f64], min_mass: f64) -> LeakFit {
    let pts: Vec<(f64, f64)> =
        profile.iter().enumerate().filter(|(_, l)| **l >= min_mass && **l < 1.0).map(|(i, l)| ((i + 1) as f64, l.ln())).collect();
    let n = pts.len();
    if n < 2 {
        return LeakFit { gamma: f64::NAN, rate: f64::NAN, rate_stderr: f64::INFINITY, points: n };
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    let intercept = my - slope * mx;
    let rate_stderr = if n > 2 {
        let rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (rss / (nf - 2.0) / sxx).sqrt()
    } else {
        f64::INFINITY
    };
    LeakFit { gamma: intercept.exp(), rate: -slope, rate_stderr, points: n }
}

#[derive(Clone, Debug)]
pub struct CesaroAverage {
    pub measure: EmpiricalMeasure,
    pub horizon: usize,
    pub particles_per_generation: Vec<usize>,
    /// Fraction of each generation removed by the leak trim.
    pub leaked_by_generation: Vec<f64>,
}

impl CesaroAverage {
    /// The average at a shorter horizon, built from the same generations.
    pub fn truncated(&self, horizon: usize) -> Result<CesaroAverage> {
        if horizon == 0 || horizon > self.horizon {
            return Err(Error::InvalidInput(format!("horizon {horizon} outside 1..={}", self.horizon)));
        }
        let m = &self.measure;
        let mut out = EmpiricalMeasure::with_capacity(m.dim, m.k, m.len());
        for i in 0..m.len() {
            if (m.generations[i] as usize) < horizon {
                out.copy_particle(m, i, m.weights[i]);
            }
        }
        out.normalize()?;
        Ok(CesaroAverage {
            measure: out,
            horizon,
            particles_per_generation: self.particles_per_generation[..horizon].to_vec(),
            leaked_by_generation: self.leaked_by_generation[..horizon].to_vec(),
        })
    }
}

/// A particle kept after the leak trim: state, seed determinant, seed coordinates, generation.
type Survivor = (ParticleState, f64, DVector<f64>, usize);

/// `(1/n) Σ_{g<n} f^g(λ_L|_{L∖L_g})`, normalized. Generation `g` is sampled
/// by its own Halton prefix of `N/n` points pushed `g` times.
#[allow(clippy::too_many_arguments)]
pub fn cesaro_average(
    sys: &dyn DynamicalSystem,
    field: Option<&BasisField>,
    disc: &UnstableDisc,
    leak: &LeakModel,
    horizon: usize,
    n_particles: usize,
    seed: u64,
    exec: Execution,
) -> Result<CesaroAverage> {
    if horizon == 0 {
        return Err(Error::InvalidInput("Cesàro horizon must be positive".into()));
    }
    if n_particles < horizon {
        return Err(Error::InvalidInput("fewer particles than generations".into()));
    }
    check_disc(sys, disc)?;
    let base = n_particles / horizon;
    let counts: Vec<usize> = (0..horizon).map(|g| base + usize::from(g < n_particles % horizon)).collect();
    let mut offsets = vec![0usize; horizon + 1];
    for g in 0..horizon {
        offsets[g + 1] = offsets[g] + counts[g];
    }
    let haltons: Vec<Halton> = (0..horizon).map(|g| Halton::skipping(disc.k(), SEED_PRIME_SKIP, seed, &format!("seed-{g}"))).collect();
    let thresholds: Vec<f64> = (0..horizon).map(|g| leak.threshold(g)).collect();
    let total = offsets[horizon];
    let states = par::try_map_indexed(exec, total, |i| -> Result<Option<Survivor>> {
        let g = offsets.partition_point(|&o| o <= i) - 1;
        let xi = seed_coords(&haltons[g], i - offsets[g], disc.delta);
        if boundary_distance(xi.as_slice(), disc.delta) < thresholds[g] {
            return Ok(None);
        }
        let (mut s, det) = lift(sys, disc, &xi);
        evolve(sys, field, &mut s, g, i)?;
        Ok(Some((s, det, xi, g)))
    })?;
    let mut kept = vec![0usize; horizon];
    for t in states.iter().flatten() {
        kept[t.3] += 1;
    }
    let mut measure = EmpiricalMeasure::with_capacity(sys.dim(), disc.k(), total);
    for (s, det, xi, g) in states.iter().flatten() {
        measure.push(s, 1.0 / (horizon as f64 * counts[*g] as f64), xi.as_slice(), *g as u32, *det);
    }
    if measure.is_empty() {
        return Err(Error::Contract("every particle was trimmed".into()));
    }
    measure.normalize()?;
    let leaked_by_generation = (0..horizon).map(|g| 1.0 - kept[g] as f64 / counts[g] as f64).collect();
    Ok(CesaroAverage { measure, horizon, particles_per_generation: counts, leaked_by_generation })
}

/// Weighted Kolmogorov-Smirnov distance to the uniform law on `[lo, hi]`.
pub fn ks_uniform(values: &[f64], weights: Option<&[f64]>, lo: f64, hi: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..values.len()).map(w).sum();
    let mut acc = 0.0;
    let mut worst = 0.0f64;
    for &i in &idx {
        let f = ((values[i] - lo) / (hi - lo)).clamp(0.0, 1.0);
        worst = worst.max((f - acc / total).abs());
        acc += w(i);
        worst = worst.max((acc / total - f).abs());
    }
    worst
}

/// Total-variation distance between the marginal on coordinate `axis`
/// (histogram of `bins` cells on `[lo, hi)`) and the uniform law.
pub fn marginal_tv_uniform(measure: &EmpiricalMeasure, axis: usize, lo: f64, hi: f64, bins: usize) -> f64 {
    let hist = marginal_histogram(measure, axis, lo, hi, bins);
    0.5 * hist.iter().map(|m| (m - 1.0 / bins as f64).abs()).sum::<f64>()
}

/// Normalized histogram of coordinate `axis`.
pub fn marginal_histogram(measure: &EmpiricalMeasure, axis: usize, lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); bins];
    for i in 0..measure.len() {
        let v = measure.point_slice(i)[axis];
        let b = (((v - lo) / (hi - lo)) * bins as f64).floor().clamp(0.0, bins as f64 - 1.0) as usize;
        cells[b].push(measure.weights[i]);
    }
    let total = measure.total_mass();
    cells.iter().map(|c| pairwise_sum(c) / total).collect()
}

/// Diameter of the `E^cs` coordinates of the particles in the splitting at
/// `frame`.
pub fn cs_spread(sys: &dyn DynamicalSystem, measure: &EmpiricalMeasure, frame: &LocalFrame) -> f64 {
    let c = frame.ecs.ncols();
    let mut lo = vec![f64::INFINITY; c];
    let mut hi = vec![f64::NEG_INFINITY; c];
    for i in 0..measure.len() {
        let (_, b) = frame.split(&sys.displacement(&frame.point, &measure.point(i)));
        for j in 0..c {
            lo[j] = lo[j].min(b[j]);
            hi[j] = hi[j].max(b[j]);
        }
    }
    (0..c).map(|j| hi[j] - lo[j]).fold(0.0, f64::max)
}

/// Configuration of a transversal box.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct BoxSettings {
    /// Half-width of the box in `E^cs_x` coordinates.
    pub epsilon: f64,
    /// Half-width of the common fibre domain `E^u_x(ρ0)`.
    pub rho0: f64,
    /// Cell width of the transversal binning.
    pub cell_width: f64,
    pub boundary_shell: f64,
    pub boundary_tol: f64,
}

impl Default for BoxSettings {
    fn default() -> Self {
        Self { epsilon: 0.1, rho0: 0.25, cell_width: 0.01, boundary_shell: 1e-3, boundary_tol: 1e-3 }
    }
}

/// A connected cluster of occupied transversal cells.
#[derive(Clone, Debug, Serialize)]
pub struct Fiber {
    pub id: usize,
    pub cells: usize,
    pub samples: usize,
    /// Bounding box of the cluster in shape-corrected `E^cs` coordinates.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Local product chart at an attractor point: a union of unstable fibres
/// over the common domain `E^u_x(ρ0)`, indexed by transversal clusters.
#[derive(Clone, Debug)]
pub struct TransversalBox {
    /// Disc through the anchor whose graph straightens the fibres.
    pub disc: UnstableDisc,
    pub settings: BoxSettings,
    pub rho0_requested: f64,
    pub fibers: Vec<Fiber>,
    /// Clusters that cross the `E^cs` window and were left out.
    pub excluded_clusters: usize,
    cells: HashMap<Vec<i64>, usize>,
}

/// Box coordinates of one particle.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxCoords {
    pub u: DVector<f64>,
    /// `η − h_x(u)`: the `E^cs` offset from the anchor disc.
    pub transversal: DVector<f64>,
}

fn cell_of(v: &DVector<f64>, w: f64) -> Vec<i64> {
    v.iter().map(|x| (x / w).floor() as i64).collect()
}

fn neighbors(cell: &[i64]) -> Vec<Vec<i64>> {
    let m = cell.len();
    let mut out = Vec::with_capacity(3usize.pow(m as u32));
    for code in 0..3usize.pow(m as u32) {
        let mut c = cell.to_vec();
        let mut r = code;
        for x in c.iter_mut() {
            *x += (r % 3) as i64 - 1;
            r /= 3;
        }
        out.push(c);
    }
    out
}

impl TransversalBox {
    pub fn anchor(&self) -> &DVector<f64> {
        self.disc.base()
    }

    pub fn k(&self) -> usize {
        self.disc.k()
    }

    /// Coordinates of `p`, or `None` when its `E^u` coordinate leaves the
    /// anchor disc.
    pub fn coords(&self, sys: &dyn DynamicalSystem, p: &DVector<f64>) -> Option<BoxCoords> {
        let (u, eta) = self.disc.local_coords(sys, p);
        if !self.disc.contains_coords(&u) {
            return None;
        }
        let (h, _) = self.disc.eval(&u);
        Some(BoxCoords { u, transversal: eta - h })
    }

    /// Cluster owning the transversal coordinate, if unambiguous.
    pub fn fiber_of(&self, transversal: &DVector<f64>) -> Option<usize> {
        let cell = cell_of(transversal, self.settings.cell_width);
        if let Some(&f) = self.cells.get(&cell) {
            return Some(f);
        }
        let mut found = None;
        for n in neighbors(&cell) {
            if let Some(&f) = self.cells.get(&n) {
                match found {
                    None => found = Some(f),
                    Some(g) if g != f => return None,
                    _ => {}
                }
            }
        }
        found
    }

    pub fn in_domain(&self, u: &DVector<f64>) -> bool {
        u.iter().all(|x| x.abs() <= self.settings.rho0)
    }

    /// The same box with the transversal cells split `levels` times.
    pub fn refined(&self, sys: &dyn DynamicalSystem, samples: &[DVector<f64>], levels: usize) -> Result<TransversalBox> {
        let mut s = self.settings;
        s.cell_width /= f64::powi(2.0, levels as i32);
        build_box_from_disc(sys, self.disc.clone(), samples, s, None)
    }
}

/// Builds the box at the base of `disc` from attractor samples.
///
/// `rho_max` is the largest radius at which the sampled unstable discs were
/// found coherent; a larger `ρ0` is shrunk to it.
pub fn build_transversal(
    sys: &dyn DynamicalSystem,
    disc: &UnstableDisc,
    samples: &[DVector<f64>],
    settings: BoxSettings,
    rho_max: Option<f64>,
) -> Result<TransversalBox> {
    build_box_from_disc(sys, disc.clone(), samples, settings, rho_max)
}

fn build_box_from_disc(
    sys: &dyn DynamicalSystem,
    disc: UnstableDisc,
    samples: &[DVector<f64>],
    mut settings: BoxSettings,
    rho_max: Option<f64>,
) -> Result<TransversalBox> {
    if !(settings.epsilon > 0.0 && settings.rho0 > 0.0 && settings.cell_width > 0.0) {
        return Err(Error::InvalidInput("box widths must be positive".into()));
    }
    let rho0_requested = settings.rho0;
    let cap = rho_max.unwrap_or(f64::INFINITY).min(disc.delta);
    if settings.rho0 > cap {
        settings.rho0 = cap;
    }
    let mut bx = TransversalBox { disc, settings, rho0_requested, fibers: Vec::new(), excluded_clusters: 0, cells: HashMap::new() };
    let w = settings.cell_width;
    let mut occupied: BTreeMap<Vec<i64>, usize> = BTreeMap::new();
    for p in samples {
        if let Some(c) = bx.coords(sys, p) {
            if bx.in_domain(&c.u) && c.transversal.iter().all(|t| t.abs() <= settings.epsilon + 2.0 * w) {
                *occupied.entry(cell_of(&c.transversal, w)).or_default() += 1;
            }
        }
    }
    let mut label: BTreeMap<Vec<i64>, usize> = BTreeMap::new();
    let mut clusters: Vec<Vec<Vec<i64>>> = Vec::new();
    for start in occupied.keys() {
        if label.contains_key(start) {
            continue;
        }
        let id = clusters.len();
        let mut members = Vec::new();
        let mut queue = VecDeque::from([start.clone()]);
        label.insert(start.clone(), id);
        while let Some(c) = queue.pop_front() {
            for n in neighbors(&c) {
                if occupied.contains_key(&n) && !label.contains_key(&n) {
                    label.insert(n.clone(), id);
                    queue.push_back(n);
                }
            }
            members.push(c);
        }
        clusters.push(members);
    }
    let eps = settings.epsilon;
    for members in clusters {
        let inside = members.iter().all(|c| c.iter().all(|&i| i as f64 * w >= -eps && (i + 1) as f64 * w <= eps));
        if !inside {
            bx.excluded_clusters += 1;
            continue;
        }
        let id = bx.fibers.len();
        let m = members[0].len();
        let mut lo = vec![f64::INFINITY; m];
        let mut hi = vec![f64::NEG_INFINITY; m];
        let mut count = 0;
        for c in &members {
            for j in 0..m {
                lo[j] = lo[j].min(c[j] as f64 * w);
                hi[j] = hi[j].max((c[j] + 1) as f64 * w);
            }
            count += occupied[c];
            if bx.cells.insert(c.clone(), id).is_some() {
                return Err(Error::Coherence("transversal cell claimed by two fibres".into()));
            }
        }
        bx.fibers.push(Fiber { id, cells: members.len(), samples: count, lo, hi });
    }
    if bx.fibers.is_empty() {
        return Err(Error::Coverage("no attractor fibre lies inside the transversal window".into()));
    }
    Ok(bx)
}

/// Per-particle box data.
#[derive(Clone, Debug)]
pub struct BoxAssignment {
    /// `E^u_x` coordinates (`k` per particle); `NaN` outside the anchor disc.
    pub u: Vec<f64>,
    pub fiber: Vec<Option<u32>>,
    /// `log det(π^u_x|E^u_z)`.
    pub proj_log_det: Vec<f64>,
    /// Mass within the boundary shell of the box.
    pub boundary_mass: f64,
    /// Mass of the box.
    pub box_mass: f64,
}

impl BoxAssignment {
    pub fn u_of(&self, k: usize, i: usize) -> &[f64] {
        &self.u[i * k..(i + 1) * k]
    }

    pub fn boundary_ok(&self, settings: &BoxSettings) -> bool {
        self.boundary_mass < settings.boundary_tol
    }
}

pub fn assign_particles(sys: &dyn DynamicalSystem, bx: &TransversalBox, measure: &EmpiricalMeasure, exec: Execution) -> BoxAssignment {
    let k = measure.k;
    let s = bx.settings;
    let u_rows = bx.disc.frame.u_rows();
    let rows = par::map_indexed(exec, measure.len(), |i| {
        let Some(c) = bx.coords(sys, &measure.point(i)) else {
            return (vec![f64::NAN; k], None, f64::NAN, false);
        };
        let umax = c.u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let tmax = c.transversal.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let fiber = if umax <= s.rho0 { bx.fiber_of(&c.transversal).map(|f| f as u32) } else { None };
        let near_u = (umax - s.rho0).abs() <= s.boundary_shell && tmax <= s.epsilon + s.boundary_shell;
        let near_cs = (tmax - s.epsilon).abs() <= s.boundary_shell && umax <= s.rho0 + s.boundary_shell;
        let det = if fiber.is_some() { log_abs_det(&u_rows * measure.tangent(i)) } else { f64::NAN };
        (c.u.iter().copied().collect(), fiber, det, near_u || near_cs)
    });
    let mut a = BoxAssignment {
        u: Vec::with_capacity(measure.len() * k),
        fiber: Vec::with_capacity(measure.len()),
        proj_log_det: Vec::with_capacity(measure.len()),
        boundary_mass: 0.0,
        box_mass: 0.0,
    };
    let mut shell = Vec::new();
    let mut inside = Vec::new();
    for (i, (u, f, d, near)) in rows.into_iter().enumerate() {
        a.u.extend(u);
        if f.is_some() {
            inside.push(measure.weights[i]);
        }
        if near {
            shell.push(measure.weights[i]);
        }
        a.fiber.push(f);
        a.proj_log_det.push(d);
    }
    let total = measure.total_mass();
    a.boundary_mass = pairwise_sum(&shell) / total;
    a.box_mass = pairwise_sum(&inside) / total;
    a
}

/// Unnormalized push-forward density `ρ(z)` in `E^u_x` coordinates.
pub fn raw_density(measure: &EmpiricalMeasure, assignment: &BoxAssignment, i: usize) -> f64 {
    (measure.seed_log_det[i] - measure.log_jac[i] - assignment.proj_log_det[i]).exp()
}

/// Status of a particle in the density evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PieceStatus {
    OutsideBox,
    /// On a piece of `f^n L` that does not cross the whole box.
    Partial,
    Full {
        piece: usize,
    },
}

/// `p_n` for every particle of the box, normalized over each piece of `f^n L`.
#[derive(Clone, Debug)]
pub struct DensityField {
    pub status: Vec<PieceStatus>,
    pub p: Vec<f64>,
    pub pieces: usize,
    pub partial_pieces: usize,
    /// Largest `|p − p_trap|` against the trapezoid normalization.
    pub trapezoid_deviation: f64,
}

impl DensityField {
    pub fn evaluated(&self) -> impl Iterator<Item = f64> + '_ {
        self.status.iter().zip(&self.p).filter(|(s, _)| matches!(s, PieceStatus::Full { .. })).map(|(_, p)| *p)
    }

    pub fn range(&self) -> (f64, f64) {
        self.evaluated().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p), hi.max(p)))
    }

    pub fn within(&self, c: f64) -> bool {
        self.evaluated().all(|p| p >= 1.0 / c && p <= c)
    }
}

/// Splits each generation, in seed order, into pieces: maximal runs of
/// particles in one fibre whose box coordinates advance consistently with
/// their seeds. Runs touching the ends of the trimmed seed interval are
/// partial.
pub fn density_field(measure: &EmpiricalMeasure, assignment: &BoxAssignment) -> Result<DensityField> {
    if measure.k != 1 {
        return Err(Error::Contract("piece detection is implemented for one-dimensional unstable bundles".into()));
    }
    let n = measure.len();
    let mut status = vec![PieceStatus::OutsideBox; n];
    let mut p = vec![f64::NAN; n];
    let mut by_gen: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        by_gen.entry(measure.generations[i]).or_default().push(i);
    }
    let rho: Vec<f64> =
        (0..n).map(|i| if assignment.fiber[i].is_some() { raw_density(measure, assignment, i) } else { f64::NAN }).collect();
    let mut pieces = 0;
    let mut partial = 0;
    let mut trap_dev = 0.0f64;
    for idx in by_gen.values_mut() {
        idx.sort_by(|&a, &b| measure.seeds[a].total_cmp(&measure.seeds[b]));
        let last = idx.len() - 1;
        let mut j = 0;
        while j <= last {
            let i = idx[j];
            let Some(f) = assignment.fiber[i] else {
                j += 1;
                continue;
            };
            let mut run = vec![i];
            let mut touches_end = j == 0;
            while j < last {
                let (a, b) = (idx[j], idx[j + 1]);
                if assignment.fiber[b] != Some(f) {
                    break;
                }
                let du = assignment.u[b] - assignment.u[a];
                let expected = (measure.seeds[b] - measure.seeds[a]) * 0.5 * (1.0 / rho[a] + 1.0 / rho[b]);
                if (du.abs() - expected).abs() > 0.1 * expected + 1e-12 {
                    break;
                }
                j += 1;
                run.push(b);
            }
            touches_end |= j == last;
            j += 1;
            if touches_end {
                partial += 1;
                for &r in &run {
                    status[r] = PieceStatus::Partial;
                }
                continue;
            }
            let inv: Vec<f64> = run.iter().map(|&r| 1.0 / rho[r]).collect();
            let mean_inv = pairwise_sum(&inv) / run.len() as f64;
            for &r in &run {
                status[r] = PieceStatus::Full { piece: pieces };
                p[r] = rho[r] * mean_inv;
            }
            if run.len() >= 3 {
                let mut sorted = run.clone();
                sorted.sort_by(|&a, &b| assignment.u[a].total_cmp(&assignment.u[b]));
                let span = assignment.u[sorted[sorted.len() - 1]] - assignment.u[sorted[0]];
                let integral: f64 =
                    sorted.windows(2).map(|w| 0.5 * (rho[w[0]] + rho[w[1]]) * (assignment.u[w[1]] - assignment.u[w[0]])).sum();
                if span > 0.0 && integral > 0.0 {
                    for &r in &run {
                        trap_dev = trap_dev.max((p[r] - rho[r] * span / integral).abs());
                    }
                }
            }
            pieces += 1;
        }
    }
    Ok(DensityField { status, p, pieces, partial_pieces: partial, trapezoid_deviation: trap_dev })
}

/// `p_n(z)` for the particle `index`.
pub fn density_pn(field: &DensityField, index: usize) -> Result<f64> {
    match field.status.get(index) {
        None => Err(Error::InvalidInput(format!("no particle {index}"))),
        Some(PieceStatus::OutsideBox) => Err(Error::Coverage(format!("particle {index} is not in the box"))),
        Some(PieceStatus::Partial) => Err(Error::PartialFiber(format!("particle {index} lies on a piece that does not cross the box"))),
        Some(PieceStatus::Full { .. }) => Ok(field.p[index]),
    }
}

/// A finite union of coordinate boxes in `E^u_x(ρ0)`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BaseSet {
    pub boxes: Vec<Vec<(f64, f64)>>,
}

impl BaseSet {
    pub fn full(k: usize, rho0: f64) -> Self {
        Self { boxes: vec![vec![(-rho0, rho0); k]] }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        self.boxes.iter().any(|b| b.iter().zip(u).all(|((lo, hi), x)| *x >= *lo && *x < *hi))
    }

    /// Lebesgue measure, assuming the boxes are disjoint.
    pub fn volume(&self) -> f64 {
        self.boxes.iter().map(|b| b.iter().map(|(lo, hi)| (hi - lo).max(0.0)).product::<f64>()).sum()
    }
}

/// `μ(A_{S,F})`: the mass of particles on fibres in `fibers` over `base`.
pub fn cylinder_measure(measure: &EmpiricalMeasure, assignment: &BoxAssignment, fibers: &[usize], base: &BaseSet) -> f64 {
    let k = measure.k;
    let w: Vec<f64> = (0..measure.len())
        .filter(|&i| assignment.fiber[i].is_some_and(|f| fibers.contains(&(f as usize))) && base.contains(assignment.u_of(k, i)))
        .map(|i| measure.weights[i])
        .collect();
    pairwise_sum(&w) / measure.total_mass()
}

#[derive(Clone, Debug, Serialize)]
pub struct CylinderCheck {
    pub fibers: Vec<usize>,
    pub base: BaseSet,
    pub mass: f64,
    /// `ν(S) · μ_{η_x}(F)`.
    pub product: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SandwichReport {
    pub c: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub passed: bool,
    pub cylinders: Vec<CylinderCheck>,
}

/// Compares `μ(A_{S,F})` with `ν(S) μ_{η_x}(F)` on random cylinders.
pub fn cylinder_sandwich(
    measure: &EmpiricalMeasure,
    bx: &TransversalBox,
    assignment: &BoxAssignment,
    c: f64,
    count: usize,
    seed: u64,
) -> SandwichReport {
    let k = measure.k;
    let rho0 = bx.settings.rho0;
    let nf = bx.fibers.len();
    let domain = (2.0 * rho0).powi(k as i32);
    let mut fiber_mass = vec![Vec::new(); nf];
    for i in 0..measure.len() {
        if let Some(f) = assignment.fiber[i] {
            fiber_mass[f as usize].push(measure.weights[i]);
        }
    }
    let total = measure.total_mass();
    let nu: Vec<f64> = fiber_mass.iter().map(|w| pairwise_sum(w) / total).collect();
    let mut cylinders = Vec::with_capacity(count);
    for idx in 0..count {
        let mut rng = stream_rng(seed, "cylinders", idx as u64);
        let mut fibers: Vec<usize> = (0..nf).filter(|_| rng.gen_bool(0.5)).collect();
        if fibers.is_empty() {
            fibers.push(rng.gen_range(0..nf));
        }
        let side: Vec<(f64, f64)> = (0..k)
            .map(|_| {
                let len = rng.gen_range(0.3..=1.0) * 2.0 * rho0;
                let lo = -rho0 + rng.gen_range(0.0..=1.0) * (2.0 * rho0 - len);
                (lo, lo + len)
            })
            .collect();
        let base = BaseSet { boxes: vec![side] };
        let mass = cylinder_measure(measure, assignment, &fibers, &base);
        let product = fibers.iter().map(|&f| nu[f]).sum::<f64>() * base.volume() / domain;
        let ratio = if product > 0.0 { mass / product } else { f64::NAN };
        cylinders.push(CylinderCheck { fibers, base, mass, product, ratio });
    }
    let ratios: Vec<f64> = cylinders.iter().map(|c| c.ratio).collect();
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let max_ratio = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let passed = ratios.iter().all(|r| r.is_finite() && *r >= 1.0 / c && *r <= c);
    SandwichReport { c, min_ratio, max_ratio, passed, cylinders }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    SrbConsistent,
    Inconsistent,
}

#[derive(Clone, Debug, Serialize)]
pub struct FiberDensity {
    pub fiber: usize,
    pub particles: usize,
    pub mass: f64,
    pub bins: usize,
    /// Histogram mass of each cell relative to normalized Lebesgue.
    pub ratios: Vec<f64>,
    /// Smallest and largest of `ratios`.
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub ks: f64,
    /// Heaviest particle relative to the mean particle weight.
    pub max_atom: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub within: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionalReport {
    pub c: f64,
    pub min_particles: usize,
    pub fibers: Vec<FiberDensity>,
    pub skipped: usize,
    pub verdict: Verdict,
}

/// Histogram of the conditional measure on each fibre against Lebesgue on
/// `E^u_x(ρ0)`.
pub fn conditional_density_report(
    measure: &EmpiricalMeasure,
    bx: &TransversalBox,
    assignment: &BoxAssignment,
    density: Option<&DensityField>,
    c: f64,
    min_particles: usize,
) -> ConditionalReport {
    let k = measure.k;
    let rho0 = bx.settings.rho0;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bx.fibers.len()];
    for i in 0..measure.len() {
        if let Some(f) = assignment.fiber[i] {
            members[f as usize].push(i);
        }
    }
    let mut fibers = Vec::new();
    let mut skipped = 0;
    for (f, idx) in members.iter().enumerate() {
        if idx.len() < min_particles {
            skipped += 1;
            continue;
        }
        let per_axis = (((idx.len() / 100).clamp(1, 32) as f64).powf(1.0 / k as f64).floor() as usize).max(1);
        let bins = per_axis.pow(k as u32);
        let mut cells = vec![Vec::new(); bins];
        for &i in idx {
            let mut b = 0;
            for (j, x) in assignment.u_of(k, i).iter().enumerate() {
                let t = (((x + rho0) / (2.0 * rho0)) * per_axis as f64).floor().clamp(0.0, per_axis as f64 - 1.0) as usize;
                b += t * per_axis.pow(j as u32);
            }
            cells[b].push(measure.weights[i]);
        }
        let weights: Vec<f64> = idx.iter().map(|&i| measure.weights[i]).collect();
        let mass = pairwise_sum(&weights);
        let ratios: Vec<f64> = cells.iter().map(|c| pairwise_sum(c) / mass * bins as f64).collect();
        let ratio_min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        let ratio_max = ratios.iter().copied().fold(0.0, f64::max);
        let ks = if k == 1 {
            let u: Vec<f64> = idx.iter().map(|&i| assignment.u[i]).collect();
            ks_uniform(&u, Some(&weights), -rho0, rho0)
        } else {
            f64::NAN
        };
        let mean_w = mass / idx.len() as f64;
        let max_atom = weights.iter().copied().fold(0.0, f64::max) / mean_w;
        let (p_min, p_max) = density
            .map(|d| {
                idx.iter()
                    .filter(|&&i| matches!(d.status[i], PieceStatus::Full { .. }))
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(d.p[i]), hi.max(d.p[i])))
            })
            .unwrap_or((f64::NAN, f64::NAN));
        let within = ratio_min >= 1.0 / (2.0 * c) && ratio_max <= 2.0 * c && max_atom <= 5.0 * c;
        fibers.push(FiberDensity {
            fiber: f,
            particles: idx.len(),
            mass,
            bins,
            ratios,
            ratio_min,
            ratio_max,
            ks,
            max_atom,
            p_min,
            p_max,
            within,
        });
    }
    let verdict = if !fibers.is_empty() && fibers.iter().all(|f| f.within) { Verdict::SrbConsistent } else { Verdict::Inconsistent };
    ConditionalReport { c, min_particles, fibers, skipped, verdict }
}

#[derive(Clone, Debug, Serialize)]
pub struct RefinementLevel {
    pub level: usize,
    pub cell_width: f64,
    pub fibers: usize,
    pub retained: usize,
    pub skipped: usize,
    pub violations: usize,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, Serialize)]
pub struct RefinementReport {
    pub levels: Vec<RefinementLevel>,
    /// Violations never increase from one level to the next.
    pub monotone: bool,
    /// Every level is consistent.
    pub stable: bool,
}

/// Repeats the conditional-density report on dyadically refined transversal
/// partitions; level 1 is the base box.
#[allow(clippy::too_many_arguments)]
pub fn partition_refinement_check(
    sys: &dyn DynamicalSystem,
    measure: &EmpiricalMeasure,
    bx: &TransversalBox,
    samples: &[DVector<f64>],
    levels: usize,
    c: f64,
    min_particles: usize,
    exec: Execution,
) -> Result<RefinementReport> {
    if levels == 0 {
        return Err(Error::InvalidInput("at least one refinement level required".into()));
    }
    let mut out = Vec::with_capacity(levels);
    for level in 1..=levels {
        let b = if level == 1 { bx.clone() } else { bx.refined(sys, samples, level - 1)? };
        let a = assign_particles(sys, &b, measure, exec);
        let report = conditional_density_report(measure, &b, &a, None, c, min_particles);
        out.push(RefinementLevel {
            level,
            cell_width: b.settings.cell_width,
            fibers: b.fibers.len(),
            retained: report.fibers.len(),
            skipped: report.skipped,
            violations: report.fibers.iter().filter(|f| !f.within).count(),
            verdict: report.verdict,
        });
    }
    let monotone = out.windows(2).all(|w| w[1].violations <= w[0].violations);
    let stable = out.iter().all(|l| l.verdict == Verdict::SrbConsistent);
    Ok(RefinementReport { levels: out, monotone, stable })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifolds::compute_disc_chain;
    use crate::system::{sample_attractor, LinearHyperbolic, Solenoid};

    fn linear_disc() -> (LinearHyperbolic, UnstableDisc) {
        let sys = LinearHyperbolic::new(2.0, 0.5, None).unwrap();
        let sample = sample_attractor(&sys, 1, 80, 40, 5, Execution::Sequential).unwrap();
        let chain = compute_disc_chain(&sys, &sample.orbits[0], 1.0, 1e-12, 0).unwrap();
        (sys, chain.disc().clone())
    }

    fn leak() -> LeakModel {
        LeakModel { delta: 1.0, gamma0: 1.0, lambda0: 2f64.ln(), eps0: 0.001 }
    }

    #[test]
    fn seed_is_normalized_uniform_and_on_the_disc() {
        let (sys, disc) = linear_disc();
        let m = seed_measure(&sys, &disc, 4096, 3, Execution::Sequential).unwrap();
        assert!((m.total_mass() - 1.0).abs() < 1e-12);
        let u: Vec<f64> = (0..m.len()).map(|i| m.seed(i)[0]).collect();
        assert!(ks_uniform(&u, None, -1.0, 1.0) < 1.36 / (m.len() as f64).sqrt());
        for i in 0..m.len() {
            let (_, off) = disc.vertical_offset(&sys, &m.point(i));
            assert!(off < 1e-10);
        }
        assert!(seed_measure(&sys, &disc, 10, 3, Execution::Sequential).is_err());
    }

    #[test]
    fn push_forward_conserves_mass_and_itineraries() {
        let (sys, disc) = linear_disc();
        let m = seed_measure(&sys, &disc, 2000, 1, Execution::Sequential).unwrap();
        let p = push_forward(&sys, None, &m, 3, Execution::Sequential).unwrap();
        assert!((p.total_mass() - 1.0).abs() < 1e-12);
        assert!(p.itinerary_residual(&sys) < 1e-9);
        assert!(p.log_jac.iter().all(|l| (l - 3.0 * 2f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn trim_respects_linear_band_and_vanishes_late() {
        let (sys, disc) = linear_disc();
        let m = seed_measure(&sys, &disc, 20000, 1, Execution::Sequential).unwrap();
        let model = leak();
        for n in [2usize, 4, 6] {
            let p = push_forward(&sys, None, &m, n, Execution::Sequential).unwrap();
            let (kept, leaked) = trim_boundary_leak(&p, &model).unwrap();
            let band = 1.0 - (1.0 - 8.0 / 3.0 * (-(n as f64) * 2f64.ln()).exp()).powi(1);
            assert!(leaked <= band, "n={n}: {leaked} > {band}");
            assert!((kept.total_mass() - 1.0).abs() < 1e-12);
        }
        let p = push_forward(&sys, None, &m, 60, Execution::Sequential).unwrap();
        assert_eq!(trim_boundary_leak(&p, &model).unwrap().1, 0.0);
    }

    #[test]
    fn cesaro_horizon_one_is_the_trimmed_seed() {
        let (sys, disc) = linear_disc();
        let model = LeakModel { gamma0: 0.3, ..leak() };
        let avg = cesaro_average(&sys, None, &disc, &model, 1, 3000, 9, Execution::Sequential).unwrap();
        let seed = seed_measure(&sys, &disc, 3000, 9, Execution::Sequential).unwrap();
        let (trimmed, _) = trim_boundary_leak(&seed, &model).unwrap();
        assert_eq!(avg.measure.points, trimmed.points);
        for (a, b) in avg.measure.weights.iter().zip(&trimmed.weights) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_box_has_uniform_density() {
        let (sys, disc) = linear_disc();
        let avg = cesaro_average(&sys, None, &disc, &leak(), 12, 24000, 2, Execution::Sequential).unwrap();
        let sample = sample_attractor(&sys, 400, 60, 1, 4, Execution::Sequential).unwrap();
        let pts: Vec<DVector<f64>> = sample.points().cloned().collect();
        let bx = build_transversal(&sys, &disc, &pts, BoxSettings::default(), None).unwrap();
        assert_eq!(bx.fibers.len(), 1);
        let a = assign_particles(&sys, &bx, &avg.measure, Execution::Sequential);
        let d = density_field(&avg.measure, &a).unwrap();
        let (lo, hi) = d.range();
        assert!((lo - 1.0).abs() < 1e-10 && (hi - 1.0).abs() < 1e-10);
        let r = conditional_density_report(&avg.measure, &bx, &a, Some(&d), 2.0, 200);
        assert_eq!(r.verdict, Verdict::SrbConsistent);
        let whole = cylinder_measure(&avg.measure, &a, &[0], &BaseSet::full(1, bx.settings.rho0));
        assert!((whole - a.box_mass).abs() < 1e-12);
        let half1 = BaseSet { boxes: vec![vec![(-0.25, 0.0)]] };
        let half2 = BaseSet { boxes: vec![vec![(0.0, 0.25)]] };
        let sum = cylinder_measure(&avg.measure, &a, &[0], &half1) + cylinder_measure(&avg.measure, &a, &[0], &half2);
        assert!((sum - whole).abs() < 1e-12);
    }

    #[test]
    fn atomic_measure_is_inconsistent() {
        let (sys, disc) = linear_disc();
        let mut avg = cesaro_average(&sys, None, &disc, &leak(), 8, 16000, 2, Execution::Sequential).unwrap().measure;
        let sample = sample_attractor(&sys, 400, 60, 1, 4, Execution::Sequential).unwrap();
        let pts: Vec<DVector<f64>> = sample.points().cloned().collect();
        let bx = build_transversal(&sys, &disc, &pts, BoxSettings::default(), None).unwrap();
        let a = assign_particles(&sys, &bx, &avg, Execution::Sequential);
        let heavy = (0..avg.len()).find(|&i| a.fiber[i].is_some()).unwrap();
        avg.weights.iter_mut().for_each(|w| *w = 1e-12);
        avg.weights[heavy] = 1.0;
        let r = conditional_density_report(&avg, &bx, &a, None, 2.0, 200);
        assert_eq!(r.verdict, Verdict::Inconsistent);
    }

    #[test]
    fn binary_snapshot_round_trips() {
        let (sys, disc) = linear_disc();
        let m = seed_measure(&sys, &disc, 1000, 1, Execution::Sequential).unwrap();
        let mut buf = Vec::new();
        m.write_binary(&mut buf).unwrap();
        assert_eq!(EmpiricalMeasure::read_binary(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn rho0_is_shrunk_to_coherence_radius() {
        let sys = Solenoid::new(0.25, None, None).unwrap();
        let sample = sample_attractor(&sys, 2000, 60, 40, 1, Execution::Sequential).unwrap();
        let chain = compute_disc_chain(&sys, &sample.orbits[0], 1.0, 1e-10, 0).unwrap();
        let pts: Vec<DVector<f64>> = sample.points().cloned().collect();
        let bx = build_transversal(&sys, chain.disc(), &pts, BoxSettings { epsilon: 0.05, ..Default::default() }, Some(0.2)).unwrap();
        assert_eq!(bx.settings.rho0, 0.2);
        assert_eq!(bx.rho0_requested, 0.25);
        assert!(bx.fibers.len() >= 2);
    }
}
