//! Distances between empirical measures and weak* convergence checks.

use std::collections::HashMap;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::par::pairwise_sum;
use crate::qmc::stream_rng;
use crate::srb::EmpiricalMeasure;

pub const MIN_RESOLUTION: usize = 64;
pub const MAX_ASSIGNMENT_POINTS: usize = 4096;
const FLOW_EPS: f64 = 1e-15;
const UNMATCHED_FLOOR: f64 = 1e-12;

/// Weighted points in a common ambient box.
pub trait PointCloud {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn coords(&self, i: usize) -> &[f64];
    fn weight(&self, i: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PointCloud for EmpiricalMeasure {
    fn dim(&self) -> usize {
        self.dim
    }
    fn len(&self) -> usize {
        EmpiricalMeasure::len(self)
    }
    fn coords(&self, i: usize) -> &[f64] {
        self.point_slice(i)
    }
    fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }
}

/// The particles of a Cesàro average with generation below `horizon`,
/// viewed without copying. Masses are normalized by the consumers.
#[derive(Clone, Debug)]
pub struct Truncation<'a> {
    measure: &'a EmpiricalMeasure,
    index: Vec<u32>,
}

impl<'a> Truncation<'a> {
    pub fn new(measure: &'a EmpiricalMeasure, horizon: usize) -> Self {
        let index = (0..measure.len() as u32).filter(|&i| (measure.generations[i as usize] as usize) < horizon).collect();
        Self { measure, index }
    }
}

impl PointCloud for Truncation<'_> {
    fn dim(&self) -> usize {
        self.measure.dim
    }
    fn len(&self) -> usize {
        self.index.len()
    }
    fn coords(&self, i: usize) -> &[f64] {
        self.measure.point_slice(self.index[i] as usize)
    }
    fn weight(&self, i: usize) -> f64 {
        self.measure.weights[self.index[i] as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointMeasure {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PointMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() != dim * weights.len() {
            return Err(Error::Contract("point and weight counts disagree".into()));
        }
        Ok(Self { dim, points, weights })
    }

    pub fn dirac(point: &[f64]) -> Self {
        Self { dim: point.len(), points: point.to_vec(), weights: vec![1.0] }
    }

    /// Equal weights on the given points.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Self {
        let n = points.len() / dim;
        Self { dim, points, weights: vec![1.0 / n as f64; n] }
    }
}

impl PointCloud for PointMeasure {
    fn dim(&self) -> usize {
        self.dim
    }
    fn len(&self) -> usize {
        self.weights.len()
    }
    fn coords(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
    fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }
}

fn total_mass(m: &dyn PointCloud) -> f64 {
    let w: Vec<f64> = (0..m.len()).map(|i| m.weight(i)).collect();
    pairwise_sum(&w)
}

/// Sup-metric box with optional periodic axes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Domain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub periodic: Vec<bool>,
}

impl Domain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, periodic: Vec<bool>) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != periodic.len() || lo.iter().zip(&hi).any(|(a, b)| !(b > a)) {
            return Err(Error::InvalidInput("malformed domain".into()));
        }
        Ok(Self { lo, hi, periodic })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        (0..self.dim())
            .map(|j| {
                let d = (a[j] - b[j]).abs();
                if self.periodic[j] {
                    let p = self.hi[j] - self.lo[j];
                    let d = d % p;
                    d.min(p - d)
                } else {
                    d
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Uniform lattice with `resolution` cells per axis.
#[derive(Clone, Debug)]
struct Lattice<'a> {
    domain: &'a Domain,
    cells: usize,
    h: Vec<f64>,
}

impl<'a> Lattice<'a> {
    fn new(domain: &'a Domain, resolution: usize) -> Self {
        let h = (0..domain.dim()).map(|j| (domain.hi[j] - domain.lo[j]) / resolution as f64).collect();
        Self { domain, cells: resolution, h }
    }

    fn cell(&self, x: &[f64]) -> Vec<i64> {
        (0..self.h.len())
            .map(|j| {
                let t = ((x[j] - self.domain.lo[j]) / self.h[j]).floor() as i64;
                if self.domain.periodic[j] {
                    t.rem_euclid(self.cells as i64)
                } else {
                    t.clamp(0, self.cells as i64 - 1)
                }
            })
            .collect()
    }

    /// Sup distance between cell centres; within one cell diameter of the
    /// distance between any two points of the cells.
    fn gap(&self, a: &[i64], b: &[i64]) -> f64 {
        (0..a.len())
            .map(|j| {
                let mut d = (a[j] - b[j]).abs();
                if self.domain.periodic[j] {
                    d = d.min(self.cells as i64 - d);
                }
                d as f64 * self.h[j]
            })
            .fold(0.0, f64::max)
    }

    fn diameter(&self) -> f64 {
        self.h.iter().copied().fold(0.0, f64::max)
    }

    fn histogram(&self, m: &dyn PointCloud) -> Vec<(Vec<i64>, f64)> {
        let total = total_mass(m);
        let mut cells: HashMap<Vec<i64>, Vec<f64>> = HashMap::new();
        for i in 0..m.len() {
            cells.entry(self.cell(m.coords(i))).or_default().push(m.weight(i));
        }
        let mut out: Vec<(Vec<i64>, f64)> = cells.into_iter().map(|(c, w)| (c, pairwise_sum(&w) / total)).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

struct FlowEdge {
    to: usize,
    cap: f64,
}

/// Dinic max-flow on real capacities.
struct FlowNetwork {
    edges: Vec<FlowEdge>,
    adj: Vec<Vec<usize>>,
}

impl FlowNetwork {
    fn new(n: usize) -> Self {
        Self { edges: Vec::new(), adj: vec![Vec::new(); n] }
    }

    fn add(&mut self, a: usize, b: usize, cap: f64) {
        self.adj[a].push(self.edges.len());
        self.edges.push(FlowEdge { to: b, cap });
        self.adj[b].push(self.edges.len());
        self.edges.push(FlowEdge { to: a, cap: 0.0 });
    }

    fn levels(&self, s: usize) -> Vec<i64> {
        let mut level = vec![-1; self.adj.len()];
        level[s] = 0;
        let mut queue = std::collections::VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            for &e in &self.adj[v] {
                let t = self.edges[e].to;
                if self.edges[e].cap > FLOW_EPS && level[t] < 0 {
                    level[t] = level[v] + 1;
                    queue.push_back(t);
                }
            }
        }
        level
    }

    fn push(&mut self, v: usize, t: usize, f: f64, level: &[i64], it: &mut [usize]) -> f64 {
        if v == t {
            return f;
        }
        while it[v] < self.adj[v].len() {
            let e = self.adj[v][it[v]];
            let to = self.edges[e].to;
            let cap = self.edges[e].cap;
            if cap > FLOW_EPS && level[to] == level[v] + 1 {
                let d = self.push(to, t, f.min(cap), level, it);
                if d > 0.0 {
                    self.edges[e].cap -= d;
                    self.edges[e ^ 1].cap += d;
                    return d;
                }
            }
            it[v] += 1;
        }
        0.0
    }

    fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut flow = 0.0;
        loop {
            let level = self.levels(s);
            if level[t] < 0 {
                return flow;
            }
            let mut it = vec![0; self.adj.len()];
            loop {
                let f = self.push(s, t, f64::INFINITY, &level, &mut it);
                if f <= FLOW_EPS {
                    break;
                }
                flow += f;
            }
        }
    }
}

/// Mass that can be moved from `a` to `b` along cell pairs at gap `≤ eps`.
fn transportable(lat: &Lattice, a: &[(Vec<i64>, f64)], b: &[(Vec<i64>, f64)], eps: f64) -> f64 {
    let (na, nb) = (a.len(), b.len());
    let mut net = FlowNetwork::new(na + nb + 2);
    let (s, t) = (na + nb, na + nb + 1);
    for (i, (_, m)) in a.iter().enumerate() {
        net.add(s, i, *m);
    }
    for (j, (_, m)) in b.iter().enumerate() {
        net.add(na + j, t, *m);
    }
    let radius: Vec<i64> = lat.h.iter().map(|h| (eps / h).floor() as i64).collect();
    let offsets: usize = radius.iter().map(|r| (2 * r + 1) as usize).product();
    if offsets < nb {
        let index: HashMap<&Vec<i64>, usize> = b.iter().enumerate().map(|(j, (c, _))| (c, j)).collect();
        for (i, (c, _)) in a.iter().enumerate() {
            for code in 0..offsets {
                let mut r = code;
                let mut n = c.clone();
                for (x, rad) in n.iter_mut().zip(&radius) {
                    let span = (2 * rad + 1) as usize;
                    *x += (r % span) as i64 - rad;
                    r /= span;
                }
                for (j, x) in n.iter_mut().enumerate() {
                    if lat.domain.periodic[j] {
                        *x = x.rem_euclid(lat.cells as i64);
                    }
                }
                if let Some(&j) = index.get(&n) {
                    if lat.gap(c, &n) <= eps {
                        net.add(i, na + j, f64::INFINITY);
                    }
                }
            }
        }
    } else {
        for (i, (c, _)) in a.iter().enumerate() {
            for (j, (d, _)) in b.iter().enumerate() {
                if lat.gap(c, d) <= eps {
                    net.add(i, na + j, f64::INFINITY);
                }
            }
        }
    }
    net.max_flow(s, t)
}

#[derive(Clone, Debug, Serialize)]
pub struct LpEstimate {
    pub distance: f64,
    /// Diameter of one lattice cell; the true distance is at most
    /// `distance + grid_diameter`.
    pub grid_diameter: f64,
    pub resolution: usize,
    pub levels_tested: usize,
}

/// Lévy-Prokhorov distance on the cell lattice: the smallest `ε` such that
/// a coupling moves all but `ε` of the mass across cell gaps `≤ ε`, found by
/// bisection over the lattice gap levels.
pub fn levy_prokhorov(mu: &dyn PointCloud, nu: &dyn PointCloud, domain: &Domain, resolution: usize) -> Result<LpEstimate> {
    if mu.is_empty() || nu.is_empty() {
        return Err(Error::Contract("Lévy-Prokhorov distance of an empty measure".into()));
    }
    if mu.dim() != domain.dim() || nu.dim() != domain.dim() {
        return Err(Error::Contract("measures and domain differ in dimension".into()));
    }
    if resolution < MIN_RESOLUTION {
        return Err(Error::InvalidInput(format!("resolution must be at least {MIN_RESOLUTION} cells per axis")));
    }
    let lat = Lattice::new(domain, resolution);
    let a = lat.histogram(mu);
    let b = lat.histogram(nu);
    let mut levels: Vec<f64> = lat.h.iter().flat_map(|h| (0..resolution).map(move |d| d as f64 * h)).filter(|&e| e < 1.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    // flow round-off below this counts as a full coupling
    let unmatched = |eps: f64| -> f64 {
        let r = 1.0 - transportable(&lat, &a, &b, eps);
        if r < UNMATCHED_FLOOR {
            0.0
        } else {
            r
        }
    };
    let score = |eps: f64| -> f64 { eps.max(unmatched(eps)) };
    let (mut lo, mut hi) = (0usize, levels.len() - 1);
    let mut tested = 0;
    // 1 − flow decreases and the level increases, so the crossing is unique
    while hi > lo {
        let mid = (lo + hi) / 2;
        tested += 1;
        if unmatched(levels[mid]) <= levels[mid] {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut best = score(levels[lo]).min(1.0);
    tested += 1;
    if lo > 0 {
        best = best.min(score(levels[lo - 1]));
        tested += 1;
    }
    Ok(LpEstimate { distance: best.min(1.0), grid_diameter: lat.diameter(), resolution, levels_tested: tested })
}

/// Systematic resample of `n` equal-weight points.
fn resample(m: &dyn PointCloud, n: usize, seed: u64, stage: &str) -> Vec<Vec<f64>> {
    let total = total_mass(m);
    let mut rng = stream_rng(seed, stage, 0);
    let start: f64 = rng.gen_range(0.0..1.0);
    let mut out = Vec::with_capacity(n);
    let mut acc = 0.0;
    let mut i = 0;
    for j in 0..n {
        let target = (j as f64 + start) / n as f64 * total;
        while i + 1 < m.len() && acc + m.weight(i) <= target {
            acc += m.weight(i);
            i += 1;
        }
        out.push(m.coords(i).to_vec());
    }
    out
}

/// 1-Wasserstein estimate: greedy nearest-unmatched assignment between
/// equal-size systematic resamples of at most 4096 points.
pub fn wasserstein_greedy(mu: &dyn PointCloud, nu: &dyn PointCloud, domain: &Domain, max_points: usize, seed: u64) -> Result<f64> {
    if mu.is_empty() || nu.is_empty() {
        return Err(Error::Contract("Wasserstein distance of an empty measure".into()));
    }
    let n = max_points.min(MAX_ASSIGNMENT_POINTS).min(mu.len().max(nu.len())).max(1);
    let a = resample(mu, n, seed, "w1-a");
    let b = resample(nu, n, seed, "w1-b");
    let mut used = vec![false; n];
    let mut cost = Vec::with_capacity(n);
    for p in &a {
        let (j, d) = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, q)| (j, domain.distance(p, q)))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("unmatched point remains");
        used[j] = true;
        cost.push(d);
    }
    Ok(pairwise_sum(&cost) / n as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct MeasureDistanceReport {
    pub levy_prokhorov: LpEstimate,
    pub wasserstein: f64,
    /// `|μ(V) − ν(V)|` for each supplied test set.
    pub set_discrepancies: Vec<f64>,
}

pub fn distance_report(
    mu: &dyn PointCloud,
    nu: &dyn PointCloud,
    domain: &Domain,
    resolution: usize,
    test_sets: &[BoxSet],
    seed: u64,
) -> Result<MeasureDistanceReport> {
    Ok(MeasureDistanceReport {
        levy_prokhorov: levy_prokhorov(mu, nu, domain, resolution)?,
        wasserstein: wasserstein_greedy(mu, nu, domain, MAX_ASSIGNMENT_POINTS, seed)?,
        set_discrepancies: test_sets.iter().map(|v| (v.mass(mu, domain, 0.0) - v.mass(nu, domain, 0.0)).abs()).collect(),
    })
}

/// A finite union of closed coordinate boxes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoxSet {
    pub boxes: Vec<Vec<(f64, f64)>>,
}

impl BoxSet {
    pub fn single(bounds: Vec<(f64, f64)>) -> Self {
        Self { boxes: vec![bounds] }
    }

    /// Membership in the union grown by `grow` (shrunk when negative).
    pub fn contains(&self, x: &[f64], domain: &Domain, grow: f64) -> bool {
        self.boxes.iter().any(|b| {
            b.iter().enumerate().all(|(j, (lo, hi))| {
                let (lo, hi) = (lo - grow, hi + grow);
                if lo > hi {
                    return false;
                }
                if domain.periodic[j] {
                    let p = domain.hi[j] - domain.lo[j];
                    if hi - lo >= p {
                        return true;
                    }
                    let t = (x[j] - lo).rem_euclid(p);
                    t <= hi - lo
                } else {
                    x[j] >= lo && x[j] <= hi
                }
            })
        })
    }

    /// Normalized mass of the grown or shrunk union.
    pub fn mass(&self, m: &dyn PointCloud, domain: &Domain, grow: f64) -> f64 {
        let w: Vec<f64> = (0..m.len()).filter(|&i| self.contains(m.coords(i), domain, grow)).map(|i| m.weight(i)).collect();
        pairwise_sum(&w) / total_mass(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PortmanteauVerdict {
    Converges,
    DoesNotConverge,
    InconclusiveFatBoundary,
}

#[derive(Clone, Debug, Serialize)]
pub struct PortmanteauReport {
    pub shell: f64,
    pub tolerance: f64,
    /// `μ_i(V)` along the sequence.
    pub masses: Vec<f64>,
    pub limit_mass: f64,
    pub limit_interior: f64,
    pub limit_closure: f64,
    pub boundary_mass: f64,
    /// Smallest `μ_i(V°)` over the tail of the sequence.
    pub liminf_interior: f64,
    /// Largest `μ_i(V̄)` over the tail of the sequence.
    pub limsup_closure: f64,
    pub final_discrepancy: f64,
    pub verdict: PortmanteauVerdict,
}

/// Checks `μ_i(V) → μ(V)` on a test set, with interior and closure realized
/// by shells of width `shell`. The limit is the last element unless given.
pub fn portmanteau_check(
    sequence: &[&dyn PointCloud],
    limit: Option<&dyn PointCloud>,
    set: &BoxSet,
    domain: &Domain,
    shell: f64,
    tolerance: f64,
) -> Result<PortmanteauReport> {
    if sequence.len() < 10 {
        return Err(Error::InvalidInput("portmanteau check needs at least 10 measures".into()));
    }
    if sequence.iter().any(|m| m.is_empty()) {
        return Err(Error::Contract("empty measure in sequence".into()));
    }
    let limit = limit.unwrap_or(*sequence.last().expect("non-empty"));
    let masses: Vec<f64> = sequence.iter().map(|m| set.mass(*m, domain, 0.0)).collect();
    let limit_mass = set.mass(limit, domain, 0.0);
    let limit_interior = set.mass(limit, domain, -shell);
    let limit_closure = set.mass(limit, domain, shell);
    let boundary_mass = limit_closure - limit_interior;
    let tail = &sequence[sequence.len() - sequence.len() / 4..];
    let liminf_interior = tail.iter().map(|m| set.mass(*m, domain, -shell)).fold(f64::INFINITY, f64::min);
    let limsup_closure = tail.iter().map(|m| set.mass(*m, domain, shell)).fold(0.0, f64::max);
    let final_discrepancy = tail.iter().map(|m| (set.mass(*m, domain, 0.0) - limit_mass).abs()).fold(0.0, f64::max);
    let verdict = if boundary_mass > tolerance {
        PortmanteauVerdict::InconclusiveFatBoundary
    } else if final_discrepancy < tolerance && liminf_interior >= limit_interior - tolerance && limsup_closure <= limit_closure + tolerance
    {
        PortmanteauVerdict::Converges
    } else {
        PortmanteauVerdict::DoesNotConverge
    };
    Ok(PortmanteauReport {
        shell,
        tolerance,
        masses,
        limit_mass,
        limit_interior,
        limit_closure,
        boundary_mass,
        liminf_interior,
        limsup_closure,
        final_discrepancy,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Domain {
        Domain::new(vec![0.0], vec![1.0], vec![false]).unwrap()
    }

    fn lattice(i: usize) -> PointMeasure {
        PointMeasure::uniform(1, (0..i).map(|j| j as f64 / i as f64).collect())
    }

    #[test]
    fn identical_measures_are_close() {
        let m = lattice(500);
        let d = levy_prokhorov(&m, &m, &unit(), 64).unwrap();
        assert!(d.distance <= d.grid_diameter);
    }

    #[test]
    fn diracs_are_at_their_distance() {
        let dom = Domain::new(vec![-2.0], vec![2.0], vec![false]).unwrap();
        for a in [0.3, 0.7, 1.5] {
            let d = levy_prokhorov(&PointMeasure::dirac(&[0.0]), &PointMeasure::dirac(&[a]), &dom, 128).unwrap();
            assert!((d.distance - f64::min(a, 1.0)).abs() <= d.grid_diameter, "a={a}: {}", d.distance);
        }
    }

    #[test]
    fn disjoint_clouds() {
        let dom = Domain::new(vec![0.0, 0.0], vec![2.0, 1.0], vec![false, false]).unwrap();
        let cloud = |x0: f64| {
            let mut pts = Vec::new();
            for i in 0..20 {
                for j in 0..20 {
                    pts.extend([x0 + 0.1 * i as f64 / 20.0, j as f64 / 20.0]);
                }
            }
            PointMeasure::uniform(2, pts)
        };
        // blocks of width w shifted by d: 1 − (ε − (d − w))/w = ε gives ε = d/(1 + w)
        let (d, w) = (0.4, 0.1);
        let e = levy_prokhorov(&cloud(0.2), &cloud(0.2 + d), &dom, 128).unwrap();
        assert!((e.distance - d / (1.0 + w)).abs() <= e.grid_diameter, "{e:?}");
        let far = levy_prokhorov(&cloud(0.2), &cloud(1.8), &dom, 128).unwrap();
        assert!((far.distance - 1.0).abs() <= far.grid_diameter);
    }

    #[test]
    fn lattice_converges_to_lebesgue_on_half_interval() {
        let seq: Vec<PointMeasure> = (1..=40).map(|i| lattice(25 * i)).collect();
        let refs: Vec<&dyn PointCloud> = seq.iter().map(|m| m as &dyn PointCloud).collect();
        let leb = lattice(100_000);
        let set = BoxSet::single(vec![(0.0, 0.5)]);
        let r = portmanteau_check(&refs, Some(&leb), &set, &unit(), 1e-3, 1e-2).unwrap();
        assert_eq!(r.verdict, PortmanteauVerdict::Converges);
        assert!((r.masses.last().unwrap() - 0.5).abs() < 2e-3);
    }

    #[test]
    fn shrinking_dirac_has_fat_boundary() {
        let seq: Vec<PointMeasure> = (1..=20).map(|i| PointMeasure::dirac(&[1.0 / i as f64])).collect();
        let refs: Vec<&dyn PointCloud> = seq.iter().map(|m| m as &dyn PointCloud).collect();
        let set = BoxSet::single(vec![(0.0, 0.0)]);
        let r = portmanteau_check(&refs, Some(&PointMeasure::dirac(&[0.0])), &set, &unit(), 1e-3, 1e-2).unwrap();
        assert_eq!(r.verdict, PortmanteauVerdict::InconclusiveFatBoundary);
    }

    #[test]
    fn periodic_sets_wrap() {
        let dom = Domain::new(vec![0.0], vec![1.0], vec![true]).unwrap();
        let set = BoxSet::single(vec![(0.9, 1.1)]);
        assert!(set.contains(&[0.05], &dom, 0.0));
        assert!(!set.contains(&[0.5], &dom, 0.0));
        assert!((dom.distance(&[0.05], &[0.95]) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn greedy_wasserstein_of_shift() {
        let a = lattice(1000);
        let b = PointMeasure::uniform(1, (0..1000).map(|j| j as f64 / 2000.0 + 0.25).collect());
        let w = wasserstein_greedy(&a, &b, &unit(), 4096, 1).unwrap();
        assert!(w > 0.1 && w < 0.5);
        assert!(levy_prokhorov(&PointMeasure::new(1, vec![], vec![]).unwrap(), &a, &unit(), 64).is_err());
    }
}
