//! Acceptance criteria at their stated tolerances, one line per criterion.
//!
//! Runs as a plain binary so the lines are always visible. Every criterion is
//! evaluated; the process fails when a criterion fails that is not in
//! `KNOWN_SHORTFALLS`, and also when a listed shortfall unexpectedly passes
//! without being removed from the list.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use srb_cli::config::RunConfig;
use srb_cli::pipeline::{read_json, run_pipeline, RunOptions, Summary, STAGES_FILE, SUMMARY_FILE};
use srb_core::normed_linalg::*;
use srb_core::par::Execution;
use srb_core::weakstar::{portmanteau_check, BoxSet, Domain, PointCloud, PointMeasure, PortmanteauVerdict};

/// Criteria that miss their tolerance at the stated sample size. The line is
/// still printed as FAIL.
const KNOWN_SHORTFALLS: &[&str] = &["solenoid theta-marginal TV < 1e-2 (N = 1e6)"];

struct Tally {
    failed: Vec<String>,
    passed_known: Vec<String>,
    count: usize,
}

impl Tally {
    fn record(&mut self, suite: &str, name: &str, passed: bool, detail: String) {
        self.count += 1;
        println!("{} [{suite}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        let known = KNOWN_SHORTFALLS.contains(&name);
        if !passed && !known {
            self.failed.push(name.to_string());
        }
        if passed && known {
            self.passed_known.push(name.to_string());
        }
    }

    fn budget(&mut self, suite: &str, elapsed: Duration, limit: Duration) {
        self.record(suite, &format!("runtime < {} s", limit.as_secs()), elapsed < limit, format!("{:.1} s", elapsed.as_secs_f64()));
    }
}

fn space(d: usize, p: usize) -> NormedSpace {
    match p {
        0 => NormedSpace::lp(d, 1.0).unwrap(),
        1 => NormedSpace::euclidean(d),
        2 => NormedSpace::lp(d, 4.0).unwrap(),
        _ => NormedSpace::sup(d),
    }
}

const P_LABELS: [&str; 4] = ["1", "2", "4", "inf"];

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn basis_of(rng: &mut ChaCha8Rng, span: &DMatrix<f64>, s: &NormedSpace) -> Option<UnitBasis> {
    let k = span.ncols();
    let mix = random_matrix(rng, k, k) + DMatrix::identity(k, k) * 2.0;
    let cols: Vec<DVector<f64>> = (span * mix).column_iter().map(|c| c.into_owned()).collect();
    UnitBasis::normalized(&cols, s).ok().filter(|b| b.alpha() > 0.05)
}

fn random_basis(rng: &mut ChaCha8Rng, d: usize, k: usize, s: &NormedSpace) -> UnitBasis {
    loop {
        let m = random_matrix(rng, d, k);
        if let Some(b) = basis_of(rng, &m, s) {
            return b;
        }
    }
}

/// `W·A·V⁺`: maps span(V) into span(W).
fn map_between(rng: &mut ChaCha8Rng, from: &UnitBasis, to: &UnitBasis) -> DMatrix<f64> {
    let k = from.dim();
    let a = random_matrix(rng, k, k) + DMatrix::identity(k, k);
    to.matrix() * a * from.matrix().clone().pseudo_inverse(1e-12).unwrap()
}

/// Random `k × k` matrix with singular values in `[1/2, 2]`.
fn well_conditioned(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let q1 = random_matrix(rng, k, k).qr().q();
    let q2 = random_matrix(rng, k, k).qr().q();
    let s = DVector::from_fn(k, |_, _| rng.gen_range(0.5..2.0));
    q1 * DMatrix::from_diagonal(&s) * q2
}

/// `W·A·V⁺` with a well-conditioned coordinate matrix `A`.
fn conditioned_map(rng: &mut ChaCha8Rng, from: &UnitBasis, to: &UnitBasis) -> DMatrix<f64> {
    let a = well_conditioned(rng, from.dim());
    to.matrix() * a * from.matrix().clone().pseudo_inverse(1e-12).unwrap()
}

fn linear_algebra_suite(t: &mut Tally) {
    const SUITE: &str = "linear algebra";
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);

    let mut worst = 0.0f64;
    let trials = 10_000;
    for i in 0..trials {
        let k = 1 + i % 6;
        let p = (i / 6) % 4;
        let d = k + (i / 24) % 3;
        let s = space(d, p);
        let b: Vec<UnitBasis> = (0..3).map(|_| random_basis(&mut rng, d, k, &s)).collect();
        let tm = conditioned_map(&mut rng, &b[0], &b[1]);
        let sm = conditioned_map(&mut rng, &b[1], &b[2]);
        let lhs = det_between_bases(&(&sm * &tm), &b[0], &b[2]).unwrap();
        let rhs = det_between_bases(&sm, &b[1], &b[2]).unwrap() * det_between_bases(&tm, &b[0], &b[1]).unwrap();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    t.record(
        SUITE,
        "product formula relative error <= 1e-12",
        worst <= 1e-12,
        format!("max {worst:.3e} over {trials} pairs, k <= 6, p in {{1,2,4,inf}}, map singular values in [1/2, 2]"),
    );

    let (mut norm_viol, mut lip_viol) = (0usize, 0usize);
    let n = 1000;
    for i in 0..n {
        let k = 1 + i % 6;
        let s = space(k + 1, (i / 6) % 4);
        let v = random_basis(&mut rng, k + 1, k, &s);
        let w = random_basis(&mut rng, k + 1, k, &s);
        let t1 = map_between(&mut rng, &v, &w);
        let det1 = det_between_bases(&t1, &v, &w).unwrap();
        let b = det_bounds(&t1, &v, &w).unwrap();
        if det1.abs() > b.norm_bound * (1.0 + 1e-9) {
            norm_viol += 1;
        }
        let scale: f64 = rng.gen_range(1e-6..1.0);
        let t2 = &t1 + map_between(&mut rng, &v, &w) * scale;
        let det2 = det_between_bases(&t2, &v, &w).unwrap();
        let alpha = v.alpha().min(w.alpha());
        let coeff = lipschitz_coefficient(k, restricted_norm(&t1, &v).max(restricted_norm(&t2, &v)), alpha);
        if (det1 - det2).abs() > coeff * restricted_norm(&(&t1 - &t2), &v) * (1.0 + 1e-3) + 1e-13 {
            lip_viol += 1;
        }
    }
    t.record(SUITE, "determinant norm bound never violated", norm_viol == 0, format!("{norm_viol} violations in {n} maps"));
    t.record(SUITE, "determinant Lipschitz inequality never violated", lip_viol == 0, format!("{lip_viol} violations in {n} pairs"));

    let samples = 1_000_000;
    let mut details = Vec::new();
    let mut all_within = true;
    for (p, label) in P_LABELS.iter().enumerate() {
        let s = space(3, p);
        let span = random_matrix(&mut rng, 3, 2);
        let (v, w) = loop {
            if let (Some(v), Some(w)) = (basis_of(&mut rng, &span, &s), basis_of(&mut rng, &span, &s)) {
                break (v, w);
            }
        };
        let ratio = measure_ratio(&v, &w).unwrap();
        let (estimate, sigma) = monte_carlo_ratio(&mut rng, &v, &w, samples);
        let z = (estimate - ratio).abs() / sigma;
        all_within &= z <= 3.0;
        details.push(format!("p={label} {z:.2}σ"));
    }
    t.record(
        SUITE,
        "measure ratio matches Monte-Carlo volume within 3σ",
        all_within,
        format!("{} at {samples} samples", details.join(", ")),
    );

    let mut viol = 0;
    let perturbations = 1000;
    for i in 0..perturbations {
        let k = 1 + i % 6;
        let s = space(k + 2, (i / 6) % 4);
        let v = random_basis(&mut rng, k + 2, k, &s);
        let size: f64 = 10f64.powf(rng.gen_range(-8.0..-2.0));
        let u = loop {
            let cols: Vec<DVector<f64>> =
                (0..k).map(|j| v.vector(j) + v.matrix() * DVector::from_fn(k, |_, _| rng.gen_range(-size..size))).collect();
            if let Ok(u) = UnitBasis::normalized(&cols, &s) {
                break u;
            }
        };
        let change = basis_change_det(&v, &u).unwrap();
        if !(change.within_bound() && change.measure_within_bound()) {
            viol += 1;
        }
    }
    t.record(SUITE, "basis change bound never violated", viol == 0, format!("{viol} violations in {perturbations} perturbations"));
    t.budget(SUITE, start.elapsed(), Duration::from_secs(60));
}

/// `μ_W(L_V([0,1]²))` by hit-or-miss sampling in the W-coordinate bounding box.
fn monte_carlo_ratio(rng: &mut ChaCha8Rng, v: &UnitBasis, w: &UnitBasis, n: usize) -> (f64, f64) {
    let corners: Vec<DVector<f64>> =
        [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]].iter().map(|c| w.coordinates(&v.embed(&DVector::from_row_slice(c))).0).collect();
    let lo: Vec<f64> = (0..2).map(|j| corners.iter().map(|c| c[j]).fold(f64::INFINITY, f64::min)).collect();
    let hi: Vec<f64> = (0..2).map(|j| corners.iter().map(|c| c[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
    // coordinates in V of a point with W-coordinates c are M·c
    let m = DMatrix::from_fn(2, 2, |i, j| v.coordinates(&w.vector(j)).0[i]);
    let mut hits = 0usize;
    for _ in 0..n {
        let c = DVector::from_vec(vec![rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1])]);
        let cv = &m * c;
        if cv.iter().all(|x| (0.0..=1.0).contains(x)) {
            hits += 1;
        }
    }
    let area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
    let f = hits as f64 / n as f64;
    (area * f, area * (f * (1.0 - f) / n as f64).sqrt())
}

struct PipelineRun {
    summary: Summary,
    stage_seconds: BTreeMap<String, f64>,
    elapsed: Duration,
}

impl PipelineRun {
    fn check(&self, name: &str) -> &srb_cli::pipeline::Check {
        self.summary.checks.iter().find(|c| c.name == name).unwrap_or_else(|| panic!("no check '{name}'"))
    }

    fn seconds(&self, stages: &[&str]) -> Duration {
        Duration::from_secs_f64(stages.iter().map(|s| self.stage_seconds.get(*s).copied().unwrap_or(0.0)).sum())
    }
}

fn shipped_config(name: &str, out: &Path) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn pipeline(cfg: &RunConfig, exec: Execution) -> PipelineRun {
    let start = Instant::now();
    let outcome = run_pipeline(cfg, &RunOptions { exec }).expect("pipeline I/O");
    let elapsed = start.elapsed();
    let stages: Value = read_json(&outcome.dir.join(STAGES_FILE)).unwrap();
    let stage_seconds = stages["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| (s["name"].as_str().unwrap().to_string(), s["millis"].as_f64().unwrap() / 1000.0))
        .collect();
    PipelineRun { summary: outcome.summary, stage_seconds, elapsed }
}

fn describe(c: &srb_cli::pipeline::Check) -> String {
    let v = c.value.map_or("n/a".into(), |v| format!("{v:.6e}"));
    format!("{} = {v} ({} {:e})", c.name, c.relation, c.threshold)
}

fn pass_check(t: &mut Tally, suite: &str, label: &str, run: &PipelineRun, name: &str) {
    let c = run.check(name);
    t.record(suite, label, c.passed, describe(c));
}

fn disc_suite(t: &mut Tally, sol: &PipelineRun) {
    const SUITE: &str = "unstable discs";
    pass_check(t, SUITE, "disc slopes <= 1/3", sol, "disc-slope");
    pass_check(t, SUITE, "invariance residual < 1e-6", sol, "disc-invariance");
    pass_check(t, SUITE, "backward contraction rate >= lambda0 - eps0 on 1e3 pairs", sol, "contraction-rate");
    pass_check(t, SUITE, "coherence at rho = delta/4", sol, "coherence");
    t.budget(SUITE, sol.seconds(&["splitting", "discs"]), Duration::from_secs(300));
}

fn distortion_suite(t: &mut Tally, sol: &PipelineRun, lin: &PipelineRun) {
    const SUITE: &str = "distortion";
    let c = sol.summary.constants.distortion_c.unwrap_or(f64::NAN);
    let within = sol.check("distortion-within-c");
    t.record(SUITE, "partial products within [1/C, C] on 1e2 pairs, n = 30", within.passed, format!("measured C = {c}"));
    pass_check(t, SUITE, "Cauchy tails < 1e-6", sol, "cauchy-tail");
    pass_check(t, SUITE, "linear model products exactly 1", lin, "linear-products-exact");
    pass_check(t, SUITE, "comparison operator norms <= 3/2", sol, "comparison-norms");
    t.budget(SUITE, sol.seconds(&["basis-field", "distortion"]), Duration::from_secs(300));
}

fn construction_suite(t: &mut Tally, sol: &PipelineRun, lin: &PipelineRun) {
    const SUITE: &str = "construction";
    pass_check(t, SUITE, "linear cs-spread <= 2^-n diam(U)", lin, "cs-spread");
    pass_check(t, SUITE, "linear conditional densities 1 +- 1e-10", lin, "linear-density-uniform");
    pass_check(t, SUITE, "solenoid theta-marginal TV < 1e-2 (N = 1e6)", sol, "marginal-tv");
    pass_check(t, SUITE, "p_n within [1/C, C] for every evaluated particle", sol, "density-within-c");
    pass_check(t, SUITE, "cylinder sandwich on 100 random cylinders", sol, "cylinder-sandwich");
    pass_check(t, SUITE, "leaked mass decays at rate >= lambda0 - eps0", sol, "leak-rate");
    t.budget(SUITE, sol.elapsed + lin.elapsed, Duration::from_secs(1200));
}

fn weak_star_suite(t: &mut Tally, sol2: &PipelineRun, started: Instant) {
    const SUITE: &str = "weak-star";
    let unit = Domain::new(vec![0.0], vec![1.0], vec![false]).unwrap();
    let lattice = |i: usize| PointMeasure::uniform(1, (0..i).map(|j| j as f64 / i as f64).collect());
    let seq: Vec<PointMeasure> = (1..=40).map(|i| lattice(25 * i)).collect();
    let refs: Vec<&dyn PointCloud> = seq.iter().map(|m| m as &dyn PointCloud).collect();
    let leb = lattice(100_000);
    let r = portmanteau_check(&refs, Some(&leb), &BoxSet::single(vec![(0.0, 0.5)]), &unit, 1e-3, 1e-2).unwrap();
    t.record(
        SUITE,
        "portmanteau: uniform lattice converges to Lebesgue",
        r.verdict == PortmanteauVerdict::Converges,
        format!("{:?}", r.verdict),
    );

    let seq: Vec<PointMeasure> = (1..=20).map(|i| PointMeasure::dirac(&[1.0 / i as f64])).collect();
    let refs: Vec<&dyn PointCloud> = seq.iter().map(|m| m as &dyn PointCloud).collect();
    let r = portmanteau_check(&refs, Some(&PointMeasure::dirac(&[0.0])), &BoxSet::single(vec![(0.0, 0.0)]), &unit, 1e-3, 1e-2).unwrap();
    t.record(
        SUITE,
        "portmanteau: shrinking point mass has a fat boundary",
        r.verdict == PortmanteauVerdict::InconclusiveFatBoundary,
        format!("{:?}", r.verdict),
    );

    let trace: Vec<String> = sol2.summary.lp_trace.iter().map(|p| format!("{}:{:.4}", p.horizon, p.distance)).collect();
    let dec = sol2.check("lp-decreasing");
    t.record(SUITE, "LP(n, 2n) non-increasing in n", dec.passed, format!("trace {} (N = {})", trace.join(" "), sol2.summary.particles));
    pass_check(t, SUITE, "LP(60, 120) < 1e-2", sol2, "lp-final");
    t.budget(SUITE, started.elapsed(), Duration::from_secs(300));
}

fn determinism_suite(t: &mut Tally, root: &Path) {
    const SUITE: &str = "determinism";
    let mut a = shipped_config("solenoid.toml", &root.join("det-a"));
    a.particles = 200_000;
    let mut b = a.clone();
    b.output_dir = root.join("det-b");
    pipeline(&a, Execution::Sequential);
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        pool.install(|| pipeline(&b, Execution::Parallel));
    }
    #[cfg(not(feature = "parallel"))]
    pipeline(&b, Execution::Parallel);
    let sa = std::fs::read(a.output_dir.join(SUMMARY_FILE)).unwrap();
    let sb = std::fs::read(b.output_dir.join(SUMMARY_FILE)).unwrap();
    let width = if cfg!(feature = "parallel") { "sequential vs 4 threads" } else { "sequential build" };
    t.record(SUITE, "byte-identical summaries across runs", sa == sb, format!("{width}, {} bytes", sa.len()));
}

fn main() {
    // `cargo test -- --list` and filters are harness concerns; honor a bare listing.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let root = tempfile::tempdir().unwrap();
    let mut t = Tally { failed: Vec::new(), passed_known: Vec::new(), count: 0 };

    linear_algebra_suite(&mut t);

    let sol = pipeline(&shipped_config("solenoid.toml", &root.path().join("solenoid")), Execution::Parallel);
    let lin = pipeline(&shipped_config("linear.toml", &root.path().join("linear")), Execution::Parallel);
    disc_suite(&mut t, &sol);
    distortion_suite(&mut t, &sol, &lin);
    construction_suite(&mut t, &sol, &lin);
    drop(sol);

    let started = Instant::now();
    let mut cfg2 = shipped_config("solenoid.toml", &root.path().join("solenoid-2e6"));
    cfg2.particles = 2_000_000;
    let sol2 = pipeline(&cfg2, Execution::Parallel);
    weak_star_suite(&mut t, &sol2, started);
    drop(sol2);

    determinism_suite(&mut t, root.path());

    let failing = t.failed.len() + KNOWN_SHORTFALLS.len() - t.passed_known.len();
    println!("acceptance: {} criteria, {} passed, {} failed", t.count, t.count - failing, failing);
    if !t.passed_known.is_empty() {
        println!("listed shortfalls now pass: {:?}", t.passed_known);
    }
    if !t.failed.is_empty() || !t.passed_known.is_empty() {
        std::process::exit(1);
    }
}
