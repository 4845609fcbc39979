//! The end-to-end construction: validation through the weak-star checks,
//! with every stage's outcome persisted under the run directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use srb_core::cocycle::{build_basis_field, estimate_distortion_constant, jacobian_lower_bound, measure_m_bound, DiscPair};
use srb_core::manifolds::{
    backward_contraction_check, coherence_check, compute_disc_chain, compute_unstable_disc, DiscChain, UnstableDisc,
};
use srb_core::par::Execution;
use srb_core::qmc::Halton;
use srb_core::srb::{
    assign_particles, build_transversal, cesaro_average, conditional_density_report, cs_spread, cylinder_sandwich, density_field,
    fit_leak_rate, leak_profile, marginal_histogram, marginal_tv_uniform, partition_refinement_check, seed_measure, BoxSettings,
    EmpiricalMeasure, LeakModel, Verdict,
};
use srb_core::system::{
    compute_splitting, forward_orbit, hyperbolicity_report, sample_attractor, validate_conditions, DynamicalSystem, OrbitSegment,
};
use srb_core::weakstar::{levy_prokhorov, portmanteau_check, BoxSet, Domain, PointCloud, PointMeasure, PortmanteauVerdict, Truncation};
use srb_core::{Error, Result};

use crate::config::RunConfig;

pub const SUMMARY_SCHEMA: &str = "srb-summary/1";
pub const STAGES_SCHEMA: &str = "srb-stages/1";
pub const DATA_SCHEMA: &str = "srb-run-data/1";
/// Smallest leaked particle count entering the leak-rate fit.
const LEAK_FIT_MIN_PARTICLES: f64 = 1000.0;
const SNAPSHOT_MAGIC: &[u8; 8] = b"SRBSNAP1";

pub const SUMMARY_FILE: &str = "summary.json";
pub const STAGES_FILE: &str = "stages.json";
pub const DATA_FILE: &str = "data.json";
pub const CONFIG_FILE: &str = "config.json";
pub const SNAPSHOT_FILE: &str = "snapshot.bin";
pub const PARTICLES_FILE: &str = "particles.csv";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_VERDICT: i32 = 4;

pub const VERDICT_CONSISTENT: &str = "SRB-consistent";
pub const VERDICT_INCONSISTENT: &str = "inconsistent";

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub exec: Execution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub suite: String,
    /// Counts towards the exit status.
    pub primary: bool,
    pub value: Option<f64>,
    pub relation: String,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub lambda0: Option<f64>,
    pub eps0: Option<f64>,
    pub gamma0: Option<f64>,
    pub delta: Option<f64>,
    pub rho0: Option<f64>,
    pub epsilon: Option<f64>,
    pub distortion_c: Option<f64>,
    pub m_bound: Option<f64>,
    pub ju_lower_bound: Option<f64>,
    pub leak_rate: Option<f64>,
    pub leak_gamma: Option<f64>,
    pub fibers: Option<usize>,
    pub box_mass: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpPoint {
    pub horizon: usize,
    pub doubled: usize,
    pub distance: f64,
    pub grid_diameter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub system: String,
    pub k: usize,
    pub horizon: usize,
    pub particles: usize,
    pub seed: u64,
    pub complete: bool,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub constants: DerivedConstants,
    pub lp_trace: Vec<LpPoint>,
    pub checks: Vec<Check>,
    pub verdict: String,
    pub exit_code: i32,
}

impl Summary {
    pub fn primary_failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.primary && !c.passed)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub ok: bool,
    pub millis: u128,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub axis: usize,
    pub lo: f64,
    pub hi: f64,
    pub masses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiberHistogram {
    pub fiber: usize,
    pub particles: usize,
    pub mass: f64,
    /// Cell mass relative to normalized Lebesgue on `E^u_x(ρ0)`.
    pub ratios: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub lp_trace: Vec<LpPoint>,
    /// `(horizon, μ_n(V))` along the portmanteau sequence.
    pub portmanteau: Vec<(usize, f64)>,
    pub leak_profile: Vec<f64>,
    pub leaked_by_generation: Vec<f64>,
    pub distortion_sup_by_horizon: Vec<f64>,
    /// Mean of `log d^u(y_{−j}, z_{−j}) / d^u(y, z)` over contraction pairs.
    pub contraction_mean_log_ratio: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionRow {
    pub pair: usize,
    pub partial_products: Vec<f64>,
}

/// Plot-ready arrays and full stage reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunData {
    pub schema: String,
    pub marginals: Vec<Marginal>,
    pub density_histograms: Vec<FiberHistogram>,
    pub convergence: Convergence,
    pub distortion: Vec<DistortionRow>,
    pub reports: BTreeMap<String, Value>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: Summary,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        self.summary.exit_code
    }
}

struct StageFailure {
    stage: &'static str,
    error: Error,
}

#[derive(Default)]
struct Recorder {
    stages: Vec<StageRecord>,
}

impl Recorder {
    fn run<T>(&mut self, name: &'static str, f: impl FnOnce() -> Result<T>) -> std::result::Result<T, StageFailure> {
        let start = Instant::now();
        let r = f();
        self.stages.push(StageRecord {
            name: name.into(),
            ok: r.is_ok(),
            millis: start.elapsed().as_millis(),
            error: r.as_ref().err().map(|e| e.to_string()),
        });
        r.map_err(|error| StageFailure { stage: name, error })
    }
}

/// Everything gathered while the stages run; written out even on failure.
struct Collected {
    system: String,
    k: usize,
    constants: DerivedConstants,
    checks: Vec<Check>,
    data: RunData,
    consistent: bool,
    snapshot: Option<EmpiricalMeasure>,
    sample: Option<EmpiricalMeasure>,
}

impl Collected {
    fn check(&mut self, name: &str, suite: &str, primary: bool, value: f64, relation: &str, threshold: f64) {
        let passed = match relation {
            "<" => value < threshold,
            "<=" => value <= threshold,
            ">=" => value >= threshold,
            _ => value == threshold,
        };
        self.checks.push(Check {
            name: name.into(),
            suite: suite.into(),
            primary,
            value: value.is_finite().then_some(value),
            relation: relation.into(),
            threshold,
            passed,
        });
    }

    fn flag(&mut self, name: &str, suite: &str, primary: bool, ok: bool) {
        self.check(name, suite, primary, f64::from(u8::from(ok)), "==", 1.0);
    }

    fn report<T: Serialize>(&mut self, name: &str, value: &T) {
        self.data.reports.insert(name.into(), serde_json::to_value(value).unwrap_or(Value::Null));
    }
}

/// Runs every stage and writes the run directory. Only I/O failures while
/// writing the outputs are returned as errors; stage failures are recorded
/// in the summary and reflected in its exit code.
pub fn run_pipeline(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let dir = cfg.resolved_output();
    fs::create_dir_all(&dir)?;
    let mut rec = Recorder::default();
    let mut col = Collected {
        system: cfg.system.name.clone(),
        k: 0,
        constants: DerivedConstants::default(),
        checks: Vec::new(),
        data: RunData { schema: DATA_SCHEMA.into(), ..RunData::default() },
        consistent: false,
        snapshot: None,
        sample: None,
    };
    let result = execute(cfg, opts.exec, &mut rec, &mut col);
    let (failed_stage, error, exit_code) = match &result {
        Ok(()) => {
            let all_pass = col.checks.iter().all(|c| !c.primary || c.passed);
            (None, None, if all_pass && col.consistent { EXIT_OK } else { EXIT_VERDICT })
        }
        Err(f) => {
            let code = if f.stage == "validate" { EXIT_VALIDATION } else { EXIT_NUMERICAL };
            (Some(f.stage.to_string()), Some(f.error.to_string()), code)
        }
    };
    let summary = Summary {
        schema: SUMMARY_SCHEMA.into(),
        system: col.system.clone(),
        k: col.k,
        horizon: cfg.horizon,
        particles: cfg.particles,
        seed: cfg.seed,
        complete: result.is_ok(),
        failed_stage,
        error,
        constants: col.constants.clone(),
        lp_trace: col.data.convergence.lp_trace.clone(),
        checks: col.checks.clone(),
        verdict: if result.is_ok() && col.consistent { VERDICT_CONSISTENT } else { VERDICT_INCONSISTENT }.into(),
        exit_code,
    };

    write_json(&dir.join(CONFIG_FILE), cfg)?;
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    write_json(&dir.join(STAGES_FILE), &json!({ "schema": STAGES_SCHEMA, "stages": rec.stages }))?;
    if result.is_ok() {
        write_json(&dir.join(DATA_FILE), &col.data)?;
    }
    if let Some(m) = &col.snapshot {
        write_snapshot(&dir.join(SNAPSHOT_FILE), m)?;
    }
    if let Some(m) = &col.sample {
        write_subsample(&dir.join(PARTICLES_FILE), m, cfg.sampling.snapshot_subsample)?;
    }
    Ok(RunOutcome { dir, summary })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingStage(format!("{} not found", path.display())),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// The ambient box of the trapping region with its periodic axes.
pub fn system_domain(sys: &dyn DynamicalSystem) -> Result<Domain> {
    let b = sys.trapping_box();
    Domain::new(b.iter().map(|r| r.0).collect(), b.iter().map(|r| r.1).collect(), sys.periods().iter().map(Option::is_some).collect())
}

/// Horizons `n/4, n/2, n` (deduplicated, at least 1) of the LP trace.
pub fn lp_horizons(n: usize) -> Vec<usize> {
    let mut h = vec![(n / 4).max(1), (n / 2).max(1), n];
    h.dedup();
    h
}

fn execute(cfg: &RunConfig, exec: Execution, rec: &mut Recorder, col: &mut Collected) -> std::result::Result<(), StageFailure> {
    let s = &cfg.sampling;
    let t = &cfg.tolerances;
    let c = &cfg.constants;
    let n = cfg.horizon;
    let seed = cfg.seed;

    let sys = rec.run("validate", || {
        let sys = cfg.validate()?;
        let report = validate_conditions(&*sys, s.validate_samples, seed);
        col.report("conditions", &report);
        if !report.passed() {
            return Err(Error::Contract(format!("standing conditions violated: {}", report.violations.join("; "))));
        }
        Ok(sys)
    })?;
    let sys: &dyn DynamicalSystem = &*sys;
    col.system = sys.name().to_string();
    col.k = sys.unstable_dim();
    let k = col.k;
    let linear = sys.name() == "linear_hyperbolic";
    let solenoid = sys.name().starts_with("solenoid");

    let (sample, split, lambda0) = rec.run("splitting", || {
        let sample = sample_attractor(sys, s.attractor_points, s.transient, s.history, seed, exec)?;
        let split = compute_splitting(sys, &sample, s.cone_iterations, exec)?;
        let hyp = hyperbolicity_report(sys, &split, split.len())?;
        col.report("hyperbolicity", &hyp);
        col.report(
            "splitting",
            &json!({
                "samples": split.len(),
                "invariance_residual": split.invariance_residual,
                "cs_invariance_residual": split.cs_invariance_residual,
                "continuity_modulus": split.continuity_modulus,
            }),
        );
        col.check("center-stable-growth", "standing", false, hyp.cs_bound, "<=", 1.0 + 1e-9);
        Ok((sample, split, hyp.lambda0_estimate))
    })?;
    col.constants.lambda0 = Some(lambda0);
    col.constants.eps0 = Some(c.eps0);
    col.constants.delta = Some(c.delta);
    let rate_floor = lambda0 - c.eps0;

    let (chains, gamma0, coherence_rho) = rec.run("discs", || {
        let chains: Vec<DiscChain> = (0..s.chains)
            .map(|i| compute_disc_chain(sys, &sample.orbits[i], c.delta, t.disc_convergence, s.chain_depth))
            .collect::<Result<_>>()?;
        let space = sys.space();
        let slope = chains.iter().flat_map(|ch| &ch.discs).map(|d| d.max_slope(space)).fold(0.0, f64::max);
        let residual = chains.iter().map(|ch| ch.disc().invariance_residual).fold(0.0, f64::max);
        col.check("disc-slope", "unstable-discs", true, slope, "<=", srb_core::manifolds::MAX_SLOPE);
        col.check("disc-invariance", "unstable-discs", true, residual, "<", t.invariance_residual);

        let halton = Halton::new(2 * k, seed, "contraction");
        let records = srb_core::par::try_map_indexed(exec, s.contraction_pairs, |i| {
            let u = halton.point(i as u64);
            let y = DVector::from_fn(k, |j, _| (2.0 * u[j] - 1.0) * 0.95 * c.delta);
            let z = DVector::from_fn(k, |j, _| (2.0 * u[k + j] - 1.0) * 0.95 * c.delta);
            backward_contraction_check(sys, &chains[i % chains.len()], &y, &z, s.chain_depth)
        })?;
        let worst = records.iter().map(|r| r.rate).fold(f64::INFINITY, f64::min);
        let failures = records.iter().filter(|r| !r.passes(lambda0, c.eps0)).count();
        let mut gamma0 = 1.0f64;
        let mut mean_log = vec![0.0; s.chain_depth + 1];
        let mut counted = 0usize;
        for r in records.iter().filter(|r| r.rate.is_finite()) {
            counted += 1;
            for (j, q) in r.ratios.iter().enumerate() {
                gamma0 = gamma0.max(q * (j as f64 * rate_floor).exp());
                mean_log[j] += q.ln();
            }
        }
        mean_log.iter_mut().for_each(|v| *v /= counted.max(1) as f64);
        col.data.convergence.contraction_mean_log_ratio = mean_log;
        col.check("contraction-rate", "unstable-discs", true, worst, ">=", rate_floor);
        col.report("contraction", &json!({ "pairs": records.len(), "min_rate": worst, "failures": failures, "gamma0": gamma0 }));

        let m = s.coherence_discs.max(2);
        let mut discs: Vec<UnstableDisc> = (0..m)
            .map(|j| {
                let xi = DVector::from_element(k, -c.delta / 8.0 + c.delta / 4.0 * j as f64 / (m - 1) as f64);
                // re-iterate forward so consecutive points are exact images
                let start = chains[0].orbit_of(sys, &xi, s.chain_depth)?.points[0].clone();
                let orbit = OrbitSegment { points: forward_orbit(sys, &start, s.chain_depth)? };
                compute_unstable_disc(sys, &orbit, c.delta, t.disc_convergence)
            })
            .collect::<Result<_>>()?;
        discs.extend(chains.iter().skip(1).map(|ch| ch.disc().clone()));
        let coherence = coherence_check(sys, &discs, c.delta / 4.0, exec);
        col.flag("coherence", "unstable-discs", true, coherence.coherent);
        col.report("coherence", &coherence);
        col.report(
            "discs",
            &json!({ "chains": chains.len(), "depth": s.chain_depth, "max_slope": slope, "invariance_residual": residual }),
        );
        Ok((chains, gamma0, coherence.largest_rho))
    })?;
    col.constants.gamma0 = Some(gamma0);

    let field = rec.run("basis-field", || {
        let field = build_basis_field(sys, &split, c.basis_epsilon, c.chart_radius, exec)?;
        col.report(
            "basis_field",
            &json!({ "charts": field.chart_count(), "radius": field.radius, "min_alpha": field.min_alpha, "lipschitz": field.lipschitz }),
        );
        Ok(field)
    })?;

    let distortion_c = rec.run("distortion", || {
        let m_bound = measure_m_bound(sys, &split);
        let halton = Halton::new(2 * k, seed, "distortion");
        let pairs: Vec<DiscPair> = (0..s.distortion_pairs)
            .map(|i| {
                let u = halton.point(i as u64);
                DiscPair {
                    chain: i % chains.len(),
                    y: DVector::from_fn(k, |j, _| (2.0 * u[j] - 1.0) * 0.95 * c.delta),
                    z: DVector::from_fn(k, |j, _| (2.0 * u[k + j] - 1.0) * 0.95 * c.delta),
                }
            })
            .collect();
        let est = estimate_distortion_constant(sys, &field, &chains, &pairs, s.distortion_horizon, m_bound, exec)?;
        col.check("distortion-within-c", "distortion", true, f64::from(u8::from(est.records.iter().all(|r| r.within(est.c)))), "==", 1.0);
        col.check("cauchy-tail", "distortion", true, est.max_cauchy_tail, "<", t.cauchy_tail);
        col.check("comparison-norms", "distortion", true, est.max_comparison_norm, "<=", t.projection_norm);
        if linear {
            col.check("linear-products-exact", "distortion", true, est.measured_sup - 1.0, "<=", t.product_exactness);
        }
        let lower = jacobian_lower_bound(k, m_bound, lambda0);
        col.constants.distortion_c = Some(est.c);
        col.constants.m_bound = Some(m_bound);
        col.constants.ju_lower_bound = Some(lower);
        col.data.convergence.distortion_sup_by_horizon = est.sup_by_horizon.clone();
        col.data.distortion =
            est.records.iter().enumerate().map(|(pair, r)| DistortionRow { pair, partial_products: r.partial_products.clone() }).collect();
        let mut brief = serde_json::to_value(&est)?;
        if let Some(obj) = brief.as_object_mut() {
            obj.remove("records");
        }
        col.data.reports.insert("distortion".into(), brief);
        Ok(est.c)
    })?;

    let leak = LeakModel { delta: c.delta, gamma0, lambda0, eps0: c.eps0 };
    let field_opt = (k > 1).then_some(&field);
    let (full, avg) = rec.run("cesaro", || {
        let full = cesaro_average(sys, field_opt, chains[0].disc(), &leak, 2 * n, 2 * cfg.particles, seed, exec)?;
        let avg = full.truncated(n)?;
        let seeds = seed_measure(sys, chains[0].disc(), cfg.particles.max(srb_core::srb::MIN_SEED_PARTICLES), seed, exec)?;
        let profile = leak_profile(&seeds, &leak, n);
        let fit = fit_leak_rate(&profile, LEAK_FIT_MIN_PARTICLES / seeds.len() as f64);
        // the fitted rate is a sample estimate; it passes when the floor lies
        // within two standard errors below it or the rate exceeds the floor
        col.check("leak-rate", "construction", true, fit.rate + 2.0 * fit.rate_stderr, ">=", rate_floor);
        col.constants.leak_rate = fit.rate.is_finite().then_some(fit.rate);
        col.constants.leak_gamma = fit.gamma.is_finite().then_some(fit.gamma);
        col.report("leak", &fit);
        col.data.convergence.leak_profile = profile;
        col.data.convergence.leaked_by_generation = avg.leaked_by_generation.clone();
        col.report(
            "cesaro",
            &json!({
                "horizon": n,
                "particles": avg.measure.len(),
                "doubled_particles": full.measure.len(),
                "itinerary_residual": avg.measure.itinerary_residual(sys),
                "leak_threshold_at_horizon": leak.threshold(n),
            }),
        );
        Ok((full, avg))
    })?;

    let (bx, assignment, samples) = rec.run("transversal", || {
        let plain = sample_attractor(sys, s.transversal_samples, s.transient, 0, seed, exec)?;
        let samples: Vec<DVector<f64>> = plain.points().cloned().collect();
        let anchor = compute_disc_chain(sys, &sample.orbits[s.chains], c.delta, t.disc_convergence, 0)?;
        let settings = BoxSettings { epsilon: c.epsilon, rho0: c.rho0, cell_width: c.cell_width, ..BoxSettings::default() };
        let bx = build_transversal(sys, anchor.disc(), &samples, settings, Some(coherence_rho))?;
        let assignment = assign_particles(sys, &bx, &avg.measure, exec);
        col.check("box-boundary-mass", "construction", false, assignment.boundary_mass, "<", bx.settings.boundary_tol);
        col.constants.rho0 = Some(bx.settings.rho0);
        col.constants.epsilon = Some(bx.settings.epsilon);
        col.constants.fibers = Some(bx.fibers.len());
        col.constants.box_mass = Some(assignment.box_mass);
        col.report(
            "transversal",
            &json!({
                "anchor": bx.anchor().as_slice(),
                "rho0": bx.settings.rho0,
                "rho0_requested": bx.rho0_requested,
                "epsilon": bx.settings.epsilon,
                "cell_width": bx.settings.cell_width,
                "fibers": bx.fibers,
                "excluded_clusters": bx.excluded_clusters,
                "box_mass": assignment.box_mass,
                "boundary_mass": assignment.boundary_mass,
            }),
        );
        Ok((bx, assignment, samples))
    })?;

    rec.run("density", || {
        let density = if k == 1 { Some(density_field(&avg.measure, &assignment)?) } else { None };
        if let Some(d) = &density {
            let (lo, hi) = d.range();
            col.flag("density-within-c", "construction", true, d.within(distortion_c));
            if linear {
                let dev = (hi - 1.0).abs().max((1.0 - lo).abs());
                col.check("linear-density-uniform", "construction", true, dev, "<=", t.uniform_density);
            }
            col.report(
                "density",
                &json!({ "p_min": lo, "p_max": hi, "pieces": d.pieces, "partial_pieces": d.partial_pieces, "trapezoid_deviation": d.trapezoid_deviation }),
            );
        }
        let conditional = conditional_density_report(&avg.measure, &bx, &assignment, density.as_ref(), distortion_c, s.min_fiber_particles);
        let sandwich = cylinder_sandwich(&avg.measure, &bx, &assignment, distortion_c, s.cylinders, seed);
        let refinement = partition_refinement_check(sys, &avg.measure, &bx, &samples, s.refinement_levels, distortion_c, s.min_fiber_particles, exec)?;
        col.flag("cylinder-sandwich", "construction", true, sandwich.passed);
        col.flag("conditional-densities", "construction", false, conditional.verdict == Verdict::SrbConsistent);
        col.flag("refinement-stable", "construction", false, refinement.stable);
        col.consistent = conditional.verdict == Verdict::SrbConsistent
            && sandwich.passed
            && density.as_ref().is_none_or(|d| d.within(distortion_c));
        col.data.density_histograms = conditional
            .fibers
            .iter()
            .map(|f| FiberHistogram { fiber: f.fiber, particles: f.particles, mass: f.mass, ratios: f.ratios.clone() })
            .collect();
        col.report("conditional", &conditional);
        col.report("sandwich", &sandwich);
        col.report("refinement", &refinement);
        Ok(())
    })?;

    rec.run("marginals", || {
        let domain = system_domain(sys)?;
        col.data.marginals = (0..sys.dim())
            .map(|axis| Marginal {
                axis,
                lo: domain.lo[axis],
                hi: domain.hi[axis],
                masses: marginal_histogram(&avg.measure, axis, domain.lo[axis], domain.hi[axis], t.marginal_bins),
            })
            .collect();
        let tv = marginal_tv_uniform(&avg.measure, 0, domain.lo[0], domain.hi[0], t.marginal_bins);
        col.check("marginal-tv", "construction", solenoid, tv, "<", t.marginal_tv);
        if linear {
            let spread = cs_spread(sys, &avg.measure, &chains[0].disc().frame);
            let bound = 0.5f64.powi(n as i32) * sys.trapping_diameter();
            col.check("cs-spread", "construction", true, spread, "<=", bound);
        }
        col.report("marginal", &json!({ "axis": 0, "bins": t.marginal_bins, "total_variation": tv }));
        Ok(())
    })?;

    rec.run("weak-star", || {
        let domain = system_domain(sys)?;
        let trace = lp_trace_of(&full.measure, n, &domain, t.lp_resolution)?;
        let last = trace.last().map_or(f64::NAN, |p| p.distance);
        let monotone = trace.windows(2).all(|w| w[1].distance <= w[0].distance);
        col.flag("lp-decreasing", "weak-star", true, monotone);
        col.check("lp-final", "weak-star", true, last, "<", t.levy_prokhorov);
        col.data.convergence.lp_trace = trace;

        let steps = s.portmanteau_steps;
        let horizons: Vec<usize> = (1..=steps).map(|i| (i * n).div_ceil(steps).max(1)).collect();
        let views: Vec<Truncation> = horizons.iter().map(|&h| Truncation::new(&full.measure, h)).collect();
        let refs: Vec<&dyn PointCloud> = views.iter().map(|v| v as &dyn PointCloud).collect();
        let theta = bx.anchor()[0];
        let quarter = 0.125 * (domain.hi[0] - domain.lo[0]);
        let mut bounds: Vec<(f64, f64)> = domain.lo.iter().zip(&domain.hi).map(|(a, b)| (*a, *b)).collect();
        bounds[0] = (theta - quarter, theta + quarter);
        let set = BoxSet::single(bounds);
        let shell = (domain.hi[0] - domain.lo[0]) / t.portmanteau_bins as f64;
        let report = portmanteau_check(&refs, Some(&full.measure), &set, &domain, shell, t.portmanteau)?;
        col.flag("portmanteau", "weak-star", false, report.verdict == PortmanteauVerdict::Converges);
        col.data.convergence.portmanteau = horizons.iter().copied().zip(report.masses.iter().copied()).collect();
        col.report("portmanteau", &report);
        Ok(())
    })?;

    col.snapshot = Some(full.measure);
    col.sample = Some(avg.measure);
    Ok(())
}

/// `LP(μ_m, μ_2m)` for `m` in [`lp_horizons`], from a doubled-horizon average.
pub fn lp_trace_of(doubled: &EmpiricalMeasure, n: usize, domain: &Domain, resolution: usize) -> Result<Vec<LpPoint>> {
    lp_horizons(n)
        .into_iter()
        .map(|m| {
            let e = levy_prokhorov(&Truncation::new(doubled, m), &Truncation::new(doubled, 2 * m), domain, resolution)?;
            Ok(LpPoint { horizon: m, doubled: 2 * m, distance: e.distance, grid_diameter: e.grid_diameter })
        })
        .collect()
}

/// Positions, weights and generations of a Cesàro average.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub generations: Vec<u32>,
}

impl Snapshot {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// The particles with generation below `horizon`.
    pub fn truncated(&self, horizon: usize) -> Result<PointMeasure> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| (self.generations[i] as usize) < horizon).collect();
        let points = keep.iter().flat_map(|&i| self.points[i * self.dim..(i + 1) * self.dim].iter().copied()).collect();
        PointMeasure::new(self.dim, points, keep.iter().map(|&i| self.weights[i]).collect())
    }
}

pub fn write_snapshot(path: &Path, m: &EmpiricalMeasure) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&(m.dim as u64).to_le_bytes())?;
    w.write_all(&(m.len() as u64).to_le_bytes())?;
    for v in m.points.iter().chain(&m.weights) {
        w.write_all(&v.to_le_bytes())?;
    }
    for g in &m.generations {
        w.write_all(&g.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingStage(format!("{} not found", path.display())),
        _ => Error::Io(e),
    })?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::InvalidInput("not a measure snapshot".into()));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let dim = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let len = u64::from_le_bytes(word) as usize;
    let mut read_f64 = |count: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        r.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    };
    let points = read_f64(dim * len)?;
    let weights = read_f64(len)?;
    let mut buf = vec![0u8; len * 4];
    r.read_exact(&mut buf)?;
    let generations = buf.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Snapshot { dim, points, weights, generations })
}

fn write_subsample(path: &Path, m: &EmpiricalMeasure, target: usize) -> Result<()> {
    let stride = (m.len() / target.max(1)).max(1);
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..m.dim).map(|j| format!("x{j}")).collect();
    writeln!(w, "{},weight,generation", header.join(","))?;
    for i in (0..m.len()).step_by(stride) {
        let coords: Vec<String> = m.point_slice(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{}", coords.join(","), m.weights[i], m.generations[i])?;
    }
    w.flush()?;
    Ok(())
}
