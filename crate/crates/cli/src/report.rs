//! Human-readable summaries and plot-ready CSVs from a finished run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{json, Value};
use srb_core::{Error, Result};

use crate::pipeline::{read_json, RunData, Summary, DATA_FILE, SUMMARY_FILE};

pub const REPORT_SCHEMA: &str = "srb-report/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Json,
    Csv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "md",
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidInput(format!("unknown report format '{other}'"))),
        }
    }
}

/// One summary row; `value` is either a number or text.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub quantity: String,
    pub value: Value,
}

fn num(quantity: impl Into<String>, v: Option<f64>) -> Row {
    Row { quantity: quantity.into(), value: v.map_or(Value::Null, |x| json!(x)) }
}

fn text(quantity: impl Into<String>, v: impl Into<String>) -> Row {
    Row { quantity: quantity.into(), value: Value::String(v.into()) }
}

/// The summary table shared by all three formats.
pub fn summary_rows(s: &Summary) -> Vec<Row> {
    let c = &s.constants;
    let mut rows = vec![
        text("system", &s.system),
        num("k", Some(s.k as f64)),
        num("horizon", Some(s.horizon as f64)),
        num("particles", Some(s.particles as f64)),
        num("seed", Some(s.seed as f64)),
        text("verdict", &s.verdict),
        num("exit_code", Some(f64::from(s.exit_code))),
        num("lambda0", c.lambda0),
        num("eps0", c.eps0),
        num("gamma0", c.gamma0),
        num("delta", c.delta),
        num("rho0", c.rho0),
        num("epsilon", c.epsilon),
        num("distortion_c", c.distortion_c),
        num("m_bound", c.m_bound),
        num("ju_lower_bound", c.ju_lower_bound),
        num("leak_rate", c.leak_rate),
        num("leak_gamma", c.leak_gamma),
        num("fibers", c.fibers.map(|f| f as f64)),
        num("box_mass", c.box_mass),
    ];
    for p in &s.lp_trace {
        rows.push(num(format!("lp_{}_{}", p.horizon, p.doubled), Some(p.distance)));
    }
    for ch in &s.checks {
        rows.push(num(format!("check_{}", ch.name), ch.value));
        rows.push(text(format!("check_{}_passed", ch.name), if ch.passed { "true" } else { "false" }));
    }
    rows
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Number(n) => n.as_f64().map_or_else(|| n.to_string(), |x| x.to_string()),
        other => other.to_string(),
    }
}

fn render_summary(rows: &[Row], format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Markdown => {
            let mut out = String::from("# Run summary\n\n| quantity | value |\n|---|---|\n");
            for r in rows {
                let _ = writeln!(out, "| {} | {} |", r.quantity, cell(&r.value));
            }
            out
        }
        ReportFormat::Csv => {
            let mut out = String::from("quantity,value\n");
            for r in rows {
                let _ = writeln!(out, "{},{}", r.quantity, cell(&r.value));
            }
            out
        }
        ReportFormat::Json => {
            let body: Vec<Value> = rows.iter().map(|r| json!({ "quantity": r.quantity, "value": r.value })).collect();
            let mut s = serde_json::to_string_pretty(&json!({ "schema": REPORT_SCHEMA, "rows": body }))?;
            s.push('\n');
            s
        }
    })
}

fn marginals_csv(d: &RunData) -> String {
    let mut out = String::from("axis,bin,lo,hi,mass\n");
    for m in &d.marginals {
        let w = (m.hi - m.lo) / m.masses.len() as f64;
        for (b, mass) in m.masses.iter().enumerate() {
            let lo = m.lo + w * b as f64;
            let _ = writeln!(out, "{},{},{},{},{}", m.axis, b, lo, lo + w, mass);
        }
    }
    out
}

fn density_csv(d: &RunData) -> String {
    let mut out = String::from("fiber,particles,bin,ratio\n");
    for f in &d.density_histograms {
        for (b, r) in f.ratios.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", f.fiber, f.particles, b, r);
        }
    }
    out
}

fn convergence_csv(d: &RunData) -> String {
    let c = &d.convergence;
    let mut out = String::from("series,index,value\n");
    for p in &c.lp_trace {
        let _ = writeln!(out, "levy_prokhorov,{},{}", p.horizon, p.distance);
    }
    for (h, m) in &c.portmanteau {
        let _ = writeln!(out, "portmanteau_mass,{h},{m}");
    }
    let series: [(&str, &[f64], usize); 4] = [
        ("leaked_mass", &c.leak_profile, 1),
        ("leaked_by_generation", &c.leaked_by_generation, 0),
        ("distortion_sup", &c.distortion_sup_by_horizon, 1),
        ("contraction_mean_log_ratio", &c.contraction_mean_log_ratio, 0),
    ];
    for (name, values, offset) in series {
        for (i, v) in values.iter().enumerate() {
            let _ = writeln!(out, "{name},{},{v}", i + offset);
        }
    }
    out
}

fn distortion_csv(d: &RunData) -> String {
    let mut out = String::from("pair,horizon,product\n");
    for row in &d.distortion {
        for (m, p) in row.partial_products.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", row.pair, m + 1, p);
        }
    }
    out
}

fn checks_csv(s: &Summary) -> String {
    let mut out = String::from("name,suite,primary,relation,threshold,value,passed\n");
    for c in &s.checks {
        let value = c.value.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(out, "{},{},{},{},{},{},{}", c.name, c.suite, c.primary, c.relation, c.threshold, value, c.passed);
    }
    out
}

/// Writes `report.{md,json,csv}` plus five CSVs into `run_dir`; returns the
/// written paths.
pub fn emit_report(run_dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    let summary: Summary = read_json(&run_dir.join(SUMMARY_FILE))?;
    if !summary.complete {
        return Err(Error::MissingStage(format!("run stopped at stage '{}'", summary.failed_stage.as_deref().unwrap_or("unknown"))));
    }
    let data: RunData = read_json(&run_dir.join(DATA_FILE))?;
    let files = [
        (format!("report.{}", format.extension()), render_summary(&summary_rows(&summary), format)?),
        ("marginals.csv".to_string(), marginals_csv(&data)),
        ("density_histograms.csv".to_string(), density_csv(&data)),
        ("convergence.csv".to_string(), convergence_csv(&data)),
        ("distortion.csv".to_string(), distortion_csv(&data)),
        ("checks.csv".to_string(), checks_csv(&summary)),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = run_dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}
