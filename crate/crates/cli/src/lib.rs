//! Command-line driver: builds partitions, runs the Monte Carlo harness and
//! writes hashed JSON artifacts, CSV tables and SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ruled_decoup::exact::{fmt_q, parse_q, pow2, to_f64, Q};
use ruled_decoup::partition::{
    annulus_partition, curve_partition, flat_partition, rectangular_partition, AnnulusIndex, PartitionReport,
};
use ruled_decoup::verify::{
    decoupling_ratio_caps, parabola_dec_oracle, theoretical_constant, ConstantInputs, DecouplingEstimate, FormulaId,
    SamplePlan, Stratification,
};
use ruled_decoup::{Cap, Curve, Error as CoreError, Sign};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Full run configuration; embedded verbatim in every artifact.
#[derive(Parser, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[command(name = "ruled-decoup", version, about = "Decoupling partitions of ruled hypersurfaces")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
    /// Flatness acceptance threshold, in units of δ.
    #[arg(long, global = true, default_value_t = 10.0)]
    pub tolerance_multiplier: f64,
}

#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Build a cap partition and check tiling and flatness.
    Partition(PartitionArgs),
    /// Estimate the decoupling ratio of a saved partition.
    Verify(VerifyArgs),
    /// Empirical parabola decoupling constant.
    Oracle(OracleArgs),
    /// Evaluate a closed-form constant bound.
    Constant(ConstantArgs),
    /// Tabulate estimates as CSV and plot them as SVG.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Flat,
    Rectangular,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionArgs {
    #[arg(long)]
    pub n: usize,
    /// Scale, as "2^-12", "1/4096" or a decimal.
    #[arg(long)]
    pub delta: String,
    #[arg(long, default_value = "1/8")]
    pub eps: String,
    /// "moment" or "curve:<file.json>".
    #[arg(long, default_value = "moment")]
    pub surface: String,
    #[arg(long, value_enum, default_value_t = Mode::Flat)]
    pub mode: Mode,
    /// Only this annulus (comma-separated k_1..k_{n-1}), all sign patterns.
    #[arg(long)]
    pub annulus: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyArgs {
    /// Partition artifact written by `partition`.
    #[arg(long)]
    pub caps: PathBuf,
    #[arg(long, default_value_t = 6.0)]
    pub p: f64,
    /// Neighborhood scale for the atoms; defaults to the partition's δ.
    #[arg(long)]
    pub delta: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub trials: usize,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Side of the sampling box; defaults to 1/δ.
    #[arg(long)]
    pub box_side: Option<f64>,
    #[arg(long, default_value_t = ruled_decoup::verify::DEFAULT_ATOMS_PER_CAP)]
    pub atoms_per_cap: usize,
    /// Latin-hypercube sampling instead of plain uniform.
    #[arg(long)]
    pub stratified: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleArgs {
    #[arg(long)]
    pub delta: String,
    #[arg(long, default_value_t = 6.0)]
    pub p: f64,
    #[arg(long, default_value_t = 16)]
    pub trials: usize,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub box_side: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantArgs {
    /// moment, annulus-long, annulus-short or curve.
    #[arg(long)]
    pub formula: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub delta: String,
    #[arg(long)]
    pub eps: String,
    #[arg(long, default_value_t = 1.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_gmw: f64,
    #[arg(long, default_value_t = 1.0)]
    pub b: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Estimate artifacts written by `verify`.
    #[arg(long, num_args = 1.., required = true)]
    pub estimates: Vec<PathBuf>,
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub svg: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    Validation,
    Io,
    Verification,
}

/// Machine-readable failure record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{kind:?}: {message}")]
pub struct CliError {
    pub kind: FailureKind,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub path: Option<PathBuf>,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            FailureKind::Validation | FailureKind::Io => 1,
            FailureKind::Verification => 2,
        }
    }

    fn validation(message: impl Into<String>) -> Self {
        CliError { kind: FailureKind::Validation, message: message.into(), path: None }
    }

    fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError { kind: FailureKind::Io, message: format!("{}: {err}", path.display()), path: Some(path.to_path_buf()) }
    }

    fn verification(message: impl Into<String>) -> Self {
        CliError { kind: FailureKind::Verification, message: message.into(), path: None }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Hypothesis(_) | CoreError::OutsideNeighborhood { .. } => CliError::verification(e.to_string()),
            _ => CliError::validation(e.to_string()),
        }
    }
}

/// JSON artifact: the config that produced it, a content hash and the payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub config: RunConfig,
    /// sha256 of the compact JSON of (config, result).
    pub hash: String,
    pub result: T,
}

impl<T: Serialize> Artifact<T> {
    pub fn new(config: &RunConfig, result: T) -> Self {
        let hash = content_hash(config, &result);
        Artifact { config: config.clone(), hash, result }
    }
}

pub fn content_hash<T: Serialize>(config: &RunConfig, result: &T) -> String {
    let bytes = serde_json::to_vec(&(config, result)).expect("artifact serializes");
    Sha256::digest(&bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

/// Payload of an artifact file, or the bare payload.
fn read_payload<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let value: serde_json::Value = read_json(path)?;
    let inner = match value.get("result") {
        Some(r) if value.get("config").is_some() => r.clone(),
        _ => value,
    };
    serde_json::from_value(inner).map_err(|e| CliError::io(path, e))
}

/// What a successful or verification-failed run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub hash: String,
}

fn parse_scale(s: &str, what: &str) -> Result<Q, CliError> {
    parse_q(s).map_err(|e| CliError::validation(format!("--{what}: {e}")))
}

fn check_delta(delta: &Q) -> Result<(), CliError> {
    if *delta <= Q::from_integer(0.into()) || *delta >= Q::new(1.into(), 2.into()) {
        return Err(CliError::validation(format!("δ = {} must lie in (0, 1/2)", fmt_q(delta))));
    }
    Ok(())
}

fn check_p(p: f64) -> Result<(), CliError> {
    if !(2.0..=6.0).contains(&p) {
        return Err(CliError::validation(format!("p = {p} must lie in [2, 6]")));
    }
    Ok(())
}

/// Execute one command. Artifacts are written before a verification failure is reported.
pub fn run(config: &RunConfig) -> Result<Outcome, CliError> {
    if !(config.tolerance_multiplier.is_finite() && config.tolerance_multiplier > 0.0) {
        return Err(CliError::validation("--tolerance-multiplier must be positive"));
    }
    match &config.command {
        Command::Partition(a) => run_partition(config, a),
        Command::Verify(a) => run_verify(config, a),
        Command::Oracle(a) => run_oracle(config, a),
        Command::Constant(a) => run_constant(config, a),
        Command::Report(a) => run_report(config, a),
    }
}

enum Surface {
    Moment,
    Curve(Curve),
}

fn parse_surface(s: &str) -> Result<Surface, CliError> {
    if s == "moment" {
        return Ok(Surface::Moment);
    }
    let Some(path) = s.strip_prefix("curve:") else {
        return Err(CliError::validation(format!("--surface must be moment or curve:<file>, got {s:?}")));
    };
    let curve: Curve = read_json(Path::new(path))?;
    Ok(Surface::Curve(curve))
}

fn parse_annulus(s: &str, n: usize) -> Result<Vec<u32>, CliError> {
    let k: Vec<u32> = s
        .split(',')
        .map(|v| v.trim().parse::<u32>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::validation(format!("--annulus must be comma-separated integers, got {s:?}")))?;
    if k.len() + 1 != n {
        return Err(CliError::validation(format!("--annulus needs {} entries, got {}", n - 1, k.len())));
    }
    Ok(k)
}

fn run_partition(config: &RunConfig, a: &PartitionArgs) -> Result<Outcome, CliError> {
    let delta = parse_scale(&a.delta, "delta")?;
    let eps = parse_scale(&a.eps, "eps")?;
    check_delta(&delta)?;
    if a.n < 3 {
        return Err(CliError::validation(format!("--n must be at least 3, got {}", a.n)));
    }
    let surface = parse_surface(&a.surface)?;
    let annulus = a.annulus.as_deref().map(|s| parse_annulus(s, a.n)).transpose()?;
    if annulus.is_some() && (a.mode != Mode::Flat || !matches!(surface, Surface::Moment)) {
        return Err(CliError::validation("--annulus applies to flat partitions of the moment surface"));
    }
    let report = match (&surface, a.mode) {
        (Surface::Curve(c), Mode::Flat) => {
            if c.n != a.n {
                return Err(CliError::validation(format!("curve has n = {}, --n is {}", c.n, a.n)));
            }
            curve_partition(c, &delta, &eps)?
        }
        (Surface::Curve(_), Mode::Rectangular) => {
            return Err(CliError::validation("rectangular mode is only defined for the moment surface"))
        }
        (Surface::Moment, Mode::Rectangular) => rectangular_partition(a.n, &delta)?,
        (Surface::Moment, Mode::Flat) => match &annulus {
            None => flat_partition(a.n, &delta, &eps)?,
            Some(k) => single_annulus(a.n, &delta, &eps, k)?,
        },
    };
    let failure = partition_failure(config, a.mode, &report);
    let artifact = Artifact::new(config, &report);
    write_json(&a.out, &artifact)?;
    match failure {
        Some(msg) => Err(CliError { path: Some(a.out.clone()), ..CliError::verification(msg) }),
        None => Ok(Outcome { artifacts: vec![a.out.clone()], hash: artifact.hash }),
    }
}

/// All sign patterns of one annulus, each tiled against itself.
fn single_annulus(n: usize, delta: &Q, eps: &Q, k: &[u32]) -> Result<PartitionReport, CliError> {
    let mut merged: Option<PartitionReport> = None;
    let mut all_tiled = true;
    for alpha in Sign::patterns(n - 1) {
        let idx = AnnulusIndex::new(n, delta.clone(), alpha, k.to_vec())?;
        let r = annulus_partition(&idx, eps)?;
        all_tiled &= r.tiling_ok;
        merged = Some(match merged {
            None => r,
            Some(m) => m.merge(r)?,
        });
    }
    let mut report = merged.expect("at least one sign pattern");
    report.tiling_ok = all_tiled;
    report.tiling_note = Some("tiled per sign pattern against its own annulus".into());
    Ok(report)
}

/// Acceptance predicate for a constructed partition; Some(reason) when it fails.
fn partition_failure(config: &RunConfig, mode: Mode, report: &PartitionReport) -> Option<String> {
    let tol = config.tolerance_multiplier;
    if !report.tiling_ok {
        return Some(format!("tiling check failed: {}", report.tiling_note.clone().unwrap_or_default()));
    }
    match mode {
        Mode::Flat => {
            let worst = report.curve.as_ref().map_or(report.max_flatness_ratio, |c| c.max_mapped_ratio);
            (worst > tol).then(|| format!("a cap has flatness deficit {worst:.3} δ > {tol} δ"))
        }
        Mode::Rectangular => match report.rect_fraction {
            Some(f) if f < 1.0 => Some(format!("only {:.4} of caps pass the rectangularity test", f)),
            _ => None,
        },
    }
}

fn load_caps(path: &Path) -> Result<(Vec<Cap>, Q), CliError> {
    let report: PartitionReport = read_payload(path)?;
    let caps: Vec<Cap> = report.caps().collect();
    if caps.is_empty() {
        return Err(CliError { path: Some(path.to_path_buf()), ..CliError::validation("partition has no caps") });
    }
    Ok((caps, report.delta))
}

fn run_verify(config: &RunConfig, a: &VerifyArgs) -> Result<Outcome, CliError> {
    check_p(a.p)?;
    let (caps, report_delta) = load_caps(&a.caps)?;
    let delta = match &a.delta {
        Some(d) => parse_scale(d, "delta")?,
        None => report_delta,
    };
    check_delta(&delta)?;
    let d = to_f64(&delta);
    let side = a.box_side.unwrap_or(1.0 / d);
    let strat = if a.stratified { Stratification::StratifiedPerAxis } else { Stratification::Uniform };
    let plan = SamplePlan::new(side, a.samples, a.seed, strat)?;
    let est = decoupling_ratio_caps(&caps, d, a.p, a.trials, a.atoms_per_cap, &plan)?;
    let artifact = Artifact::new(config, &est);
    write_json(&a.out, &artifact)?;
    Ok(Outcome { artifacts: vec![a.out.clone()], hash: artifact.hash })
}

fn run_oracle(config: &RunConfig, a: &OracleArgs) -> Result<Outcome, CliError> {
    check_p(a.p)?;
    let delta = parse_scale(&a.delta, "delta")?;
    check_delta(&delta)?;
    let d = to_f64(&delta);
    let plan = SamplePlan::new(a.box_side.unwrap_or(1.0 / d), a.samples, a.seed, Stratification::Uniform)?;
    let est = parabola_dec_oracle(d, a.p, a.trials, &plan)?;
    let artifact = Artifact::new(config, &est);
    write_json(&a.out, &artifact)?;
    Ok(Outcome { artifacts: vec![a.out.clone()], hash: artifact.hash })
}

fn run_constant(config: &RunConfig, a: &ConstantArgs) -> Result<Outcome, CliError> {
    let formula: FormulaId = a.formula.parse()?;
    let delta = to_f64(&parse_scale(&a.delta, "delta")?);
    let eps = to_f64(&parse_scale(&a.eps, "eps")?);
    let inputs = ConstantInputs { n: a.n, delta, eps, kappa: a.kappa, c_gmw: a.c_gmw, b: a.b };
    let bound = theoretical_constant(formula, inputs)?;
    let artifact = Artifact::new(config, &bound);
    write_json(&a.out, &artifact)?;
    Ok(Outcome { artifacts: vec![a.out.clone()], hash: artifact.hash })
}

/// One CSV row of a report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub delta: f64,
    pub p: f64,
    pub ratio_p25: f64,
    pub ratio_p50: f64,
    pub ratio_p75: f64,
    pub trials: usize,
}

impl From<&DecouplingEstimate> for ReportRow {
    fn from(e: &DecouplingEstimate) -> Self {
        ReportRow {
            delta: e.delta,
            p: e.p,
            ratio_p25: e.ratio_quantiles.p25,
            ratio_p50: e.ratio_quantiles.p50,
            ratio_p75: e.ratio_quantiles.p75,
            trials: e.trials,
        }
    }
}

pub const CSV_HEADER: &str = "delta,p,ratio_p25,ratio_p50,ratio_p75,trials";

/// CSV text; numbers carry 12 significant digits. Lines starting with '#' are metadata.
pub fn emit_csv(rows: &[ReportRow], meta: &[String]) -> String {
    let mut out = String::new();
    for m in meta {
        let _ = writeln!(out, "# {m}");
    }
    let _ = writeln!(out, "{CSV_HEADER}");
    for r in rows {
        let _ = writeln!(
            out,
            "{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{}",
            r.delta, r.p, r.ratio_p25, r.ratio_p50, r.ratio_p75, r.trials
        );
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>, String> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    if lines.next() != Some(CSV_HEADER) {
        return Err("missing CSV header".into());
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(format!("expected 6 fields in {l:?}"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
            Ok(ReportRow {
                delta: num(f[0])?,
                p: num(f[1])?,
                ratio_p25: num(f[2])?,
                ratio_p50: num(f[3])?,
                ratio_p75: num(f[4])?,
                trials: f[5].parse().map_err(|e| format!("{:?}: {e}", f[5]))?,
            })
        })
        .collect()
}

/// Least-squares slope of ln(y) against ln(x); None with fewer than two distinct x.
pub fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let m = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Log-log plot of the median ratio against 1/δ with quartile bars and the fitted line.
pub fn emit_svg(rows: &[ReportRow], meta: &[String]) -> String {
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let pts: Vec<(f64, f64, f64, f64)> =
        rows.iter().map(|r| ((1.0 / r.delta).log2(), r.ratio_p50.log2(), r.ratio_p25.log2(), r.ratio_p75.log2())).collect();
    let span = |lo: f64, hi: f64| if hi - lo < 1e-9 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let (x0, x1) = span(
        pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = span(
        pts.iter().map(|p| p.2).fold(f64::INFINITY, f64::min),
        pts.iter().map(|p| p.3).fold(f64::NEG_INFINITY, f64::max),
    );
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let slope = fit_slope(&rows.iter().map(|r| (1.0 / r.delta, r.ratio_p50)).collect::<Vec<_>>());
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, "<metadata>{}</metadata>", xml_escape(&meta.join("\n")));
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">log2(1/δ)</text>"#, w / 2.0, h - 20.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" font-size="13" transform="rotate(-90 18 {})" text-anchor="middle">log2(median ratio)</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (x, y, lo, hi) in &pts {
        let _ = writeln!(s, r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="gray"/>"#, sx(*x), sy(*lo), sy(*hi));
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"/>"#, sx(*x), sy(*y));
    }
    let label = match slope {
        Some(m) => {
            let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
            let line = |x: f64| my + m * (x - mx);
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="firebrick" stroke-dasharray="5,4"/>"#,
                sx(x0),
                sy(line(x0)),
                sx(x1),
                sy(line(x1))
            );
            format!("slope = {m:.4}")
        }
        None => "slope = n/a".to_string(),
    };
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="14">{label}</text>"#, pad + 10.0, pad - 20.0);
    s.push_str("</svg>\n");
    s
}

fn run_report(config: &RunConfig, a: &ReportArgs) -> Result<Outcome, CliError> {
    if a.estimates.is_empty() {
        return Err(CliError::validation("report needs at least one estimate"));
    }
    let mut rows: Vec<ReportRow> = Vec::with_capacity(a.estimates.len());
    for path in &a.estimates {
        let est: DecouplingEstimate = read_payload(path)?;
        rows.push(ReportRow::from(&est));
    }
    let hash = content_hash(config, &rows);
    let meta = vec![
        format!("sha256={hash}"),
        format!("config={}", serde_json::to_string(config).expect("config serializes")),
    ];
    fs::write(&a.csv, emit_csv(&rows, &meta)).map_err(|e| CliError::io(&a.csv, e))?;
    fs::write(&a.svg, emit_svg(&rows, &meta)).map_err(|e| CliError::io(&a.svg, e))?;
    Ok(Outcome { artifacts: vec![a.csv.clone(), a.svg.clone()], hash })
}

/// Rayon pool size from RULED_DECOUP_THREADS, when set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("RULED_DECOUP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::validation(format!("RULED_DECOUP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::validation(format!("thread pool: {e}")))
}

/// Exact dyadic display of a scale when possible, for messages.
pub fn describe_scale(delta: &Q) -> String {
    for e in 0..=256 {
        if *delta == pow2(-e) {
            return format!("2^-{e}");
        }
    }
    fmt_q(delta)
}
