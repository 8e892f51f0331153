//! Command-line front end: configuration parsing, scenario orchestration and
//! CSV/SVG emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use crate::analysis::{
    functional_r, in_subspace_s, linear_slope, lyapunov_constants, lyapunov_log_value, subspace_feedback,
    w_transform, LyapunovParams,
};
use crate::error::{Error, Result};
use crate::kernels::{
    boundary_defect, kernel_residual, solve_direct_kernels, KernelOptions, KernelSet, MIN_KERNEL_GRID,
};
use crate::matops::{self, SquareMatrix};
use crate::model::{
    initial_condition, smooth_random_state, validate_config, Grid, InitialCondition, PlantConfig, StateSnapshot,
    ValidatedConfig,
};
use crate::simulator::{
    simulate_observed, simulate_simplified_exact, simulate_simplified_fd, Controller, ScalarTrajectory,
    SimplifiedConfig, SimplifiedInput,
};
use crate::transforms::{forward_transform, invert_kernels, inverse_transform, target_residual};

/// Everything a run needs; identical manifests produce identical files.
#[derive(Debug, Clone, Parser)]
#[command(name = "atachic", version, about = "Backstepping boundary control of hyperbolic systems with zero-speed states")]
pub struct RunManifest {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: RunOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve the kernel equations and write kernels.csv and residuals.csv
    Kernels,
    /// Simulate the plant and write fields.csv and norms.csv
    Simulate,
    /// Target-system residuals, transform roundtrip and Lyapunov report
    Verify,
    /// Obstruction quantities of the simplified system
    Obstruct,
    /// Validate a configuration
    Check,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Kernels => "kernels",
            Command::Simulate => "simulate",
            Command::Verify => "verify",
            Command::Obstruct => "obstruct",
            Command::Check => "check",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerChoice {
    /// U ≡ 0
    Open,
    /// backstepping feedback
    Backstep,
    /// U = −q p(t,0), i.e. u(t,0) = 0
    Zero,
}

#[derive(Debug, Clone, Args)]
pub struct RunOptions {
    /// JSON configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Spatial cells of the simulation grid
    #[arg(long, global = true, default_value_t = 200)]
    pub grid: usize,
    /// Cells of the kernel lattice (defaults to --grid, at least 16)
    #[arg(long, global = true)]
    pub kernel_grid: Option<usize>,
    #[arg(long, global = true, default_value_t = 10.0)]
    pub tfinal: f64,
    #[arg(long, global = true, default_value_t = 0.9)]
    pub cfl: f64,
    #[arg(long, global = true, value_enum, default_value_t = ControllerChoice::Backstep)]
    pub controller: ControllerChoice,
    /// zero | constant:u,p,v | sine:ku,kp,kv | samples:FILE
    #[arg(long, global = true, default_value = "sine:1,1,1")]
    pub ic: String,
    /// Store every N-th time level in the output files
    #[arg(long, global = true, default_value_t = 1)]
    pub stride: usize,
    /// Seed for the random smooth roundtrip states
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Also write SVG line plots
    #[arg(long, global = true)]
    pub svg: bool,
}

/// A parsed (not yet validated) configuration document.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigDoc {
    Plant(PlantConfig),
    Simplified(SimplifiedConfig),
}

const PLANT_KEYS: [&str; 12] = [
    "n", "lambda1", "lambda2", "sigma12", "sigma21", "theta1", "theta2", "omega1", "omega2", "psi", "q", "rho",
];
const SIMPLIFIED_KEYS: [&str; 3] = ["lambda", "psi", "omega"];

fn parse_err(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{path}: {msg}"))
}

fn number(v: &Value, path: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| parse_err(path, "expected a number"))
}

fn vector(v: &Value, path: &str, len: usize) -> Result<Vec<f64>> {
    let arr = v.as_array().ok_or_else(|| parse_err(path, "expected an array"))?;
    if arr.len() != len {
        return Err(parse_err(path, format!("expected {len} entries, got {}", arr.len())));
    }
    arr.iter()
        .enumerate()
        .map(|(k, x)| number(x, &format!("{path}[{k}]")))
        .collect()
}

fn check_keys(obj: &Map<String, Value>, allowed: &[&str]) -> Result<()> {
    if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(parse_err(k, format!("unknown key (allowed: {})", allowed.join(", "))));
    }
    if let Some(k) = allowed.iter().find(|k| !obj.contains_key(**k)) {
        return Err(parse_err(k, "missing key"));
    }
    Ok(())
}

/// Parses a plant document (keys `n, lambda1, …, rho`) or a simplified one
/// (`lambda, psi, omega`). Structural errors name the offending key path.
pub fn parse_config(text: &str) -> Result<ConfigDoc> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Parse(format!("malformed JSON: {e}")))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::Parse("top level must be a JSON object".into()))?;
    if obj.contains_key("lambda") {
        check_keys(obj, &SIMPLIFIED_KEYS)?;
        return Ok(ConfigDoc::Simplified(SimplifiedConfig {
            lambda: number(&obj["lambda"], "lambda")?,
            psi: number(&obj["psi"], "psi")?,
            omega: number(&obj["omega"], "omega")?,
        }));
    }
    check_keys(obj, &PLANT_KEYS)?;
    let n = obj["n"]
        .as_u64()
        .filter(|&n| n > 0)
        .ok_or_else(|| parse_err("n", "expected a positive integer"))? as usize;
    let rows = obj["psi"].as_array().ok_or_else(|| parse_err("psi", "expected an array of rows"))?;
    if rows.len() != n {
        return Err(parse_err("psi", format!("expected {n} rows, got {}", rows.len())));
    }
    let rows = rows
        .iter()
        .enumerate()
        .map(|(k, r)| vector(r, &format!("psi[{k}]"), n))
        .collect::<Result<Vec<_>>>()?;
    let f = |key: &str| number(&obj[key], key);
    let vec = |key: &str| vector(&obj[key], key, n);
    Ok(ConfigDoc::Plant(PlantConfig {
        n,
        lambda1: f("lambda1")?,
        lambda2: f("lambda2")?,
        sigma12: f("sigma12")?,
        sigma21: f("sigma21")?,
        theta1: vec("theta1")?,
        theta2: vec("theta2")?,
        omega1: vec("omega1")?,
        omega2: vec("omega2")?,
        psi: SquareMatrix::from_rows(&rows)?,
        q: f("q")?,
        rho: f("rho")?,
    }))
}

/// Serializes a plant configuration in the format read by [`parse_config`].
pub fn plant_to_json(cfg: &PlantConfig) -> String {
    let psi: Vec<Vec<f64>> = (0..cfg.n).map(|r| (0..cfg.n).map(|c| cfg.psi[(r, c)]).collect()).collect();
    let doc = serde_json::json!({
        "n": cfg.n,
        "lambda1": cfg.lambda1,
        "lambda2": cfg.lambda2,
        "sigma12": cfg.sigma12,
        "sigma21": cfg.sigma21,
        "theta1": cfg.theta1,
        "theta2": cfg.theta2,
        "omega1": cfg.omega1,
        "omega2": cfg.omega2,
        "psi": psi,
        "q": cfg.q,
        "rho": cfg.rho,
    });
    serde_json::to_string_pretty(&doc).expect("plain JSON values")
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Rows of numbers under a single header, 17 significant digits.
struct Csv {
    text: String,
}

impl Csv {
    fn new(header: &[String]) -> Self {
        Csv { text: header.join(",") + "\n" }
    }

    fn row(&mut self, values: impl IntoIterator<Item = f64>) {
        let cells: Vec<String> = values.into_iter().map(num).collect();
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    fn write(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, &self.text)?;
        Ok(path)
    }
}

fn header(fixed: &[&str], numbered: &[(&str, usize)]) -> Vec<String> {
    let mut h: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
    for (prefix, count) in numbered {
        h.extend((1..=*count).map(|k| format!("{prefix}_{k}")));
    }
    h
}

/// Two-column `quantity,value` report.
fn report_csv(rows: &[(String, f64)]) -> String {
    let mut s = String::from("quantity,value\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{}", num(*v));
    }
    s
}

/// A minimal line plot with one polyline per series.
pub fn line_plot_svg(title: &str, x: &[f64], series: &[(&str, Vec<f64>)], log_y: bool) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#555555"];
    let tf = |y: f64| if log_y { y.log10() } else { y };
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied().map(tf))
        .filter(|y| y.is_finite())
        .collect();
    let (x0, x1) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (mut y0, mut y1) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(y1 > y0) {
        y0 = if y0.is_finite() { y0 - 1.0 } else { 0.0 };
        y1 = y0 + 2.0;
    }
    let xspan = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |v: f64| PAD + (v - x0) / xspan * (W - 2.0 * PAD);
    let py = |v: f64| H - PAD - (v - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<polyline points="{PAD},{PAD} {PAD},{b} {r},{b}" fill="none" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let ylabel = |v: f64| if log_y { format!("1e{v:.1}") } else { format!("{v:.3}") };
    let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, H - PAD, ylabel(y0));
    let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, PAD + 4.0, ylabel(y1));
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{x0:.3}</text>"#, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x1:.3}</text>"#, W - PAD, H - PAD + 16.0);
    for (k, (name, ser)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = x
            .iter()
            .zip(ser)
            .filter_map(|(&xv, &yv)| {
                let y = tf(yv);
                y.is_finite().then(|| format!("{:.2},{:.2}", px(xv), py(y)))
            })
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            W - PAD - 80.0,
            PAD + 16.0 * (k as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn read_config(opts: &RunOptions) -> Result<ConfigDoc> {
    let path = opts
        .config
        .as_ref()
        .ok_or_else(|| Error::config("config", "--config PATH is required"))?;
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn plant(doc: ConfigDoc, command: Command) -> Result<ValidatedConfig> {
    match doc {
        ConfigDoc::Plant(p) => validate_config(p),
        ConfigDoc::Simplified(_) => Err(Error::config(
            "config",
            format!("`{}` needs a plant configuration (n, lambda1, ...), got a simplified one", command.name()),
        )),
    }
}

fn check_options(opts: &RunOptions) -> Result<()> {
    if opts.grid < 2 {
        return Err(Error::config("grid", "needs at least 2 cells"));
    }
    if opts.kernel_grid.is_some_and(|m| m < 2) {
        return Err(Error::config("kernel-grid", "needs at least 2 cells"));
    }
    if !(opts.tfinal >= 0.0 && opts.tfinal.is_finite()) {
        return Err(Error::config("tfinal", "must be finite and nonnegative"));
    }
    if opts.stride == 0 {
        return Err(Error::config("stride", "must be positive"));
    }
    Ok(())
}

/// Parses `--ic`; `samples:FILE` reads a CSV with header x,u,p,v_1..v_n
/// (or x,u,v for the simplified system).
fn load_ic(spec: &str) -> Result<InitialCondition> {
    let Some(path) = spec.strip_prefix("samples:") else {
        return spec.parse();
    };
    let text = fs::read_to_string(path).map_err(|e| Error::config("ic", format!("cannot read {path}: {e}")))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let head: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::config("ic", format!("{path} is empty")))?
        .split(',')
        .map(str::trim)
        .collect();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); head.len()];
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != head.len() {
            return Err(Error::config("ic", format!("{path} row {} has {} cells", row + 1, cells.len())));
        }
        for (c, cell) in cells.iter().enumerate() {
            let v = cell
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::config("ic", format!("{path} row {}: `{cell}` is not a number", row + 1)))?;
            cols[c].push(v);
        }
    }
    let col = |name: &str| head.iter().position(|h| *h == name).map(|k| cols[k].clone());
    let u = col("u").ok_or_else(|| Error::config("ic", format!("{path} has no u column")))?;
    let mut v: Vec<Vec<f64>> = (1..).map_while(|k| col(&format!("v_{k}"))).collect();
    if v.is_empty() {
        v.extend(col("v"));
    }
    let p = col("p").unwrap_or_else(|| vec![0.0; u.len()]);
    Ok(InitialCondition::Samples { u, p, v })
}

fn kernel_grid(opts: &RunOptions) -> usize {
    opts.kernel_grid.unwrap_or(opts.grid.max(MIN_KERNEL_GRID))
}

fn solve_kernels(cfg: &ValidatedConfig, mk: usize) -> Result<KernelSet> {
    let ks = solve_direct_kernels(cfg, &KernelOptions::new(mk))?;
    if !ks.is_finite() {
        return Err(Error::KernelNoConvergence { iterations: ks.sweeps, last_change: f64::NAN });
    }
    Ok(ks)
}

/// ln V of a plant state through the backstepping transform.
fn log_lyapunov(state: &StateSnapshot, ks: &KernelSet, lp: &LyapunovParams, cfg: &ValidatedConfig) -> f64 {
    match forward_transform(state, ks) {
        Ok((a, b)) => lyapunov_log_value(&a, &b, &state.v, lp, cfg),
        Err(_) => f64::NAN,
    }
}

/// Executes one manifest, writing files under `--out`, and returns the
/// human-readable report lines.
pub fn run(manifest: &RunManifest) -> Result<Vec<String>> {
    let opts = &manifest.opts;
    check_options(opts)?;
    let doc = read_config(opts)?;
    if manifest.command == Command::Check {
        return check(doc);
    }
    fs::create_dir_all(&opts.out)?;
    match manifest.command {
        Command::Kernels => run_kernels(plant(doc, Command::Kernels)?, opts),
        Command::Simulate => run_simulate(plant(doc, Command::Simulate)?, opts),
        Command::Verify => run_verify(plant(doc, Command::Verify)?, opts),
        Command::Obstruct => match doc {
            ConfigDoc::Simplified(s) => run_obstruct(s.validate()?, opts),
            ConfigDoc::Plant(_) => Err(Error::config(
                "config",
                "`obstruct` needs a simplified configuration (lambda, psi, omega)",
            )),
        },
        Command::Check => unreachable!("handled above"),
    }
}

fn check(doc: ConfigDoc) -> Result<Vec<String>> {
    match doc {
        ConfigDoc::Simplified(s) => {
            let s = s.validate()?;
            Ok(vec![format!(
                "ok: simplified system lambda = {}, psi = {}, omega = {}",
                s.lambda, s.psi, s.omega
            )])
        }
        ConfigDoc::Plant(p) => {
            let cfg = validate_config(p)?;
            let eig = matops::eigenvalues(&cfg.psi)?;
            let eig: Vec<String> = eig.iter().map(|(re, im)| format!("{re:.6}{im:+.6}i")).collect();
            let mut lines = vec![
                format!("ok: plant with n = {}", cfg.n),
                format!("eigenvalues of psi: {}", eig.join(", ")),
                format!("psi hurwitz: {}", cfg.hurwitz),
                format!("psi + psi^T negative definite: {}", cfg.sym_neg_definite),
            ];
            if let Some(r) = matops::sym_decay_margin(&cfg.psi) {
                lines.push(format!("decay margin rho*: {r:.9}"));
            }
            Ok(lines)
        }
    }
}

fn run_kernels(cfg: ValidatedConfig, opts: &RunOptions) -> Result<Vec<String>> {
    let mk = kernel_grid(opts);
    let ks = solve_kernels(&cfg, mk)?;
    let n = cfg.n;
    let mut csv = Csv::new(&header(&["x", "xi", "K1", "K2", "Q1", "Q2"], &[("G", n), ("R", n)]));
    for (i, j) in ks.tri().nodes() {
        let mut row = vec![ks.x(i), ks.x(j), ks.k1(i, j), ks.k2(i, j), ks.q1(i, j), ks.q2(i, j)];
        row.extend_from_slice(ks.g(i, j));
        row.extend_from_slice(ks.r(i, j));
        csv.row(row);
    }
    let path = csv.write(&opts.out, "kernels.csv")?;
    let res = kernel_residual(&ks, &cfg)?;
    let mut rows: Vec<(String, f64)> = res.entries().iter().map(|(k, v)| (format!("residual_{k}"), *v)).collect();
    rows.push(("residual_transport_max".into(), res.transport_max()));
    rows.push(("boundary_defect".into(), boundary_defect(&ks, &cfg)));
    rows.push(("sweeps".into(), ks.sweeps as f64));
    rows.push(("last_change".into(), ks.last_change));
    fs::write(opts.out.join("residuals.csv"), report_csv(&rows))?;
    let mut lines = vec![format!("kernels on m_k = {mk}: {} sweeps, wrote {}", ks.sweeps, path.display())];
    lines.extend(rows.iter().map(|(k, v)| format!("{k} = {v:e}")));
    Ok(lines)
}

fn plant_setup(cfg: &ValidatedConfig, opts: &RunOptions) -> Result<(Grid, StateSnapshot)> {
    let grid = Grid::for_plant(opts.grid, opts.cfl, cfg)?;
    let ic = initial_condition(&load_ic(&opts.ic)?, &grid, cfg.n)?;
    Ok((grid, ic))
}

fn run_simulate(cfg: ValidatedConfig, opts: &RunOptions) -> Result<Vec<String>> {
    let (grid, ic) = plant_setup(&cfg, opts)?;
    let ks = solve_kernels(&cfg, kernel_grid(opts))?;
    let ks_m = ks.resample(grid.m);
    let iks = invert_kernels(&ks_m, &cfg)?;
    let lp = lyapunov_constants(&cfg, &iks);
    let observer = |s: &StateSnapshot| lp.map_or(f64::NAN, |lp| log_lyapunov(s, &ks_m, &lp, &cfg));
    let controller = match opts.controller {
        ControllerChoice::Open => Controller::OpenLoop,
        ControllerChoice::Zero => Controller::ZeroBoundary,
        ControllerChoice::Backstep => Controller::Backstepping(&ks_m),
    };
    let traj = simulate_observed(&cfg, &grid, &ic, opts.tfinal, &controller, opts.stride, Some(&observer))?;

    let n = cfg.n;
    let mut fields = Csv::new(&header(&["t", "x", "u", "p"], &[("v", n)]));
    for s in &traj.snapshots {
        for j in 0..=grid.m {
            let mut row = vec![s.t, grid.x(j), s.u[j], s.p[j]];
            row.extend(s.v.iter().map(|r| r[j]));
            fields.row(row);
        }
    }
    fields.write(&opts.out, "fields.csv")?;
    let mut norms = Csv::new(&header(&["t", "U", "norm_u", "norm_p", "norm_v", "V"], &[]));
    let last = traj.records.len() - 1;
    for (k, r) in traj.records.iter().enumerate() {
        if k % opts.stride == 0 || k == last {
            norms.row([r.t, r.input, r.norm_u, r.norm_p, r.norm_v, r.lyapunov.unwrap_or(f64::NAN).exp()]);
        }
    }
    norms.write(&opts.out, "norms.csv")?;
    if opts.svg {
        let kept: Vec<_> = traj.records.iter().enumerate().filter(|(k, _)| k % opts.stride == 0 || *k == last).map(|(_, r)| r).collect();
        let t: Vec<f64> = kept.iter().map(|r| r.t).collect();
        let series = [
            ("norm_u", kept.iter().map(|r| r.norm_u).collect()),
            ("norm_p", kept.iter().map(|r| r.norm_p).collect()),
            ("norm_v", kept.iter().map(|r| r.norm_v).collect()),
            ("total", kept.iter().map(|r| r.total_norm()).collect()),
        ];
        fs::write(opts.out.join("norms.svg"), line_plot_svg("L2 norms", &t, &series, true))?;
    }
    let first = traj.records[0].total_norm();
    let end = traj.records[last];
    Ok(vec![
        format!(
            "simulated {} steps (dt = {:e}) on m = {} with controller {:?}",
            last, traj.dt, grid.m, opts.controller
        ),
        format!("total L2 norm: {first:e} at t = 0, {:e} at t = {}", end.total_norm(), end.t),
    ])
}

fn run_verify(cfg: ValidatedConfig, opts: &RunOptions) -> Result<Vec<String>> {
    const ROUNDTRIP_STATES: u64 = 10;
    let (grid, ic) = plant_setup(&cfg, opts)?;
    let ks = solve_kernels(&cfg, kernel_grid(opts))?;
    let kres = kernel_residual(&ks, &cfg)?;
    let ks_m = ks.resample(grid.m);
    let iks = invert_kernels(&ks_m, &cfg)?;

    let mut roundtrip = 0.0f64;
    for k in 0..ROUNDTRIP_STATES {
        let s = smooth_random_state(&grid, cfg.n, opts.seed.wrapping_add(k));
        let (a, b) = forward_transform(&s, &ks_m)?;
        let (u, p) = inverse_transform(&a, &b, &s.v, &iks)?;
        for (x, y) in u.iter().zip(&s.u).chain(p.iter().zip(&s.p)) {
            roundtrip = roundtrip.max((x - y).abs());
        }
    }

    let lp = lyapunov_constants(&cfg, &iks);
    let observer = |s: &StateSnapshot| lp.map_or(f64::NAN, |lp| log_lyapunov(s, &ks_m, &lp, &cfg));
    let controller = match opts.controller {
        ControllerChoice::Open => Controller::OpenLoop,
        ControllerChoice::Zero => Controller::ZeroBoundary,
        ControllerChoice::Backstep => Controller::Backstepping(&ks_m),
    };
    let traj = simulate_observed(&cfg, &grid, &ic, opts.tfinal, &controller, opts.stride, Some(&observer))?;
    let tres = target_residual(&traj, &ks_m, &iks, &cfg)?;

    let t_star = 1.0 / cfg.lambda1 + 1.0 / cfg.lambda2;
    let window: Vec<(f64, f64)> = traj
        .records
        .iter()
        .filter(|r| r.t >= t_star)
        .filter_map(|r| r.lyapunov.map(|l| (r.t, l)))
        .collect();
    let max_increase = window
        .windows(2)
        .map(|w| (w[1].1 - w[0].1).exp_m1())
        .fold(f64::NEG_INFINITY, f64::max);
    let (wt, wl): (Vec<f64>, Vec<f64>) = window.iter().copied().unzip();
    let slope = linear_slope(&wt, &wl).unwrap_or(f64::NAN);

    let mut lyap = Csv::new(&header(&["t", "V", "logV_slope", "lnV"], &[]));
    let (mut st, mut sl, mut stt, mut stl, mut cnt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let last = traj.records.len() - 1;
    for (k, r) in traj.records.iter().enumerate() {
        let lnv = r.lyapunov.unwrap_or(f64::NAN);
        let mut running = f64::NAN;
        if r.t >= t_star && lnv.is_finite() {
            cnt += 1.0;
            st += r.t;
            sl += lnv;
            stt += r.t * r.t;
            stl += r.t * lnv;
            let den = cnt * stt - st * st;
            if cnt >= 2.0 && den > 0.0 {
                running = (cnt * stl - st * sl) / den;
            }
        }
        if k % opts.stride == 0 || k == last {
            lyap.row([r.t, lnv.exp(), running, lnv]);
        }
    }
    lyap.write(&opts.out, "lyapunov.csv")?;

    let mut rows: Vec<(String, f64)> = vec![
        ("kernel_residual_transport_max".into(), kres.transport_max()),
        ("kernel_boundary_defect".into(), boundary_defect(&ks, &cfg)),
        ("roundtrip_max_error".into(), roundtrip),
        ("resolvent_iterations".into(), iks.iterations as f64),
        ("alpha_boundary_max".into(), tres.alpha_boundary),
        ("alpha_transport_max".into(), tres.alpha_transport_max),
        ("alpha_transport_rms".into(), tres.alpha_transport_rms),
        ("beta_transport_max".into(), tres.beta_transport_max),
        ("beta_transport_rms".into(), tres.beta_transport_rms),
        ("v_residual_max".into(), tres.v_max),
        ("v_residual_rms".into(), tres.v_rms),
        ("beta_edge_max".into(), tres.beta_edge),
    ];
    if let Some(lp) = lp {
        rows.extend([
            ("rho_star".into(), lp.rho_star),
            ("mu".into(), lp.mu),
            ("vartheta".into(), lp.vartheta),
            ("ln_A".into(), lp.ln_a),
            ("B".into(), lp.b),
            ("K".into(), lp.k),
            ("nbar1".into(), lp.nbar1),
            ("nbar2".into(), lp.nbar2),
            ("nbar3".into(), lp.nbar3),
            ("t_star".into(), t_star),
            ("V_max_relative_increase".into(), max_increase),
            ("logV_slope".into(), slope),
        ]);
    }
    fs::write(opts.out.join("verify.csv"), report_csv(&rows))?;
    let mut lines = vec![format!("verify on m = {}, m_k = {}", grid.m, ks.m)];
    if lp.is_none() {
        lines.push("psi + psi^T is not negative definite: no Lyapunov certificate".into());
    }
    lines.extend(rows.iter().map(|(k, v)| format!("{k} = {v:e}")));
    Ok(lines)
}

/// Simplified initial data from an `--ic` preset (the p component is ignored).
fn scalar_ic(spec: &str, grid: &Grid) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = initial_condition(&load_ic(spec)?, grid, 1)?;
    Ok((s.u, s.v.into_iter().next().expect("n = 1")))
}

fn run_obstruct(scfg: SimplifiedConfig, opts: &RunOptions) -> Result<Vec<String>> {
    let grid = Grid::new(opts.grid, opts.cfl, scfg.lambda)?;
    let (u0, v0) = scalar_ic(&opts.ic, &grid)?;
    let steps = ((opts.tfinal / grid.dt) - 1e-9).ceil().max(1.0) as usize;
    let dt = opts.tfinal / steps as f64;
    let mut times: Vec<f64> = (0..=steps).step_by(opts.stride).map(|k| k as f64 * dt).collect();
    if !steps.is_multiple_of(opts.stride) {
        times.push(opts.tfinal);
    }
    let zero = |_: f64| 0.0;
    let (traj, label): (ScalarTrajectory, String) = match opts.controller {
        ControllerChoice::Open | ControllerChoice::Zero => (
            simulate_simplified_exact(&scfg, &u0, &v0, &zero, &times, &grid)?,
            "exact solution, U = 0".into(),
        ),
        ControllerChoice::Backstep => {
            let k = scfg.psi.abs() + 1.0;
            if subspace_feedback(&scfg, k, 1.0).degenerate {
                return Err(Error::config("omega", "subspace feedback needs omega != 0"));
            }
            let input = SimplifiedInput::SubspaceFeedback { k };
            (
                simulate_simplified_fd(&scfg, &grid, &u0, &v0, &input, opts.tfinal, opts.stride)?,
                format!("finite differences, U = -(k/omega) v(t,0) with k = {k}"),
            )
        }
    };
    let mut csv = Csv::new(&header(&["t", "R", "w_maxabs", "in_S"], &[]));
    let mut r0 = f64::NAN;
    let mut last = (0.0, 0.0);
    for s in &traj.snapshots {
        let r = functional_r(&scfg, &u0, &v0, &s.u, &s.v, &grid)?.r;
        let w = w_transform(&scfg, &s.u, &s.v, &grid)?;
        let wmax = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let (inside, _) = in_subspace_s(&scfg, &s.u, &s.v, &grid, None)?;
        if r0.is_nan() {
            r0 = r;
        }
        last = (s.t, r);
        csv.row([s.t, r, wmax, if inside { 1.0 } else { 0.0 }]);
    }
    csv.write(&opts.out, "obstruction.csv")?;
    if opts.svg {
        let t: Vec<f64> = traj.snapshots.iter().map(|s| s.t).collect();
        let rs: Vec<f64> = traj
            .snapshots
            .iter()
            .map(|s| functional_r(&scfg, &u0, &v0, &s.u, &s.v, &grid).map_or(f64::NAN, |f| f.r.abs()))
            .collect();
        fs::write(opts.out.join("obstruction.svg"), line_plot_svg("|R(t)|", &t, &[("|R|", rs)], true))?;
    }
    let (t, r) = last;
    Ok(vec![
        format!("obstruction run: {label}"),
        format!(
            "R(0) = {r0:e}, R({t}) = {r:e}, ratio {:e} vs e^(psi t) = {:e}",
            r / r0,
            (scfg.psi * t).exp()
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_example_config_roundtrip() {
        let p = PlantConfig::two_state_example();
        let doc = parse_config(&plant_to_json(&p)).unwrap();
        assert_eq!(doc, ConfigDoc::Plant(p));
    }

    #[test]
    fn shipped_config_is_the_example_plant() {
        let doc = parse_config(include_str!("../../../configs/paper_iv.json")).unwrap();
        assert_eq!(doc, ConfigDoc::Plant(PlantConfig::two_state_example()));
    }

    #[test]
    fn parses_simplified() {
        let doc = parse_config(r#"{"lambda":1,"psi":0.5,"omega":1}"#).unwrap();
        assert_eq!(doc, ConfigDoc::Simplified(SimplifiedConfig { lambda: 1.0, psi: 0.5, omega: 1.0 }));
    }

    fn plant_doc() -> Value {
        serde_json::from_str(&plant_to_json(&PlantConfig::two_state_example())).unwrap()
    }

    fn err_of(v: &Value) -> String {
        parse_config(&v.to_string()).unwrap_err().to_string()
    }

    #[test]
    fn bad_psi_row_names_path() {
        let mut v = plant_doc();
        v["psi"][1] = serde_json::json!([1.0, 2.0, 3.0]);
        let e = err_of(&v);
        assert!(e.contains("psi[1]"), "{e}");
    }

    #[test]
    fn structural_errors_name_keys() {
        let mut v = plant_doc();
        v["extra"] = serde_json::json!(1);
        assert!(err_of(&v).contains("extra"));
        let mut v = plant_doc();
        v.as_object_mut().unwrap().remove("rho");
        assert!(err_of(&v).contains("rho: missing"));
        let mut v = plant_doc();
        v["theta2"][1] = serde_json::json!("x");
        assert!(err_of(&v).contains("theta2[1]"));
        let mut v = plant_doc();
        v["omega1"] = serde_json::json!([1.0]);
        assert!(err_of(&v).contains("omega1: expected 2 entries"));
        assert!(parse_config("{").unwrap_err().to_string().contains("malformed"));
        assert!(parse_config(r#"{"lambda":1,"psi":0.5}"#).unwrap_err().to_string().contains("omega"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(parse_config("[]").unwrap_err().exit_code(), 2);
        let mut p = PlantConfig::two_state_example();
        p.lambda2 = 0.0;
        let e = validate_config(p).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("lambda2"));
    }

    #[test]
    fn number_format_has_17_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(-2.0), "-2.0000000000000000e0");
    }

    #[test]
    fn svg_is_well_formed() {
        let s = line_plot_svg("t", &[0.0, 1.0, 2.0], &[("a", vec![1.0, 0.1, 0.01])], true);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 2);
    }
}
